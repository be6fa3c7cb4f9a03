"""Part decomposition, local point clouds, canonical boxes, and box overlap tests.

A part covers the mesh region a bone influences plus its kinematic neighbors.
Sampled part clouds are expressed in the bone's canonical frame; padded
axis-aligned boxes fitted there act as the geometric prior gating the decoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import CapsuleBody, face_areas, regress_joints, rigid_inverse_np
from .errors import InputError

WEIGHT_THRESHOLD = 0.01
BOX_PADDING = 1.15


# ---------------------------------------------------------------------------
# decomposition
# ---------------------------------------------------------------------------

@dataclass
class Part:
    bone: int
    neighbor_bones: list[int]
    vertex_idx: np.ndarray        # vertices weighted to the bone or its neighbors
    face_idx: np.ndarray          # faces fully inside vertex_idx
    central_face_idx: np.ndarray  # faces fully weighted to the bone itself


@dataclass
class PartDecomposition:
    parts: list[Part]
    threshold: float = WEIGHT_THRESHOLD

    @property
    def num_parts(self) -> int:
        return len(self.parts)

    def bones(self) -> np.ndarray:
        return np.asarray([p.bone for p in self.parts], dtype=np.int64)

    def to_json(self, path) -> None:
        doc = [{
            "bone": p.bone,
            "neighbor_bones": list(p.neighbor_bones),
            "vertex_idx": p.vertex_idx.tolist(),
            "face_idx": p.face_idx.tolist(),
            "central_face_idx": p.central_face_idx.tolist(),
        } for p in self.parts]
        Path(path).write_text(json.dumps({"threshold": self.threshold, "parts": doc}))


def _body_of(body):
    return body.body if isinstance(body, CapsuleBody) else body


def decompose_parts(body, threshold=WEIGHT_THRESHOLD) -> PartDecomposition:
    """One part per bone: vertices weighted above threshold on the bone, its
    parent, or its children; pose-independent."""
    body = _body_of(body)
    W, faces = body.weights, body.faces
    above = W >= threshold                                  # (K,N)
    parts = []
    for k in range(body.num_joints):
        neigh = body.tree.neighborhood(k)
        vmask = above[neigh].any(axis=0)
        fmask = vmask[faces].all(axis=1)
        central = above[k][faces].all(axis=1)
        if not fmask.any():
            raise InputError(f"part {k} has no faces; rig is degenerate")
        parts.append(Part(
            bone=k,
            neighbor_bones=neigh,
            vertex_idx=np.flatnonzero(vmask),
            face_idx=np.flatnonzero(fmask),
            central_face_idx=np.flatnonzero(central),
        ))
    return PartDecomposition(parts, threshold)


def decompose_holistic(body) -> PartDecomposition:
    """Single-part ablation: the whole mesh attached to the root bone."""
    body = _body_of(body)
    all_faces = np.arange(body.faces.shape[0])
    part = Part(bone=0, neighbor_bones=[0],
                vertex_idx=np.arange(body.num_vertices),
                face_idx=all_faces, central_face_idx=all_faces)
    return PartDecomposition([part])


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------

def draw_surface_samples(areas, count, rng):
    """Area-proportional face picks plus uniform barycentric coordinates.

    Returns (face_pick (count,), bary (count,3)). Faces with zero total area
    are rejected.
    """
    areas = np.asarray(areas, dtype=np.float64)
    total = areas.sum()
    if total <= 0.0 or areas.size == 0:
        raise InputError("cannot sample a region with zero surface area")
    pick = rng.choice(areas.size, size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return pick, bary


def points_from_barycentric(vertices, faces, face_pick, bary):
    tri = vertices[faces[face_pick]]               # (M,3,3)
    return np.einsum("mc,mcd->md", bary, tri)


@dataclass
class PartCloud:
    """Posed-space surface samples for one part; first n_central points come
    from the bone's own central region, the rest from the full neighborhood."""

    points: np.ndarray
    n_central: int
    bone: int
    face_pick: np.ndarray
    bary: np.ndarray
    used_fallback: bool = False


def plan_part_cloud(body, decomp: PartDecomposition, k, count, seed, areas=None):
    """Pose-independent sampling plan for part k: (face_pick, bary, fallback).

    Face probabilities come from canonical template areas, so the same plan can
    be replayed against any posed vertices. The first half targets the central
    region; an empty central region falls back to the full neighborhood.
    """
    if count % 2 != 0:
        raise InputError("cloud sample count must be even")
    body = _body_of(body)
    part = decomp.parts[k]
    if areas is None:
        areas = face_areas(body.vertices, body.faces)
    rng = np.random.default_rng(seed)
    half = count // 2
    central_faces = part.central_face_idx
    used_fallback = False
    if central_faces.size == 0 or areas[central_faces].sum() <= 0.0:
        central_faces = part.face_idx
        used_fallback = True
    pick_c, bary_c = draw_surface_samples(areas[central_faces], half, rng)
    pick_f, bary_f = draw_surface_samples(areas[part.face_idx], count - half, rng)
    face_pick = np.concatenate([central_faces[pick_c], part.face_idx[pick_f]])
    bary = np.concatenate([bary_c, bary_f])
    return face_pick, bary, used_fallback


def sample_part_cloud(body, decomp: PartDecomposition, posed_vertices, k,
                      count=1000, seed=0, areas=None) -> PartCloud:
    """Sample `count` posed surface points for part k (half central, half full)."""
    face_pick, bary, used_fallback = plan_part_cloud(body, decomp, k, count, seed, areas)
    pbody = _body_of(body)
    posed_vertices = np.asarray(posed_vertices, dtype=np.float64)
    pts = points_from_barycentric(posed_vertices, pbody.faces, face_pick, bary)
    return PartCloud(points=pts, n_central=count // 2, bone=decomp.parts[k].bone,
                     face_pick=face_pick, bary=bary, used_fallback=used_fallback)


@dataclass
class LocalCloud:
    """Canonical-frame part cloud (points are bone-local)."""

    points: np.ndarray
    n_central: int
    bone: int


def canonicalize_cloud(cloud: PartCloud, transform) -> LocalCloud:
    """Project a posed part cloud into the bone canonical frame via G_k^-1."""
    inv = rigid_inverse_np(np.asarray(transform, dtype=np.float64))
    pts = cloud.points @ inv[:3, :3].T + inv[:3, 3]
    return LocalCloud(points=pts, n_central=cloud.n_central, bone=cloud.bone)


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

@dataclass
class PartBox:
    """Closed axis-aligned box in the bone canonical frame."""

    lo: np.ndarray
    hi: np.ndarray
    bone: int = -1

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not (self.lo < self.hi).all():
            raise InputError("box must satisfy lo < hi on every axis")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return ((pts >= self.lo) & (pts <= self.hi)).all(axis=1)


def box_contains(box: PartBox, point) -> int:
    """Closed-box indicator for a single canonical point."""
    return int(box.contains(np.asarray(point).reshape(1, 3))[0])


def fit_part_box(points, bone=-1, padding=BOX_PADDING, min_half=1e-3) -> PartBox:
    """Axis-aligned bounds of canonical points, half-extents scaled by `padding`.

    Degenerate (near-zero extent) axes are inflated to `min_half`.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise InputError("box fitting needs a non-empty (M,3) point set")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo) * padding, min_half)
    return PartBox(lo=center - half, hi=center + half, bone=bone)


def fit_body_boxes(body, decomp: PartDecomposition, transforms=None,
                   count=1000, seed=0) -> list[PartBox]:
    """Fit one canonical box per part from the central half of its cloud.

    With transforms=None the zero pose is used, which makes the boxes
    pose-independent; pass posed transforms to refit per pose instead.
    """
    pbody = _body_of(body)
    if transforms is None:
        joints = regress_joints(pbody)
        transforms = np.tile(np.eye(4), (pbody.num_joints, 1, 1))
        transforms[:, :3, 3] = joints
        posed = pbody.vertices
    else:
        from .body import pose_vertices_from_transforms
        posed = pose_vertices_from_transforms(pbody, transforms)
    areas = face_areas(pbody.vertices, pbody.faces)
    boxes = []
    for k in range(decomp.num_parts):
        cloud = sample_part_cloud(body, decomp, posed, k, count=count,
                                  seed=seed + 7919 * k, areas=areas)
        local = canonicalize_cloud(cloud, transforms[decomp.parts[k].bone])
        boxes.append(fit_part_box(local.points[: cloud.n_central],
                                  bone=decomp.parts[k].bone))
    return boxes


# ---------------------------------------------------------------------------
# oriented box overlap (separating axis test)
# ---------------------------------------------------------------------------

def boxes_overlap(box_a: PartBox, transform_a, box_b: PartBox, transform_b) -> bool:
    """Exact overlap test for two canonical boxes placed by rigid transforms.

    Fifteen candidate axes: the three face normals of each box and the nine
    edge cross products; near-parallel cross axes are skipped as redundant.
    Touching boxes count as overlapping.
    """
    Ta = np.asarray(transform_a, dtype=np.float64)
    Tb = np.asarray(transform_b, dtype=np.float64)
    Ra, Rb = Ta[:3, :3], Tb[:3, :3]
    ca = Ra @ box_a.center + Ta[:3, 3]
    cb = Rb @ box_b.center + Tb[:3, 3]
    d = cb - ca
    ha, hb = box_a.half, box_b.half

    axes = [Ra[:, i] for i in range(3)] + [Rb[:, i] for i in range(3)]
    for i in range(3):
        for j in range(3):
            cross = np.cross(Ra[:, i], Rb[:, j])
            if np.dot(cross, cross) > 1e-12:
                axes.append(cross)

    for axis in axes:
        ra = np.abs(ha * (axis @ Ra)).sum()
        rb = np.abs(hb * (axis @ Rb)).sum()
        if abs(axis @ d) > ra + rb:
            return False
    return True


def world_boxes_aabb(boxes: list[PartBox], transforms) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounds of the union of world-placed boxes."""
    transforms = np.asarray(transforms, dtype=np.float64)
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for box, T in zip(boxes, transforms):
        center = T[:3, :3] @ box.center + T[:3, 3]
        extent = np.abs(T[:3, :3]) @ box.half
        lo = np.minimum(lo, center - extent)
        hi = np.maximum(hi, center + extent)
    return lo, hi
