"""Geometry metrics and outputs: iso-surface extraction, IoU, self-intersection
counting, scene penetration counting, and query throughput."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from skimage import measure

from .errors import InputError
from .field import FieldState, field_forward
from .parts import world_boxes_aabb


# ---------------------------------------------------------------------------
# iso-surface extraction
# ---------------------------------------------------------------------------

@dataclass
class LabeledMesh:
    vertices: np.ndarray
    faces: np.ndarray
    labels: np.ndarray        # argmax part per vertex

    @property
    def is_empty(self) -> bool:
        return self.vertices.shape[0] == 0


def _evaluate_field(field, transforms, points):
    """(logits, labels) for either a FieldState or a plain logits callable."""
    if isinstance(field, FieldState):
        return field_forward(field, transforms, points)
    logits = np.asarray(field(points), dtype=np.float64)
    return logits, np.zeros(len(points), dtype=np.int64)


def extract_mesh(field, transforms=None, resolution=64, bounds=None) -> LabeledMesh:
    """Marching cubes over a regular grid at the zero-logit level.

    `field` is a FieldState (with refreshed codes for `transforms`) or a
    callable points -> logits. Grid values that are exactly zero (all parts
    masked) are nudged to a small negative so the plateau reads as outside.
    An all-negative or all-positive grid yields an empty mesh with a warning.
    """
    if resolution < 16:
        raise InputError("mesh extraction needs resolution >= 16")
    if bounds is None:
        if not isinstance(field, FieldState):
            raise InputError("bounds are required for a bare field callable")
        lo, hi = world_boxes_aabb(field.boxes, field.part_transforms(
            torch.as_tensor(np.asarray(transforms, dtype=np.float64))).numpy())
        pad = 0.05 * (hi - lo)
        lo, hi = lo - pad, hi + pad
    else:
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)

    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    logits = np.empty(grid.shape[0])
    chunk = 65536
    for start in range(0, grid.shape[0], chunk):
        logits[start: start + chunk] = _evaluate_field(
            field, transforms, grid[start: start + chunk])[0]
    volume = logits.reshape(resolution, resolution, resolution)
    volume = np.where(volume == 0.0, -1e-6, volume)

    if volume.min() >= 0.0 or volume.max() <= 0.0:
        warnings.warn("field has no zero crossing in the requested bounds; "
                      "returning an empty mesh")
        return LabeledMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                           np.zeros(0, dtype=np.int64))

    spacing = tuple((hi - lo) / (resolution - 1))
    verts, faces, _, _ = measure.marching_cubes(volume, level=0.0, spacing=spacing,
                                                gradient_direction="descent")
    verts = verts + lo
    _, labels = _evaluate_field(field, transforms, verts)
    return LabeledMesh(vertices=verts, faces=faces.astype(np.int64), labels=labels)


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------

@dataclass
class IoUReport:
    iou_uniform: float
    iou_surface: float
    n_uniform: int
    n_surface: int
    seed: int


def iou(field, oracle, mode, count, seed=0, transforms=None,
        surface_sigma=0.01, bbox_pad=0.10) -> float:
    """Sampled intersection-over-union of field vs ground-truth inside sets.

    uniform: points uniform in the oracle AABB padded 10% per axis.
    surface: oracle surface points with isotropic N(0, 0.01) offsets.
    """
    rng = np.random.default_rng(seed)
    if mode == "uniform":
        lo, hi = oracle.aabb(bbox_pad)
        points = lo + rng.random((count, 3)) * (hi - lo)
    elif mode == "surface":
        points = oracle.sample_surface(count, rng)
        points = points + rng.normal(0.0, surface_sigma, size=points.shape)
    else:
        raise InputError(f"unknown IoU mode {mode!r}")
    logits, _ = _evaluate_field(field, transforms, points)
    pred = logits > 0.0
    gt = np.asarray(oracle.contains(points), dtype=bool)
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    return float((pred & gt).sum() / union)


def iou_report(field, oracle, n_uniform=20000, n_surface=20000, seed=0,
               transforms=None) -> IoUReport:
    return IoUReport(
        iou_uniform=iou(field, oracle, "uniform", n_uniform, seed=seed,
                        transforms=transforms),
        iou_surface=iou(field, oracle, "surface", n_surface, seed=seed + 1,
                        transforms=transforms),
        n_uniform=n_uniform, n_surface=n_surface, seed=seed)


# ---------------------------------------------------------------------------
# triangle-triangle self-intersection counting
# ---------------------------------------------------------------------------

def _tri_aabbs(vertices, faces):
    tri = vertices[faces]
    return tri.min(axis=1), tri.max(axis=1)


class _BVH:
    """Median-split AABB tree over triangle boxes."""

    def __init__(self, lo, hi, leaf_size=8):
        self.lo, self.hi = lo, hi
        centers = 0.5 * (lo + hi)
        self.nodes = []               # (lo, hi, left, right, start, end)
        self.order = np.arange(lo.shape[0])
        self._build(0, lo.shape[0], centers, leaf_size)

    def _build(self, start, end, centers, leaf_size):
        idx = self.order[start:end]
        node_lo = self.lo[idx].min(axis=0)
        node_hi = self.hi[idx].max(axis=0)
        node_id = len(self.nodes)
        self.nodes.append([node_lo, node_hi, -1, -1, start, end])
        if end - start <= leaf_size:
            return node_id
        axis = int(np.argmax(node_hi - node_lo))
        mid = (start + end) // 2
        part = np.argsort(centers[idx, axis], kind="stable")
        self.order[start:end] = idx[part]
        left = self._build(start, mid, centers, leaf_size)
        right = self._build(mid, end, centers, leaf_size)
        self.nodes[node_id][2] = left
        self.nodes[node_id][3] = right
        return node_id

    def query(self, qlo, qhi) -> np.ndarray:
        hits = []
        stack = [0]
        while stack:
            node = self.nodes[stack.pop()]
            if (qlo > node[1]).any() or (qhi < node[0]).any():
                continue
            if node[2] < 0:
                idx = self.order[node[4]: node[5]]
                sel = ~((qlo > self.hi[idx]).any(axis=1) | (qhi < self.lo[idx]).any(axis=1))
                hits.append(idx[sel])
            else:
                stack.append(node[2])
                stack.append(node[3])
        return np.concatenate(hits) if hits else np.zeros(0, dtype=np.int64)


def _project_interval(d, p, dist):
    """Interval of a triangle on the plane-intersection line (Moller style)."""
    # order vertices so the lone-signed one is in the middle
    signs = dist > 0
    if signs[0] == signs[2] and signs[0] != signs[1]:
        order = [0, 1, 2]
    elif signs[0] == signs[1] and signs[0] != signs[2]:
        order = [0, 2, 1]
    else:
        order = [1, 0, 2]
    i, j, k = order
    t1 = p[i] + (p[j] - p[i]) * dist[i] / (dist[i] - dist[j])
    t2 = p[k] + (p[j] - p[k]) * dist[k] / (dist[k] - dist[j])
    return min(t1, t2), max(t1, t2)


def _cross2(u, v):
    return u[0] * v[1] - u[1] * v[0]


def _coplanar_overlap(t1, t2, normal):
    axis = int(np.argmax(np.abs(normal)))
    keep = [i for i in range(3) if i != axis]
    a, b = t1[:, keep], t2[:, keep]

    def seg_intersect(p1, p2, p3, p4):
        d1 = _cross2(p4 - p3, p1 - p3)
        d2 = _cross2(p4 - p3, p2 - p3)
        d3 = _cross2(p2 - p1, p3 - p1)
        d4 = _cross2(p2 - p1, p4 - p1)
        return ((d1 * d2) < 0) and ((d3 * d4) < 0)

    for i in range(3):
        for j in range(3):
            if seg_intersect(a[i], a[(i + 1) % 3], b[j], b[(j + 1) % 3]):
                return True

    def point_in_tri(p, tri):
        s = 0
        for i in range(3):
            c = _cross2(tri[(i + 1) % 3] - tri[i], p - tri[i])
            if c == 0:
                continue
            s = s or np.sign(c)
            if np.sign(c) != s:
                return False
        return True

    return point_in_tri(a[0], b) or point_in_tri(b[0], a)


def triangles_intersect(t1, t2, eps_scale=1e-10) -> bool:
    """Exact-ish Moller triangle-triangle intersection test."""
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    n2 = np.cross(t2[1] - t2[0], t2[2] - t2[0])
    scale = max(np.abs(t1).max(), np.abs(t2).max(), 1.0)
    eps = eps_scale * scale * max(np.linalg.norm(n2), 1e-30)
    d1 = (t1 - t2[0]) @ n2
    if (d1 > eps).all() or (d1 < -eps).all():
        return False
    n1 = np.cross(t1[1] - t1[0], t1[2] - t1[0])
    eps1 = eps_scale * scale * max(np.linalg.norm(n1), 1e-30)
    d2 = (t2 - t1[0]) @ n1
    if (d2 > eps1).all() or (d2 < -eps1).all():
        return False
    if (np.abs(d1) <= eps).all() and (np.abs(d2) <= eps1).all():
        return _coplanar_overlap(t1, t2, n1)
    direction = np.cross(n1, n2)
    axis = int(np.argmax(np.abs(direction)))
    p1 = t1[:, axis]
    p2 = t2[:, axis]
    d1 = np.where(np.abs(d1) <= eps, eps, d1)
    d2 = np.where(np.abs(d2) <= eps1, eps1, d2)
    lo1, hi1 = _project_interval(direction, p1, d1)
    lo2, hi2 = _project_interval(direction, p2, d2)
    return not (hi1 < lo2 or hi2 < lo1)


def count_self_intersecting_triangles(vertices, faces) -> int:
    """Triangles intersecting at least one non-adjacent triangle.

    Adjacency means sharing any vertex (shared-edge contacts are legitimate).
    AABB BVH broad phase, Moller narrow phase.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if faces.shape[0] == 0:
        return 0
    lo, hi = _tri_aabbs(vertices, faces)
    bvh = _BVH(lo, hi)
    tri = vertices[faces]
    face_sets = [set(f) for f in faces]
    flagged = np.zeros(faces.shape[0], dtype=bool)
    for i in range(faces.shape[0]):
        for j in bvh.query(lo[i], hi[i]):
            if j <= i:
                continue
            if face_sets[i] & face_sets[int(j)]:
                continue
            if triangles_intersect(tri[i], tri[int(j)]):
                flagged[i] = True
                flagged[j] = True
    return int(flagged.sum())


# ---------------------------------------------------------------------------
# scene penetrations and throughput
# ---------------------------------------------------------------------------

class HalfSpaceScene:
    """Analytic scene: everything strictly behind the plane is solid."""

    def __init__(self, point, normal):
        self.point = np.asarray(point, dtype=np.float64)
        normal = np.asarray(normal, dtype=np.float64)
        self.normal = normal / np.linalg.norm(normal)

    def inside(self, points) -> np.ndarray:
        return (np.asarray(points) - self.point) @ self.normal < 0.0


class BoxScene:
    """Analytic scene: a solid axis-aligned box (open boundary)."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)

    def inside(self, points) -> np.ndarray:
        pts = np.asarray(points)
        return ((pts > self.lo) & (pts < self.hi)).all(axis=1)


def count_penetrations(vertices, scene_inside) -> int:
    """Body vertices strictly inside the scene geometry."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.shape[0] == 0:
        return 0
    fn = scene_inside.inside if hasattr(scene_inside, "inside") else scene_inside
    return int(np.asarray(fn(vertices), dtype=bool).sum())


def bench_throughput(state: FieldState, transforms, count=10000, repeats=5,
                     seed=0, threads=1, bounds=None) -> dict:
    """Wall-clock of field_forward on random in-bounds queries.

    Returns median and p95 milliseconds over `repeats`, plus the per-10k-query
    normalization used in the metrics table.
    """
    transforms_np = np.asarray(transforms, dtype=np.float64)
    if bounds is None:
        lo, hi = world_boxes_aabb(state.boxes, transforms_np[
            [b.bone for b in state.boxes]])
        pad = 0.10 * (hi - lo)
        lo, hi = lo - pad, hi + pad
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    rng = np.random.default_rng(seed)
    queries = lo + rng.random((count, 3)) * (hi - lo)

    old_threads = torch.get_num_threads()
    torch.set_num_threads(threads)
    try:
        field_forward(state, transforms_np, queries[: min(count, 1024)])  # warmup
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            field_forward(state, transforms_np, queries)
            times.append((time.perf_counter() - t0) * 1000.0)
    finally:
        torch.set_num_threads(old_threads)
    times = np.asarray(times)
    return {
        "count": count,
        "repeats": repeats,
        "threads": threads,
        "median_ms": float(np.median(times)),
        "p95_ms": float(np.percentile(times, 95)),
        "ms_per_10k": float(np.median(times) * 10000.0 / count),
    }
