"""Generic articulated body model.

Canonical template mesh + skinning weights + joint regressor + kinematic tree,
posed through forward kinematics and linear blend skinning. Bone transforms are
the sole pose/shape carrier downstream: shape coefficients can be recovered from
them, and vertices can be posed from them directly. A synthetic capsule-skeleton
generator provides bodies with an analytic inside test for ground truth.

All public functions take and return numpy arrays; the differentiable torch
kernels (`axis_angle_to_matrix`, `fk_transforms`, `skin_points`, ...) are shared
with the neural field so there is a single implementation of the kinematics.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InputError, NumericError

BODY_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# kinematic tree
# ---------------------------------------------------------------------------

@dataclass
class KinematicTree:
    """Joint hierarchy as a per-joint parent index; the root stores -1.

    Parents must be topologically ordered (parent index < joint index) with
    exactly one root.
    """

    parents: np.ndarray

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        if self.parents.size == 0:
            raise InputError("kinematic tree needs at least one joint")
        roots = np.flatnonzero(self.parents < 0)
        if roots.size != 1 or roots[0] != 0:
            raise InputError("kinematic tree must have exactly one root at index 0")
        for k, p in enumerate(self.parents):
            if k > 0 and not 0 <= p < k:
                raise InputError(f"joint {k} has parent {p}; parents must precede children")

    @property
    def num_joints(self) -> int:
        return int(self.parents.size)

    def children(self, k) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.parents == k)]

    def ancestors(self, k) -> list[int]:
        """Ordered chain root..k, inclusive of k."""
        chain = [int(k)]
        while self.parents[chain[0]] >= 0:
            chain.insert(0, int(self.parents[chain[0]]))
        return chain

    def neighborhood(self, k) -> list[int]:
        """Joint k plus its parent and children."""
        out = [int(k)]
        if self.parents[k] >= 0:
            out.append(int(self.parents[k]))
        out.extend(self.children(k))
        return out

    def adjacent(self, i, j) -> bool:
        return self.parents[i] == j or self.parents[j] == i

    def hop_distance(self, i, j) -> int:
        """Edge count between joints i and j in the tree."""
        ai, aj = self.ancestors(i), self.ancestors(j)
        common = 0
        for a, b in zip(ai, aj):
            if a != b:
                break
            common += 1
        return (len(ai) - common) + (len(aj) - common)


# ---------------------------------------------------------------------------
# differentiable kinematics kernels (torch)
# ---------------------------------------------------------------------------

def _skew(v):
    z = torch.zeros_like(v[..., :1])
    return torch.stack([
        torch.cat([z, -v[..., 2:3], v[..., 1:2]], -1),
        torch.cat([v[..., 2:3], z, -v[..., 0:1]], -1),
        torch.cat([-v[..., 1:2], v[..., 0:1], z], -1),
    ], -2)


def axis_angle_to_matrix(aa: torch.Tensor) -> torch.Tensor:
    """Rodrigues for (..., 3) axis-angle vectors.

    A series branch below ~1e-8 rad (1e-4 for float32) keeps the value and the
    gradient finite at zero rotation.
    """
    sq = (aa * aa).sum(-1, keepdim=True)
    small_thr = 1e-16 if aa.dtype == torch.float64 else 1e-8
    small = sq < small_thr
    sq_safe = torch.where(small, torch.ones_like(sq), sq)
    theta = torch.sqrt(sq_safe)
    a = torch.where(small, 1.0 - sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(theta)) / sq_safe)
    K = _skew(aa)
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(K.shape)
    return eye + a.unsqueeze(-1) * K + b.unsqueeze(-1) * (K @ K)


def homogeneous(R: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Pack rotation (...,3,3) and translation (...,3) into (...,4,4)."""
    top = torch.cat([R, t.unsqueeze(-1)], dim=-1)
    bottom = R.new_tensor([0.0, 0.0, 0.0, 1.0]).expand(R.shape[:-2] + (1, 4))
    return torch.cat([top, bottom], dim=-2)


def rigid_inverse(T: torch.Tensor) -> torch.Tensor:
    """Closed-form inverse of rigid (...,4,4) transforms."""
    Rt = T[..., :3, :3].transpose(-1, -2)
    t = -(Rt @ T[..., :3, 3: 4]).squeeze(-1)
    return homogeneous(Rt, t)


def apply_transform(T: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Apply (...,4,4) to (...,3) points (leading dims must match)."""
    return (T[..., :3, :3] @ pts.unsqueeze(-1)).squeeze(-1) + T[..., :3, 3]


def fk_transforms(parents, rot: torch.Tensor, joints: torch.Tensor) -> torch.Tensor:
    """Chain per-joint rotations into world bone transforms.

    rot: (...,K,3,3) local rotations, joints: (K,3) canonical positions.
    Local translation of joint k is its offset from the parent joint; the root
    carries its absolute position. Returns (...,K,4,4).
    """
    parents = np.asarray(parents)
    K = parents.size
    rel = torch.cat([joints[:1], joints[1:] - joints[parents[1:]]], dim=0)
    rel = rel.expand(rot.shape[:-3] + (K, 3))
    local = homogeneous(rot, rel)
    chain = [local[..., 0, :, :]]
    for k in range(1, K):
        chain.append(chain[parents[k]] @ local[..., k, :, :])
    return torch.stack(chain, dim=-3)


def blend_transforms(weights: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    """Per-vertex blended transform: weights (K,N) x M (...,K,4,4) -> (...,N,4,4)."""
    return torch.einsum("kn,...kij->...nij", weights, M)


def skin_points(weights: torch.Tensor, M: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Blend skinning of canonical points (N,3) by per-bone transforms M."""
    T = blend_transforms(weights, M)
    return apply_transform(T, pts)


# ---------------------------------------------------------------------------
# parametric body
# ---------------------------------------------------------------------------

@dataclass
class ParametricBody:
    """Template mesh, skinning weights (K,N), joint regressor (K,N), tree.

    shape_basis: optional (S,N,3) identity correctives.
    pose_basis: optional (9*(K-1),N,3) pose correctives keyed on vec(R_j - I).
    """

    vertices: np.ndarray
    faces: np.ndarray
    weights: np.ndarray
    joint_regressor: np.ndarray
    tree: KinematicTree
    shape_basis: np.ndarray | None = None
    pose_basis: np.ndarray | None = None
    name: str = "body"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        if self.shape_basis is not None:
            self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        if self.pose_basis is not None:
            self.pose_basis = np.asarray(self.pose_basis, dtype=np.float64)
        self.validate()

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.tree.num_joints

    @property
    def num_shape_coeffs(self) -> int:
        return 0 if self.shape_basis is None else self.shape_basis.shape[0]

    def validate(self):
        n, k = self.num_vertices, self.tree.num_joints
        if self.vertices.shape != (n, 3):
            raise InputError("vertices must be (N,3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise InputError("faces must be (F,3)")
        if self.faces.min(initial=0) < 0 or self.faces.max(initial=-1) >= n:
            raise InputError("faces index out-of-range vertices")
        if self.weights.shape != (k, n):
            raise InputError(f"weights must be (K,N)=({k},{n})")
        col = self.weights.sum(axis=0)
        if not np.allclose(col, 1.0, atol=1e-6):
            raise InputError("skinning weight columns must sum to 1 within 1e-6")
        if self.weights.min() < 0.0 or self.weights.max() > 1.0 + 1e-9:
            raise InputError("skinning weights must lie in [0,1]")
        if self.joint_regressor.shape != (k, n):
            raise InputError(f"joint_regressor must be (K,N)=({k},{n})")
        if not np.allclose(self.joint_regressor.sum(axis=1), 1.0, atol=1e-6):
            raise InputError("joint regressor rows must sum to 1 within 1e-6")
        if self.shape_basis is not None and self.shape_basis.shape[1:] != (n, 3):
            raise InputError("shape_basis must be (S,N,3)")
        if self.pose_basis is not None and self.pose_basis.shape != (9 * (k - 1), n, 3):
            raise InputError("pose_basis must be (9*(K-1),N,3)")

    def canonical_vertices(self, beta=None, theta=None) -> np.ndarray:
        """Template plus shape correctives (and pose correctives when present)."""
        v = self.vertices.copy()
        if beta is not None and self.num_shape_coeffs:
            beta = _check_beta(self, beta)
            v += np.einsum("s,snd->nd", beta, self.shape_basis)
        if theta is not None and self.pose_basis is not None:
            feats = _pose_features(self, theta)
            v += np.einsum("f,fnd->nd", feats, self.pose_basis)
        return v

    def snapshot(self, beta=None, dtype=torch.float32) -> "BodySnapshot":
        return BodySnapshot.build(self, beta=beta, dtype=dtype)


def _check_beta(body: ParametricBody, beta) -> np.ndarray:
    beta = np.zeros(body.num_shape_coeffs) if beta is None else \
        np.asarray(beta, dtype=np.float64).reshape(-1)
    if beta.size != body.num_shape_coeffs:
        raise InputError(f"beta has {beta.size} coeffs, body expects {body.num_shape_coeffs}")
    if not np.all(np.isfinite(beta)):
        raise InputError("beta entries must be finite")
    return beta


def _check_theta(body_or_k, theta) -> np.ndarray:
    k = body_or_k if isinstance(body_or_k, int) else body_or_k.num_joints
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
    if theta.shape != (k, 3):
        raise InputError(f"theta must be (K,3)=({k},3)")
    if not np.all(np.isfinite(theta)):
        raise InputError("theta entries must be finite")
    return theta


def _pose_features(body: ParametricBody, theta) -> np.ndarray:
    theta = _check_theta(body, theta)
    with torch.no_grad():
        rots = axis_angle_to_matrix(torch.as_tensor(theta[1:], dtype=torch.float64))
    eye = np.eye(3)
    return (rots.numpy() - eye).reshape(-1)


@dataclass
class BodySnapshot:
    """Torch view of a body at a fixed shape, ready for posing and gradients."""

    parents: np.ndarray
    v_can: torch.Tensor          # (N,3) canonical vertices at this shape
    weights: torch.Tensor        # (K,N)
    joints: torch.Tensor         # (K,3) canonical joints at this shape
    zero_inv: torch.Tensor       # (K,4,4) inverse of the zero-pose transforms
    faces: torch.Tensor          # (F,3) long
    face_areas: np.ndarray       # (F,) canonical face areas
    beta: np.ndarray

    @classmethod
    def build(cls, body: ParametricBody, beta=None, dtype=torch.float32) -> "BodySnapshot":
        beta = _check_beta(body, beta)
        v_can = body.canonical_vertices(beta)
        joints = body.joint_regressor @ v_can
        zero_inv = np.tile(np.eye(4), (body.num_joints, 1, 1))
        zero_inv[:, :3, 3] = -joints
        return cls(
            parents=body.tree.parents.copy(),
            v_can=torch.as_tensor(v_can, dtype=dtype),
            weights=torch.as_tensor(body.weights, dtype=dtype),
            joints=torch.as_tensor(joints, dtype=dtype),
            zero_inv=torch.as_tensor(zero_inv, dtype=dtype),
            faces=torch.as_tensor(body.faces, dtype=torch.long),
            face_areas=face_areas(v_can, body.faces),
            beta=beta,
        )

    @property
    def dtype(self):
        return self.v_can.dtype

    def pose(self, theta: torch.Tensor):
        """theta (K,3) -> (posed vertices (N,3), bone transforms (K,4,4))."""
        rot = axis_angle_to_matrix(theta)
        G = fk_transforms(self.parents, rot, self.joints)
        V = skin_points(self.weights, G @ self.zero_inv, self.v_can)
        return V, G

    def pose_from_transforms(self, G: torch.Tensor) -> torch.Tensor:
        """Posed vertices directly from bone transforms (K,4,4)."""
        return skin_points(self.weights, G @ self.zero_inv, self.v_can)


# ---------------------------------------------------------------------------
# numpy-facing operations
# ---------------------------------------------------------------------------

def regress_joints(body: ParametricBody, beta=None) -> np.ndarray:
    """Canonical joint locations (K,3) regressed from the shaped template."""
    beta = _check_beta(body, beta)
    v = body.vertices.copy()
    if body.num_shape_coeffs:
        v += np.einsum("s,snd->nd", beta, body.shape_basis)
    return body.joint_regressor @ v


def forward_kinematics(tree: KinematicTree, theta, joints) -> np.ndarray:
    """World bone transforms (K,4,4) from axis-angle pose and canonical joints."""
    theta = _check_theta(tree.num_joints, theta)
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape != (tree.num_joints, 3):
        raise InputError("joints must be (K,3)")
    with torch.no_grad():
        rot = axis_angle_to_matrix(torch.as_tensor(theta, dtype=torch.float64))
        G = fk_transforms(tree.parents, rot, torch.as_tensor(joints, dtype=torch.float64))
    return G.numpy()


def skin_vertices(body: ParametricBody, beta=None, theta=None):
    """Pose the body; returns (posed vertices (N,3), bone transforms (K,4,4))."""
    theta = np.zeros((body.num_joints, 3)) if theta is None else _check_theta(body, theta)
    snap = body.snapshot(beta=beta, dtype=torch.float64)
    v_can = snap.v_can
    if body.pose_basis is not None:
        corr = np.einsum("f,fnd->nd", _pose_features(body, theta), body.pose_basis)
        v_can = v_can + torch.as_tensor(corr, dtype=torch.float64)
    with torch.no_grad():
        rot = axis_angle_to_matrix(torch.as_tensor(theta, dtype=torch.float64))
        G = fk_transforms(snap.parents, rot, snap.joints)
        V = skin_points(snap.weights, G @ snap.zero_inv, v_can)
    return V.numpy(), G.numpy()


def pose_vertices_from_transforms(body: ParametricBody, transforms, beta=None) -> np.ndarray:
    """Posed vertices from bone transforms alone (shape recovered when possible)."""
    transforms = validate_transforms(transforms)
    if beta is None and body.num_shape_coeffs:
        beta, _ = shape_from_transforms(body, transforms)
    snap = body.snapshot(beta=beta, dtype=torch.float64)
    with torch.no_grad():
        V = snap.pose_from_transforms(torch.as_tensor(transforms, dtype=torch.float64))
    return V.numpy()


def validate_transforms(transforms, tol=1e-5) -> np.ndarray:
    """Check rigid-transform invariants; returns the array as float64 (K,4,4)."""
    G = np.asarray(transforms, dtype=np.float64)
    if G.ndim != 3 or G.shape[1:] != (4, 4):
        raise InputError("bone transforms must be (K,4,4)")
    if not np.all(np.isfinite(G)):
        raise InputError("bone transforms must be finite")
    if not np.allclose(G[:, 3, :], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
        raise InputError("bone transforms must have (0,0,0,1) bottom rows")
    R = G[:, :3, :3]
    rrt = np.einsum("kij,klj->kil", R, R)
    if not np.allclose(rrt, np.eye(3), atol=tol):
        raise InputError("rotation blocks must be orthonormal within tolerance")
    if not np.allclose(np.linalg.det(R), 1.0, atol=tol):
        raise InputError("rotation blocks must have determinant +1")
    return G


def rigid_inverse_np(transforms) -> np.ndarray:
    G = np.asarray(transforms, dtype=np.float64)
    Rt = np.swapaxes(G[..., :3, :3], -1, -2)
    out = np.tile(np.eye(4), G.shape[:-2] + (1, 1))
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, G[..., :3, 3])
    return out


def joints_from_transforms(tree: KinematicTree, transforms) -> np.ndarray:
    """Recover canonical joints (K,3) from bone transforms.

    The translation of each root-relative local transform G_p^-1 G_k is the
    canonical parent-to-joint offset, independent of pose.
    """
    G = validate_transforms(transforms)
    if G.shape[0] != tree.num_joints:
        raise InputError("transform count does not match the tree")
    inv = rigid_inverse_np(G)
    J = np.empty((tree.num_joints, 3))
    J[0] = G[0, :3, 3]
    for k in range(1, tree.num_joints):
        p = tree.parents[k]
        local = inv[p] @ G[k]
        J[k] = J[p] + local[:3, 3]
    return J


def shape_from_transforms(body: ParametricBody, transforms):
    """Recover shape coefficients from bone transforms by least squares.

    Joints are read from the root-relative local transforms, so only the
    parent-relative offsets J_k - J_parent enter the solve; they are invariant
    to any global rigid transform baked into the bone transforms. Returns
    (beta, residual in meters); raises NumericError when the regressed-basis
    system is rank-deficient.
    """
    J = joints_from_transforms(body.tree, transforms)
    parents = body.tree.parents
    rel = J[1:] - J[parents[1:]]                                       # (K-1,3)
    reg_rel = body.joint_regressor[1:] - body.joint_regressor[parents[1:]]
    target = (rel - reg_rel @ body.vertices).reshape(-1)
    S = body.num_shape_coeffs
    if S == 0:
        return np.zeros(0), float(np.linalg.norm(target))
    if S > 3 * body.num_joints:
        raise InputError("more shape coefficients than joint equations")
    A = np.stack([(reg_rel @ body.shape_basis[s]).reshape(-1)
                  for s in range(S)], axis=1)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= sv[0] * max(A.shape) * np.finfo(np.float64).eps * 10:
        raise NumericError("shape recovery system is rank-deficient")
    beta, _, _, _ = np.linalg.lstsq(A, target, rcond=None)
    residual = float(np.linalg.norm(A @ beta - target))
    return beta, residual


# ---------------------------------------------------------------------------
# mesh helpers
# ---------------------------------------------------------------------------

def face_areas(vertices, faces) -> np.ndarray:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def check_watertight(faces, num_vertices) -> None:
    """Every edge must be shared by exactly two consistently wound faces."""
    faces = np.asarray(faces, dtype=np.int64)
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    keys = directed[:, 0] * num_vertices + directed[:, 1]
    if np.unique(keys).size != keys.size:
        raise InputError("mesh is not watertight: repeated directed edge")
    rev = directed[:, 1] * num_vertices + directed[:, 0]
    if not np.isin(keys, rev).all():
        raise InputError("mesh is not watertight: boundary or inconsistent edge")


def mesh_face_components(faces, num_vertices) -> np.ndarray:
    """Connected-component label per face (components linked by shared vertices)."""
    faces = np.asarray(faces, dtype=np.int64)
    parent = np.arange(num_vertices)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for f in faces:
        r0 = find(f[0])
        for v in f[1:]:
            rv = find(v)
            if rv != r0:
                parent[rv] = r0
    roots = np.array([find(f[0]) for f in faces])
    _, labels = np.unique(roots, return_inverse=True)
    return labels


# ---------------------------------------------------------------------------
# synthetic capsule body
# ---------------------------------------------------------------------------

@dataclass
class CapsuleBody:
    """A capsule per bone plus the derived skinned mesh body.

    The capsules give an analytic inside test at any pose (at the canonical
    shape), used as ground-truth occupancy.
    """

    body: ParametricBody
    segments: np.ndarray   # (K,2,3) canonical endpoints
    radii: np.ndarray      # (K,)
    _joints: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_parts(self) -> int:
        return int(self.radii.size)

    def canonical_joints(self) -> np.ndarray:
        if self._joints is None:
            self._joints = regress_joints(self.body)
        return self._joints

    def posed_segments(self, transforms=None) -> np.ndarray:
        """Rigidly posed capsule endpoints (K,2,3)."""
        if transforms is None:
            return self.segments.copy()
        G = validate_transforms(transforms)
        J = self.canonical_joints()
        R = G[:, :3, :3]
        t = G[:, :3, 3]
        rel = self.segments - J[:, None, :]
        return np.einsum("kij,ksj->ksi", R, rel) + t[:, None, :]

    def part_surface_values(self, points, transforms=None) -> np.ndarray:
        """Signed distance to each capsule surface (P,K); negative inside."""
        seg = self.posed_segments(transforms)
        d = _point_segment_distance(np.asarray(points, dtype=np.float64),
                                    seg[:, 0], seg[:, 1])
        return d - self.radii[None, :]

    def contains(self, points, transforms=None) -> np.ndarray:
        """Analytic occupancy: inside the union of posed capsules."""
        return (self.part_surface_values(points, transforms) <= 0.0).any(axis=1)

    def part_contains(self, points, transforms=None) -> np.ndarray:
        return self.part_surface_values(points, transforms) <= 0.0


def _point_segment_distance(points, a, b) -> np.ndarray:
    """Distances from points (P,3) to segments a,b (K,3) -> (P,K)."""
    ab = b - a                                              # (K,3)
    denom = np.maximum((ab * ab).sum(-1), 1e-18)            # (K,)
    ap = points[:, None, :] - a[None, :, :]                 # (P,K,3)
    t = np.clip((ap * ab[None]).sum(-1) / denom, 0.0, 1.0)  # (P,K)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def _orthonormal_frame(direction):
    z = direction / np.linalg.norm(direction)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(z, helper)
    u /= np.linalg.norm(u)
    v = np.cross(z, u)
    return u, v, z


def capsule_mesh(a, b, radius, n_seg=32, n_cap=8, n_cyl=4, radius_scale=None):
    """Closed triangulated capsule around segment a-b.

    radius_scale defaults to the midpoint compensation 2/(1+cos(pi/n_seg)) so
    the faceted surface straddles the true capsule instead of inscribing it.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if radius_scale is None:
        radius_scale = 2.0 / (1.0 + np.cos(np.pi / n_seg))
    r = radius * radius_scale
    u, v, z = _orthonormal_frame(b - a)
    az = np.linspace(0.0, 2.0 * np.pi, n_seg, endpoint=False)
    ring_dirs = np.outer(np.cos(az), u) + np.outer(np.sin(az), v)    # (n_seg,3)

    rings = []
    for i in range(1, n_cap + 1):                                    # bottom cap
        phi = -0.5 * np.pi + 0.5 * np.pi * i / n_cap
        rings.append(a + r * np.sin(phi) * z + r * np.cos(phi) * ring_dirs)
    for j in range(1, n_cyl):                                        # cylinder wall
        rings.append(a + (j / n_cyl) * (b - a) + r * ring_dirs)
    for i in range(0, n_cap):                                        # top cap
        phi = 0.5 * np.pi * i / n_cap
        rings.append(b + r * np.sin(phi) * z + r * np.cos(phi) * ring_dirs)

    verts = [a - r * z] + [p for ring in rings for p in ring] + [b + r * z]
    verts = np.asarray(verts)
    n_rings = len(rings)
    base_ring_index = n_cap - 1                 # ring lying exactly in the plane of a

    def ring_idx(i, s):
        return 1 + i * n_seg + (s % n_seg)

    faces = []
    for s in range(n_seg):                      # bottom pole fan
        faces.append([0, ring_idx(0, s + 1), ring_idx(0, s)])
    for i in range(n_rings - 1):
        for s in range(n_seg):
            q00, q01 = ring_idx(i, s), ring_idx(i, s + 1)
            q10, q11 = ring_idx(i + 1, s), ring_idx(i + 1, s + 1)
            faces.append([q00, q01, q11])
            faces.append([q00, q11, q10])
    top = len(verts) - 1
    for s in range(n_seg):                      # top pole fan
        faces.append([top, ring_idx(n_rings - 1, s), ring_idx(n_rings - 1, s + 1)])
    faces = np.asarray(faces, dtype=np.int64)

    base_ring = np.arange(1 + base_ring_index * n_seg, 1 + (base_ring_index + 1) * n_seg)
    return verts, faces, base_ring


def _rotate_about(vec, axis, angle):
    axis = axis / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    return vec * c + np.cross(axis, vec) * s + axis * np.dot(axis, vec) * (1 - c)


def _capsule_rest_box(a, b, r, pad=1.15):
    lo = np.minimum(a, b) - r * 1.03
    hi = np.maximum(a, b) + r * 1.03
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * pad
    return center - half, center + half


def _boxes_separated(lo1, hi1, lo2, hi2, margin=0.02):
    return float(np.maximum(lo1 - hi2, lo2 - hi1).max()) > margin


def _sample_skeleton(num_parts, rng, branching):
    """Greedy rest-pose layout: each bone direction is resampled until its
    padded box clears every previously placed non-adjacent bone, so collision
    candidates start empty at the rest pose. Returns None when stuck."""
    parents = [-1]
    for k in range(1, num_parts):
        if not branching or k == 1 or rng.random() < 0.6:
            parents.append(k - 1)
        else:
            parents.append(int(rng.integers(0, k)))
    parents = np.asarray(parents)
    n_children = np.asarray([(parents == k).sum() for k in range(num_parts)])

    dirs = np.zeros((num_parts, 3))
    dirs[0] = _rotate_about(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]),
                            rng.uniform(0.0, 0.15))
    lengths = np.empty(num_parts)
    radii = np.empty(num_parts)
    lengths[0] = rng.uniform(0.30, 0.45) * (1.25 if n_children[0] >= 2 else 1.0)
    radii[0] = rng.uniform(0.055, 0.075)
    seg_a = np.zeros((num_parts, 3))
    seg_b = np.zeros((num_parts, 3))
    seg_b[0] = seg_a[0] + lengths[0] * dirs[0]
    base_azimuth = rng.uniform(0.0, 2.0 * np.pi, size=num_parts)
    nth_child = np.zeros(num_parts, dtype=int)
    attach_fracs = [1.0, 0.42, 0.68, 0.85]
    boxes = [_capsule_rest_box(seg_a[0], seg_b[0], radii[0])]

    for k in range(1, num_parts):
        p = parents[k]
        nth = nth_child[p]
        nth_child[p] += 1
        lengths[k] = rng.uniform(0.30, 0.45) * (1.25 if n_children[k] >= 2 else 1.0)
        radii[k] = radii[p] * (rng.uniform(0.85, 0.97) if nth == 0
                               else rng.uniform(0.70, 0.85))
        seg_a[k] = seg_a[p] + attach_fracs[min(nth, 3)] * (seg_b[p] - seg_a[p])
        for attempt in range(60):
            u, v, _ = _orthonormal_frame(dirs[p])
            psi = base_azimuth[p] + np.pi * nth + rng.uniform(-0.5, 0.5)
            tilt = rng.uniform(0.35, 0.90) if nth == 0 else rng.uniform(0.95, 1.35)
            if attempt > 20:
                psi = rng.uniform(0.0, 2.0 * np.pi)
                tilt = rng.uniform(0.25, 1.45)
            axis = np.cos(psi) * u + np.sin(psi) * v
            cand_dir = _rotate_about(dirs[p], axis, tilt)
            cand_end = seg_a[k] + lengths[k] * cand_dir
            lo_k, hi_k = _capsule_rest_box(seg_a[k], cand_end, radii[k])
            if all(_boxes_separated(lo_k, hi_k, boxes[j][0], boxes[j][1])
                   for j in range(k) if not (parents[k] == j or parents[j] == k)):
                dirs[k] = cand_dir
                seg_b[k] = cand_end
                boxes.append((lo_k, hi_k))
                break
        else:
            return None
    return parents, seg_a, seg_b, radii


def make_capsule_body(num_parts, seed, branching=True, weight_exponent=12,
                      weight_floor=1e-3, mesh_res=(32, 8, 4)) -> CapsuleBody:
    """Deterministic synthetic capsule-skeleton body.

    Rest geometry is sampled so the padded boxes of all non-adjacent parts are
    separated; collision candidates start empty at the rest pose.
    """
    if num_parts < 2:
        raise InputError("a capsule body needs at least 2 parts")
    rng = np.random.default_rng(seed)
    n_seg, n_cap, n_cyl = mesh_res

    for attempt in range(200):
        sampled = _sample_skeleton(num_parts, rng, branching and attempt < 120)
        if sampled is not None:
            parents, seg_a, seg_b, radii = sampled
            break
    else:
        raise NumericError("could not sample a separated capsule skeleton")

    verts_list, faces_list, reg_rows = [], [], []
    offset = 0
    for k in range(num_parts):
        v, f, base_ring = capsule_mesh(seg_a[k], seg_b[k], radii[k],
                                       n_seg=n_seg, n_cap=n_cap, n_cyl=n_cyl)
        verts_list.append(v)
        faces_list.append(f + offset)
        reg_rows.append(base_ring + offset)
        offset += len(v)
    vertices = np.concatenate(verts_list)
    faces = np.concatenate(faces_list)
    check_watertight(faces, len(vertices))

    # inverse-distance skinning weights, thresholded and renormalized
    dist = _point_segment_distance(vertices, seg_a, seg_b)          # (N,K)
    raw = np.power(np.maximum(dist, 1e-9), -float(weight_exponent))
    w = raw / raw.sum(axis=1, keepdims=True)
    w[w < weight_floor] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    weights = w.T                                                    # (K,N)

    regressor = np.zeros((num_parts, len(vertices)))
    for k, ring in enumerate(reg_rows):
        regressor[k, ring] = 1.0 / len(ring)

    shape_basis = np.zeros((2, len(vertices), 3))
    shape_basis[0] = 0.10 * vertices
    shape_basis[1, :, 2] = 0.15 * vertices[:, 2]

    body = ParametricBody(
        vertices=vertices, faces=faces, weights=weights,
        joint_regressor=regressor, tree=KinematicTree(parents),
        shape_basis=shape_basis, name=f"capsule{num_parts}-seed{seed}")
    segments = np.stack([seg_a, seg_b], axis=1)
    return CapsuleBody(body=body, segments=segments, radii=radii)


# ---------------------------------------------------------------------------
# body file I/O
# ---------------------------------------------------------------------------

def save_body(path, body_or_capsule) -> None:
    """Write the self-describing JSON body container."""
    if isinstance(body_or_capsule, CapsuleBody):
        body = body_or_capsule.body
        capsules = {
            "segments": body_or_capsule.segments.tolist(),
            "radii": body_or_capsule.radii.tolist(),
        }
    else:
        body = body_or_capsule
        capsules = None
    doc = {
        "format_version": BODY_FORMAT_VERSION,
        "name": body.name,
        "vertices": body.vertices.tolist(),
        "faces": body.faces.tolist(),
        "weights": body.weights.tolist(),
        "joint_regressor": body.joint_regressor.tolist(),
        "parents": body.tree.parents.tolist(),
    }
    if body.shape_basis is not None:
        doc["shape_basis"] = body.shape_basis.tolist()
    if body.pose_basis is not None:
        doc["pose_basis"] = body.pose_basis.tolist()
    if capsules is not None:
        doc["capsules"] = capsules
    Path(path).write_text(json.dumps(doc))


def load_body(path):
    """Load a body container; returns CapsuleBody when capsules are present."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read body file {path}: {exc}") from exc
    version = doc.get("format_version")
    if version != BODY_FORMAT_VERSION:
        raise InputError(f"unsupported body format version {version!r}")
    try:
        body = ParametricBody(
            vertices=np.asarray(doc["vertices"], dtype=np.float64),
            faces=np.asarray(doc["faces"], dtype=np.int64),
            weights=np.asarray(doc["weights"], dtype=np.float64),
            joint_regressor=np.asarray(doc["joint_regressor"], dtype=np.float64),
            tree=KinematicTree(np.asarray(doc["parents"], dtype=np.int64)),
            shape_basis=None if "shape_basis" not in doc else np.asarray(doc["shape_basis"]),
            pose_basis=None if "pose_basis" not in doc else np.asarray(doc["pose_basis"]),
            name=doc.get("name", "body"),
        )
    except KeyError as exc:
        raise InputError(f"body file {path} is missing field {exc}") from exc
    if "capsules" in doc:
        check_watertight(body.faces, body.num_vertices)
        caps = doc["capsules"]
        return CapsuleBody(
            body=body,
            segments=np.asarray(caps["segments"], dtype=np.float64),
            radii=np.asarray(caps["radii"], dtype=np.float64),
        )
    return body


def body_digest(body_or_capsule) -> str:
    """Stable content hash, handy for determinism checks."""
    body = body_or_capsule.body if isinstance(body_or_capsule, CapsuleBody) else body_or_capsule
    h = hashlib.sha256()
    for arr in (body.vertices, body.faces, body.weights, body.joint_regressor,
                body.tree.parents):
        h.update(np.ascontiguousarray(arr).tobytes())
    if isinstance(body_or_capsule, CapsuleBody):
        h.update(np.ascontiguousarray(body_or_capsule.segments).tobytes())
        h.update(np.ascontiguousarray(body_or_capsule.radii).tobytes())
    return h.hexdigest()
