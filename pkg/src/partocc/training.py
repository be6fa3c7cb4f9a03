"""Training: query sampling, ground-truth occupancy labeling, loss, Adam loop.

Supervision queries are half uniform inside the union of world-placed part
boxes, half Gaussian-perturbed surface points. Labels come from the analytic
capsule oracle for synthetic bodies, or from a ray-crossing parity test for
generic watertight meshes.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .body import (CapsuleBody, check_watertight, face_areas, forward_kinematics,
                   mesh_face_components, regress_joints)
from .errors import InputError, NumericError
from .field import (FieldConfig, OccupancyField, canonical_clouds, compose_occupancy,
                    masked_part_occupancy, plan_clouds, save_checkpoint, load_checkpoint)
from .parts import (decompose_holistic, decompose_parts, draw_surface_samples,
                    fit_body_boxes, points_from_barycentric)


# ---------------------------------------------------------------------------
# pose sampling
# ---------------------------------------------------------------------------

def random_poses(num_joints, count, sigma=0.35, seed=0, lock_root=True) -> np.ndarray:
    """Gaussian axis-angle poses (count,K,3); the root stays fixed by default
    since the field is rigid-equivariant anyway."""
    rng = np.random.default_rng(seed)
    poses = rng.normal(0.0, sigma, size=(count, num_joints, 3))
    if lock_root:
        poses[:, 0, :] = 0.0
    return poses


# ---------------------------------------------------------------------------
# query sampling
# ---------------------------------------------------------------------------

def sample_training_queries(body, posed_vertices, boxes, transforms, count,
                            seed=0, surface_sigma=0.1, rng=None) -> np.ndarray:
    """count/2 points uniform in the union of world-placed boxes (box picked
    proportionally to its volume, overlaps deliberately oversampled), count/2
    surface points with isotropic Gaussian offsets."""
    if count % 2 != 0:
        raise InputError("query count must be even")
    if rng is None:
        rng = np.random.default_rng(seed)
    pbody = body.body if isinstance(body, CapsuleBody) else body
    transforms = np.asarray(transforms, dtype=np.float64)
    half = count // 2

    volumes = np.asarray([b.volume for b in boxes])
    pick = rng.choice(len(boxes), size=half, p=volumes / volumes.sum())
    unit = rng.random((half, 3))
    box_pts = np.empty((half, 3))
    for k, box in enumerate(boxes):
        sel = pick == k
        if not sel.any():
            continue
        local = box.lo + unit[sel] * (box.hi - box.lo)
        T = transforms[box.bone]
        box_pts[sel] = local @ T[:3, :3].T + T[:3, 3]

    areas = face_areas(pbody.vertices, pbody.faces)
    face_pick, bary = draw_surface_samples(areas, count - half, rng)
    surf = points_from_barycentric(np.asarray(posed_vertices, dtype=np.float64),
                                   pbody.faces, face_pick, bary)
    surf = surf + rng.normal(0.0, surface_sigma, size=surf.shape)
    return np.concatenate([box_pts, surf])


# ---------------------------------------------------------------------------
# occupancy labeling
# ---------------------------------------------------------------------------

def _ray_frame(direction):
    d = direction / np.linalg.norm(direction)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return np.stack([d, e1, e2])            # rows: ray axis, two transverse axes


def _parity_pass(tri_r, comp, points_r, grid=None):
    """Crossing parity along +x in rotated coords.

    tri_r (F,3,3) rotated triangles, comp (F,) face component labels,
    points_r (P,3). Returns (inside (P,), degenerate mask (P,)).
    """
    P = points_r.shape[0]
    n_comp = comp.max() + 1 if comp.size else 1
    counts = np.zeros((P, n_comp), dtype=np.int64)
    degenerate = np.zeros(P, dtype=bool)

    v0 = tri_r[:, 0]
    e1 = tri_r[:, 1] - tri_r[:, 0]
    e2 = tri_r[:, 2] - tri_r[:, 0]
    det = e1[:, 1] * e2[:, 2] - e1[:, 2] * e2[:, 1]
    scale = np.maximum(np.abs(e1[:, 1:]).max(1) * np.abs(e2[:, 1:]).max(1), 1e-30)

    if grid is None:
        cells = {0: np.arange(tri_r.shape[0])}
        cell_of = np.zeros(P, dtype=np.int64)
        inside_grid = np.ones(P, dtype=bool)
    else:
        cells, (lo, inv_h, res) = grid
        ij = np.floor((points_r[:, 1:] - lo) * inv_h).astype(np.int64)
        inside_grid = ((ij >= 0) & (ij < res)).all(axis=1)
        cell_of = np.where(inside_grid, ij[:, 0] * res + ij[:, 1], -1)

    eps = 1e-10
    for cell in np.unique(cell_of[inside_grid]):
        tri_idx = cells.get(int(cell))
        if tri_idx is None or tri_idx.size == 0:
            continue
        p_idx = np.flatnonzero(cell_of == cell)
        q = points_r[p_idx, None, 1:] - v0[None, tri_idx, 1:]          # (A,B,2)
        dt = det[tri_idx][None]
        bad_det = np.abs(dt) <= 1e-12 * scale[tri_idx][None]
        dt_safe = np.where(np.abs(dt) < 1e-300, 1.0, dt)
        u = (q[..., 0] * e2[tri_idx, 2] - q[..., 1] * e2[tri_idx, 1]) / dt_safe
        v = (e1[tri_idx, 1] * q[..., 1] - e1[tri_idx, 2] * q[..., 0]) / dt_safe
        hit = (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
        x_hit = v0[tri_idx, 0] + u * e1[tri_idx, 0] + v * e2[tri_idx, 0]
        dx = x_hit - points_r[p_idx, 0, None]
        crossing = hit & (dx > eps)
        near_edge = hit & ((u < eps) | (v < eps) | (u + v > 1.0 - eps) | (np.abs(dx) <= eps))
        deg = (near_edge | (bad_det & hit)).any(axis=1)
        degenerate[p_idx] |= deg
        np.add.at(counts, (p_idx[:, None], comp[tri_idx][None].repeat(len(p_idx), 0)),
                  crossing.astype(np.int64))
    inside = ((counts % 2) == 1).any(axis=1)
    return inside, degenerate


def ray_parity_inside(vertices, faces, points, seed=0, components=None,
                      max_retries=8) -> np.ndarray:
    """Ray-crossing parity inside test with a fixed random direction per batch.

    Parity is evaluated per connected component and OR-ed, so a body made of
    several closed shells labels their union. Degenerate hits (edge grazing,
    edge-on triangles, on-surface points) are re-cast with a fresh direction.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    rng = np.random.default_rng(seed)
    if components is None:
        components = mesh_face_components(faces, vertices.shape[0])

    result = np.zeros(points.shape[0], dtype=np.uint8)
    pending = np.arange(points.shape[0])
    tri = vertices[faces]                                   # (F,3,3)
    use_grid_threshold = 512

    for attempt in range(max_retries):
        direction = rng.normal(size=3)
        frame = _ray_frame(direction)
        tri_r = tri @ frame.T
        pts_r = points[pending] @ frame.T
        grid = None
        if faces.shape[0] >= use_grid_threshold and attempt == 0:
            grid = _build_parity_grid(tri_r)
        inside, degenerate = _parity_pass(tri_r, components, pts_r, grid=grid)
        ok = ~degenerate
        result[pending[ok]] = inside[ok].astype(np.uint8)
        pending = pending[degenerate]
        if pending.size == 0:
            return result.astype(np.uint8)
    raise NumericError(f"{pending.size} points stayed degenerate after "
                       f"{max_retries} ray directions")


def _build_parity_grid(tri_r, res=48):
    """2D uniform grid over the transverse (y,z) plane binning triangle AABBs."""
    lo2 = tri_r[..., 1:].reshape(-1, 2).min(axis=0)
    hi2 = tri_r[..., 1:].reshape(-1, 2).max(axis=0)
    span = np.maximum(hi2 - lo2, 1e-12)
    inv_h = res / span
    t_lo = np.floor((tri_r[..., 1:].min(axis=1) - lo2) * inv_h).astype(np.int64)
    t_hi = np.floor((tri_r[..., 1:].max(axis=1) - lo2) * inv_h).astype(np.int64)
    t_lo = np.clip(t_lo, 0, res - 1)
    t_hi = np.clip(t_hi, 0, res - 1)
    cells: dict[int, list] = {}
    for f in range(tri_r.shape[0]):
        for i in range(t_lo[f, 0], t_hi[f, 0] + 1):
            for j in range(t_lo[f, 1], t_hi[f, 1] + 1):
                cells.setdefault(i * res + j, []).append(f)
    cells = {c: np.asarray(ix, dtype=np.int64) for c, ix in cells.items()}
    return cells, (lo2, inv_h, res)


def label_occupancy(vertices, faces, points, seed=0) -> np.ndarray:
    """Ground-truth {0,1} labels for a watertight mesh via ray parity."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    check_watertight(faces, vertices.shape[0])
    return ray_parity_inside(vertices, faces, points, seed=seed)


def label_points(body, transforms, points, posed_vertices=None, seed=0) -> np.ndarray:
    """Occupancy labels at a pose: analytic for capsule bodies, parity otherwise."""
    if isinstance(body, CapsuleBody):
        return body.contains(points, transforms).astype(np.uint8)
    if posed_vertices is None:
        from .body import pose_vertices_from_transforms
        posed_vertices = pose_vertices_from_transforms(body, transforms)
    return label_occupancy(posed_vertices, body.faces, points, seed=seed)


# ---------------------------------------------------------------------------
# ground-truth oracles
# ---------------------------------------------------------------------------

class CapsuleOracle:
    """Analytic ground truth for a posed capsule body."""

    def __init__(self, capsule_body: CapsuleBody, transforms):
        self.body = capsule_body
        self.transforms = np.asarray(transforms, dtype=np.float64)
        self._posed = None

    def contains(self, points) -> np.ndarray:
        return self.body.contains(points, self.transforms)

    @property
    def posed_vertices(self) -> np.ndarray:
        if self._posed is None:
            from .body import pose_vertices_from_transforms
            zero_beta = np.zeros(self.body.body.num_shape_coeffs)
            self._posed = pose_vertices_from_transforms(self.body.body, self.transforms,
                                                        beta=zero_beta)
        return self._posed

    def aabb(self, pad_fraction=0.1):
        v = self.posed_vertices
        lo, hi = v.min(axis=0), v.max(axis=0)
        pad = pad_fraction * (hi - lo)
        return lo - pad, hi + pad

    def sample_surface(self, count, rng) -> np.ndarray:
        pbody = self.body.body
        areas = face_areas(self.posed_vertices, pbody.faces)
        face_pick, bary = draw_surface_samples(areas, count, rng)
        return points_from_barycentric(self.posed_vertices, pbody.faces, face_pick, bary)


class MeshOracle:
    """Parity-based ground truth for a posed watertight mesh."""

    def __init__(self, vertices, faces, seed=0):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        check_watertight(self.faces, self.vertices.shape[0])
        self._components = mesh_face_components(self.faces, self.vertices.shape[0])
        self.seed = seed

    def contains(self, points) -> np.ndarray:
        return ray_parity_inside(self.vertices, self.faces, points, seed=self.seed,
                                 components=self._components).astype(bool)

    @property
    def posed_vertices(self) -> np.ndarray:
        return self.vertices

    def aabb(self, pad_fraction=0.1):
        lo, hi = self.vertices.min(axis=0), self.vertices.max(axis=0)
        pad = pad_fraction * (hi - lo)
        return lo - pad, hi + pad

    def sample_surface(self, count, rng) -> np.ndarray:
        areas = face_areas(self.vertices, self.faces)
        face_pick, bary = draw_surface_samples(areas, count, rng)
        return points_from_barycentric(self.vertices, self.faces, face_pick, bary)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def mse_loss(logits, labels) -> torch.Tensor:
    """Mean squared error between sigmoid(logit) and the {0,1} labels."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    if logits.shape != labels.shape:
        raise InputError("logits and labels must have matching shapes")
    return ((torch.sigmoid(logits) - labels) ** 2).mean()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size_bodies: int = 10
    queries_per_body: int = 2048
    iterations: int = 300_000
    seed: int = 0
    cloud_points: int = 1000
    surface_sigma: float = 0.1
    checkpoint_every: int = 5000
    log_every: int = 100
    desk_scale: bool = False

    def __post_init__(self):
        if min(self.learning_rate, 0.0) < 0 or self.batch_size_bodies <= 0 \
                or self.queries_per_body <= 0 or self.iterations <= 0 \
                or self.cloud_points <= 0:
            raise InputError("training config values must be positive")
        if self.queries_per_body % 2 or self.cloud_points % 2:
            raise InputError("queries_per_body and cloud_points must be even")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(learning_rate=1e-3, batch_size_bodies=10, queries_per_body=1024,
                    iterations=3000, cloud_points=256, checkpoint_every=1000,
                    desk_scale=True)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainResult:
    field: OccupancyField
    boxes: list
    decomp: object
    loss_history: list
    checkpoint_path: str | None
    iterations: int
    config: TrainConfig
    mode: str = "parts"
    seconds: float = 0.0


@dataclass
class _PoseCache:
    transforms_np: np.ndarray
    part_transforms: torch.Tensor
    posed_vertices: np.ndarray
    clouds: torch.Tensor


def _prepare_pose(body, snapshot, decomp, theta, cloud_points, seed,
                  dtype) -> _PoseCache:
    pbody = body.body if isinstance(body, CapsuleBody) else body
    joints = regress_joints(pbody)
    G = forward_kinematics(pbody.tree, theta, joints)
    G_t = torch.as_tensor(G, dtype=dtype)
    plan = plan_clouds(body, decomp, cloud_points, seed, dtype=dtype)
    bones = torch.as_tensor(plan.bones, dtype=torch.long)
    with torch.no_grad():
        V = snapshot.pose_from_transforms(G_t)
        part_T = G_t[bones]
        clouds = canonical_clouds(V, snapshot.faces, plan, part_T)
    return _PoseCache(transforms_np=G, part_transforms=part_T,
                      posed_vertices=V.numpy().astype(np.float64), clouds=clouds)


def train(body, poses, config: TrainConfig, field_config: FieldConfig | None = None,
          mode="parts", out_dir=None, resume_from=None, quiet=True) -> TrainResult:
    """Adam loop over minibatches of posed bodies.

    Each iteration draws `batch_size_bodies` poses, refreshes their codes,
    samples and labels fresh queries, and minimizes the sigmoid MSE of the
    composed logits. Deterministic given config.seed and a fixed thread count.
    """
    pbody = body.body if isinstance(body, CapsuleBody) else body
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 3 or poses.shape[1:] != (pbody.num_joints, 3):
        raise InputError("poses must be (P,K,3)")
    if mode not in ("parts", "holistic"):
        raise InputError(f"unknown training mode {mode!r}")

    decomp = decompose_parts(pbody) if mode == "parts" else decompose_holistic(pbody)
    if field_config is None:
        field_config = (FieldConfig.desk(decomp.num_parts) if config.desk_scale
                        else FieldConfig(num_parts=decomp.num_parts))
    if field_config.num_parts != decomp.num_parts:
        raise InputError("field_config.num_parts does not match the decomposition")

    dtype = torch.float32
    boxes = fit_body_boxes(body, decomp, count=max(config.cloud_points, 256),
                           seed=config.seed)
    snapshot = pbody.snapshot(dtype=dtype)
    start_iter = 0
    opt_arrays = None
    if resume_from is not None:
        field, boxes, header, opt_arrays = load_checkpoint(resume_from, dtype=dtype)
        if field.config.num_parts != decomp.num_parts:
            raise InputError("checkpoint part count does not match this body/mode")
        start_iter = int(header["extra"].get("iteration", 0))
    else:
        field = OccupancyField(field_config, seed=config.seed).to(dtype)

    lo = torch.as_tensor(np.stack([b.lo for b in boxes]), dtype=dtype)
    hi = torch.as_tensor(np.stack([b.hi for b in boxes]), dtype=dtype)

    cache = [_prepare_pose(body, snapshot, decomp, poses[p],
                           config.cloud_points, seed=config.seed + 31 * p, dtype=dtype)
             for p in range(poses.shape[0])]

    optimizer = torch.optim.Adam(field.parameters(), lr=config.learning_rate,
                                 betas=(0.9, 0.999), eps=1e-8)
    param_names = [name for name, _ in field.named_parameters()]
    if opt_arrays:
        _optimizer_from_arrays(optimizer, opt_arrays, param_names,
                               list(field.parameters()))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    loss_rows = []
    ckpt_path = None
    t0 = time.perf_counter()

    for it in range(start_iter, config.iterations):
        rng = np.random.default_rng([config.seed, it])
        batch_idx = rng.integers(0, poses.shape[0], size=config.batch_size_bodies)

        clouds_b = torch.stack([cache[p].clouds for p in batch_idx])          # (B,K,M,3)
        part_T_b = torch.stack([cache[p].part_transforms for p in batch_idx]) # (B,K,4,4)
        q_list, lab_list = [], []
        for p in batch_idx:
            pc = cache[p]
            q = sample_training_queries(body, pc.posed_vertices, boxes,
                                        pc.transforms_np, config.queries_per_body,
                                        surface_sigma=config.surface_sigma, rng=rng)
            lab = label_points(body, pc.transforms_np, q,
                               posed_vertices=pc.posed_vertices)
            q_list.append(q)
            lab_list.append(lab)
        queries = torch.as_tensor(np.stack(q_list), dtype=dtype)              # (B,Q,3)
        labels = torch.as_tensor(np.stack(lab_list), dtype=dtype)             # (B,Q)

        B, K, M, _ = clouds_b.shape
        codes = field.encoder(clouds_b.reshape(B * K, M, 3)).reshape(B, K, -1)
        dense, _ = masked_part_occupancy(field, lo, hi, codes, part_T_b, queries)
        occ, _ = compose_occupancy(dense)
        loss = ((occ - labels) ** 2).mean()
        if not torch.isfinite(loss):
            raise NumericError(f"training loss became non-finite at iteration {it} "
                               f"(lr={config.learning_rate}, batch={batch_idx.tolist()})")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        loss_val = float(loss.detach())
        loss_rows.append((it, loss_val))
        if not quiet and (it % config.log_every == 0 or it == config.iterations - 1):
            print(f"iter {it:6d}  loss {loss_val:.6f}")
        if out_dir is not None and ((it + 1) % config.checkpoint_every == 0
                                    or it == config.iterations - 1):
            ckpt_path = str(out_dir / f"checkpoint_{it + 1:07d}.npz")
            save_checkpoint(ckpt_path, field, boxes,
                            extra=_ckpt_extra(config, mode, it + 1),
                            optimizer_arrays=_optimizer_to_arrays(optimizer, param_names))

    seconds = time.perf_counter() - t0
    if out_dir is not None:
        _write_loss_csv(out_dir / "loss.csv", loss_rows, append=resume_from is not None)
        if ckpt_path is None:
            ckpt_path = str(out_dir / f"checkpoint_{config.iterations:07d}.npz")
            save_checkpoint(ckpt_path, field, boxes,
                            extra=_ckpt_extra(config, mode, config.iterations),
                            optimizer_arrays=_optimizer_to_arrays(optimizer, param_names))
    return TrainResult(field=field, boxes=boxes, decomp=decomp, loss_history=loss_rows,
                       checkpoint_path=ckpt_path, iterations=config.iterations,
                       config=config, mode=mode, seconds=seconds)


def _ckpt_extra(config: TrainConfig, mode, iteration):
    return {"iteration": iteration, "mode": mode,
            "train_config": {k: getattr(config, k) for k in
                             ("learning_rate", "batch_size_bodies", "queries_per_body",
                              "iterations", "seed", "cloud_points", "surface_sigma")}}


def _write_loss_csv(path, rows, append=False):
    mode = "a" if append and Path(path).exists() else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["iteration", "loss"])
        writer.writerows(rows)


def _optimizer_to_arrays(optimizer, param_names):
    arrays = {}
    state = optimizer.state_dict()["state"]
    for i, name in enumerate(param_names):
        st = state.get(i)
        if st is None:
            continue
        arrays[f"{name}.exp_avg"] = st["exp_avg"].detach().numpy().astype("<f4")
        arrays[f"{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().astype("<f4")
        arrays[f"{name}.step"] = np.asarray(float(st["step"]), dtype="<f8")
    return arrays


def _optimizer_from_arrays(optimizer, arrays, param_names, params):
    state = {}
    for i, (name, p) in enumerate(zip(param_names, params)):
        key = f"{name}.exp_avg"
        if key not in arrays:
            continue
        state[i] = {
            "step": torch.tensor(float(arrays[f"{name}.step"])),
            "exp_avg": torch.as_tensor(arrays[key], dtype=p.dtype).reshape(p.shape),
            "exp_avg_sq": torch.as_tensor(arrays[f"{name}.exp_avg_sq"],
                                          dtype=p.dtype).reshape(p.shape),
        }
    sd = optimizer.state_dict()
    sd["state"] = state
    optimizer.load_state_dict(sd)
