"""Gradient-based pose optimization against the learned occupancy field.

Self-intersections: overlapping non-adjacent part boxes propose candidate
regions; points judged inside at least two parts form the penalty set, whose
summed sigmoid occupancy is minimized over pose with plain gradient descent.
Scene collisions: scan points currently inside the body contribute their
sigmoid occupancy (mean, gated by a stop-gradient positivity indicator).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .body import CapsuleBody, forward_kinematics, regress_joints, rigid_inverse_np
from .errors import DivergenceError, InputError
from .field import (FieldState, field_forward, part_logits_forward, pose_logits,
                    refresh_codes)
from .parts import boxes_overlap


@dataclass
class ResolveConfig:
    learning_rate: float = 0.007
    sample_budget: int = 1300
    max_steps: int = 200
    convergence_steps: int = 3      # zero intersecting samples this many steps in a row
    divergence_steps: int = 10      # rising loss this many steps triggers the lr fallback
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.sample_budget <= 0 or self.max_steps <= 0:
            raise InputError("resolve config values must be positive")


@dataclass
class ResolveResult:
    theta: np.ndarray
    trace: list                      # rows: (step, loss, n_samples or n_penetrating)
    converged: bool
    steps: int
    final_lr: float


# ---------------------------------------------------------------------------
# candidate detection and overlap sampling
# ---------------------------------------------------------------------------

CONNECTED_HOPS = 2


def kinematically_connected(tree, bone_i, bone_j) -> bool:
    """Parts within two tree hops count as connected.

    Each part's shape region covers its parent and children, so two parts at
    hop distance <= 2 share a bone's flesh by construction and co-claiming it
    is legitimate, not a collision.
    """
    return bone_i == bone_j or tree.hop_distance(bone_i, bone_j) <= CONNECTED_HOPS


def detect_candidates(boxes, transforms, tree, part_bones=None) -> list[tuple[int, int]]:
    """Kinematically separate part pairs whose world-placed boxes overlap (i < j)."""
    transforms = np.asarray(transforms, dtype=np.float64)
    if part_bones is None:
        part_bones = [box.bone for box in boxes]
    pairs = []
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            bi, bj = part_bones[i], part_bones[j]
            if kinematically_connected(tree, bi, bj):
                continue
            if boxes_overlap(boxes[i], transforms[bi], boxes[j], transforms[bj]):
                pairs.append((i, j))
    return pairs


def _nonadjacent_pair_mask(state: FieldState) -> np.ndarray:
    """(K,K) mask of part pairs eligible for mutual-inside conflicts."""
    _, tree = _tree_of(state)
    bones = state.decomp.bones()
    K = len(bones)
    mask = np.zeros((K, K), dtype=bool)
    for i in range(K):
        for j in range(i + 1, K):
            if not kinematically_connected(tree, bones[i], bones[j]):
                mask[i, j] = mask[j, i] = True
    return mask


def sample_overlap_points(state: FieldState, transforms, candidates,
                          budget=1300, seed=0, max_tries=30) -> np.ndarray:
    """Uniform samples in each candidate pair's box-intersection volume,
    filtered to points judged inside at least two body parts.

    Directly connected parts legitimately co-claim their blend region, so the
    two positive parts must be a non-adjacent pair (mirrors the candidate
    exclusion rule). The budget is split evenly across pairs; rejection
    sampling inside the smaller box caps out after max_tries rounds when the
    overlap is thin. Returns (S,3) world-space points (possibly empty).
    """
    if not candidates:
        return np.zeros((0, 3))
    transforms = np.asarray(transforms, dtype=np.float64)
    per_pair = max(budget // len(candidates), 1)
    raw = []
    for (i, j) in candidates:
        rng = np.random.default_rng([seed & 0x7FFFFFFF, i, j])
        a, b = state.boxes[i], state.boxes[j]
        if b.volume < a.volume:
            a, b = b, a
        Ta, Tb = transforms[a.bone], transforms[b.bone]
        inv_b = rigid_inverse_np(Tb)
        accepted = []
        for _ in range(max_tries):
            local = a.lo + rng.random((per_pair, 3)) * (a.hi - a.lo)
            world = local @ Ta[:3, :3].T + Ta[:3, 3]
            in_b = b.contains(world @ inv_b[:3, :3].T + inv_b[:3, 3])
            accepted.append(world[in_b])
            if sum(len(x) for x in accepted) >= per_pair:
                break
        got = np.concatenate(accepted) if accepted else np.zeros((0, 3))
        raw.append(got[:per_pair])
    points = np.concatenate(raw)
    if points.shape[0] == 0:
        return points
    logits = part_logits_forward(state, transforms, points)       # (K,S)
    pos = logits > 0.0
    allowed = _nonadjacent_pair_mask(state)
    mutual = np.einsum("is,ij,js->s", pos, allowed, pos) > 0
    return points[mutual]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _pose_graph(state: FieldState, theta):
    theta_t = torch.as_tensor(np.asarray(theta, dtype=np.float64),
                              dtype=state.field.dtype).clone().requires_grad_(True)
    lo, hi = state.box_tensors()
    return theta_t, lo, hi


def self_intersection_loss(state: FieldState, theta, sample_points):
    """Sum of sigmoid composed occupancy over the penalty set, plus its pose
    gradient. Sample points are constants for the step."""
    pts = np.asarray(sample_points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return 0.0, np.zeros_like(np.asarray(theta, dtype=np.float64))
    theta_t, lo, hi = _pose_graph(state, theta)
    q = torch.as_tensor(pts, dtype=state.field.dtype)
    composed, _, _ = pose_logits(state.field, state.snapshot, state.plan,
                                 lo, hi, theta_t, q)
    loss = torch.sigmoid(composed).sum()
    grad, = torch.autograd.grad(loss, theta_t, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(theta_t)
    return float(loss.detach()), grad.detach().numpy().astype(np.float64)


def scene_collision_loss(state: FieldState, theta, scan_points):
    """Mean gated sigmoid occupancy of scan points plus its pose gradient.

    The positivity indicator is a stop-gradient gate: only currently
    penetrating points contribute, and only through sigmoid(logit).
    """
    pts = np.asarray(scan_points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise InputError("scene collision loss needs a non-empty scan")
    theta_t, lo, hi = _pose_graph(state, theta)
    q = torch.as_tensor(pts, dtype=state.field.dtype)
    composed, _, _ = pose_logits(state.field, state.snapshot, state.plan,
                                 lo, hi, theta_t, q)
    gate = (composed > 0.0).detach().to(composed.dtype)
    loss = (torch.sigmoid(composed) * gate).sum() / pts.shape[0]
    if gate.sum() == 0:
        return 0.0, np.zeros_like(np.asarray(theta, dtype=np.float64))
    grad, = torch.autograd.grad(loss, theta_t, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(theta_t)
    return float(loss.detach()), grad.detach().numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# resolvers
# ---------------------------------------------------------------------------

def _tree_of(state: FieldState):
    body = state.body.body if isinstance(state.body, CapsuleBody) else state.body
    return body, body.tree


def resolve_self_intersections(state: FieldState, theta0,
                               config: ResolveConfig | None = None) -> ResolveResult:
    """Gradient descent on pose until no mutually-inside samples remain.

    Candidates and the penalty set are re-detected every step since the boxes
    move with the pose. Rising loss over `divergence_steps` halves the learning
    rate once; a second streak raises DivergenceError.
    """
    config = config or ResolveConfig()
    body, tree = _tree_of(state)
    joints = regress_joints(body)
    theta = np.asarray(theta0, dtype=np.float64).copy()
    lr = config.learning_rate
    halved = False
    rise = 0
    zero_streak = 0
    prev_loss = None
    trace = []
    converged = False

    for step in range(config.max_steps):
        G = forward_kinematics(tree, theta, joints)
        refresh_codes(state, G, seed=config.seed + step)
        candidates = detect_candidates(state.boxes, G, tree,
                                       part_bones=[int(b) for b in state.decomp.bones()])
        samples = sample_overlap_points(state, G, candidates,
                                        budget=config.sample_budget,
                                        seed=config.seed * 1000003 + step)
        if samples.shape[0] == 0:
            trace.append((step, 0.0, 0))
            zero_streak += 1
            prev_loss = 0.0
            if zero_streak >= config.convergence_steps:
                converged = True
                break
            continue
        zero_streak = 0
        loss, grad = self_intersection_loss(state, theta, samples)
        trace.append((step, loss, int(samples.shape[0])))
        if prev_loss is not None and loss > prev_loss:
            rise += 1
            if rise >= config.divergence_steps:
                if halved:
                    raise DivergenceError("self-intersection resolve diverged "
                                          "after halving the learning rate", trace)
                lr *= 0.5
                halved = True
                rise = 0
        else:
            rise = 0
        prev_loss = loss
        theta = theta - lr * grad

    return ResolveResult(theta=theta, trace=trace, converged=converged,
                         steps=len(trace), final_lr=lr)


def displace_scan(points, normals, seed=0, mean=0.05, std=0.05) -> np.ndarray:
    """Shift scan points inward along negated normals by Gaussian offsets."""
    points = np.asarray(points, dtype=np.float64)
    if normals is None:
        raise InputError("scan displacement needs per-point normals")
    normals = np.asarray(normals, dtype=np.float64)
    unit = normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    offsets = np.random.default_rng(seed).normal(mean, std, size=points.shape[0])
    return points - unit * offsets[:, None]


def resolve_scene_collisions(state: FieldState, theta0, scan_points,
                             config: ResolveConfig | None = None, weight=100.0,
                             prior_hook=None, optimizer="gd") -> ResolveResult:
    """Minimize weight * collision energy (+ optional pose-prior hook) over pose.

    optimizer="gd" runs plain gradient descent with the configured rate and a
    penetration-free stopping rule; "lbfgs" runs torch L-BFGS with strong-Wolfe
    line search for the same number of max steps.
    """
    config = config or ResolveConfig()
    scan = np.asarray(scan_points, dtype=np.float64).reshape(-1, 3)
    if scan.shape[0] == 0:
        raise InputError("scene resolve needs a non-empty scan")
    body, tree = _tree_of(state)
    joints = regress_joints(body)
    theta = np.asarray(theta0, dtype=np.float64).copy()
    trace = []
    converged = False

    if optimizer == "lbfgs":
        return _resolve_scene_lbfgs(state, theta, scan, config, weight, prior_hook,
                                    tree, joints)
    if optimizer != "gd":
        raise InputError(f"unknown optimizer {optimizer!r}")

    zero_streak = 0
    for step in range(config.max_steps):
        G = forward_kinematics(tree, theta, joints)
        refresh_codes(state, G, seed=config.seed + step)
        logits, _ = field_forward(state, G, scan)
        n_pen = int((logits > 0.0).sum())
        if weight != 0.0:
            loss_c, grad_c = scene_collision_loss(state, theta, scan)
        else:
            loss_c, grad_c = 0.0, np.zeros_like(theta)
        loss = weight * loss_c
        grad = weight * grad_c
        if prior_hook is not None:
            p_loss, p_grad = _prior_value_grad(state, prior_hook, theta)
            loss += p_loss
            grad += p_grad
        trace.append((step, loss, n_pen))
        if n_pen == 0:
            zero_streak += 1
            if zero_streak >= config.convergence_steps:
                converged = True
                break
        else:
            zero_streak = 0
        theta = theta - config.learning_rate * grad

    return ResolveResult(theta=theta, trace=trace, converged=converged,
                         steps=len(trace), final_lr=config.learning_rate)


def _prior_value_grad(state, prior_hook, theta):
    theta_t = torch.as_tensor(theta, dtype=state.field.dtype).clone().requires_grad_(True)
    value = prior_hook(theta_t)
    value_t = torch.as_tensor(value, dtype=state.field.dtype) \
        if not isinstance(value, torch.Tensor) else value
    if value_t.requires_grad:
        grad, = torch.autograd.grad(value_t, theta_t, allow_unused=True)
        grad = torch.zeros_like(theta_t) if grad is None else grad
        return float(value_t.detach()), grad.detach().numpy().astype(np.float64)
    return float(value_t), np.zeros_like(theta)


def _resolve_scene_lbfgs(state, theta, scan, config, weight, prior_hook, tree, joints):
    G0 = forward_kinematics(tree, theta, joints)
    refresh_codes(state, G0, seed=config.seed)
    theta_t = torch.as_tensor(theta, dtype=state.field.dtype).clone().requires_grad_(True)
    q = torch.as_tensor(scan, dtype=state.field.dtype)
    lo, hi = state.box_tensors()
    opt = torch.optim.LBFGS([theta_t], lr=1.0, max_iter=config.max_steps,
                            line_search_fn="strong_wolfe")
    trace = []

    def closure():
        opt.zero_grad()
        composed, _, _ = pose_logits(state.field, state.snapshot, state.plan,
                                     lo, hi, theta_t, q)
        gate = (composed > 0.0).detach().to(composed.dtype)
        loss = weight * (torch.sigmoid(composed) * gate).sum() / scan.shape[0]
        if prior_hook is not None:
            loss = loss + prior_hook(theta_t)
        trace.append((len(trace), float(loss.detach()), int(gate.sum())))
        loss.backward()
        return loss

    opt.step(closure)
    theta_out = theta_t.detach().numpy().astype(np.float64)
    G = forward_kinematics(tree, theta_out, joints)
    refresh_codes(state, G, seed=config.seed)
    logits, _ = field_forward(state, G, scan)
    converged = bool((logits > 0.0).sum() == 0)
    return ResolveResult(theta=theta_out, trace=trace, converged=converged,
                         steps=len(trace), final_lr=config.learning_rate)


def grid_scan_plane(center, normal, extent, resolution) -> tuple[np.ndarray, np.ndarray]:
    """Regular scan grid on a plane patch: returns (points, normals)."""
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    ticks = np.linspace(-0.5 * extent, 0.5 * extent, resolution)
    uu, vv = np.meshgrid(ticks, ticks, indexing="ij")
    pts = (np.asarray(center, dtype=np.float64)[None, :]
           + uu.reshape(-1, 1) * u[None, :] + vv.reshape(-1, 1) * v[None, :])
    return pts, np.tile(normal, (pts.shape[0], 1))
