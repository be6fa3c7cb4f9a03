"""Part-composed neural occupancy field.

A shared permutation-invariant point-set encoder turns each part's canonical
cloud into a latent code; a shared decoder scores canonicalized queries gated
by the part box indicator; the body occupancy is the max over per-part logits.
Classification rule: inside iff the composed logit is strictly positive, so a
query outside every box (all parts masked, logit exactly 0) reads as outside.

Gradients w.r.t. network parameters and w.r.t. pose flow through the whole
pipeline (bone transforms -> skinned cloud positions -> codes, and bone
transforms -> query canonicalization); the box indicator is treated as
piecewise constant with zero gradient.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn as nn

from .body import (BodySnapshot, CapsuleBody, ParametricBody, face_areas,
                   rigid_inverse, shape_from_transforms, validate_transforms)
from .errors import InputError, StaleCodesError
from .parts import (PartBox, PartDecomposition, decompose_parts, fit_body_boxes,
                    fit_part_box, plan_part_cloud)

CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class PointSetEncoder(nn.Module):
    """Eight per-point linear layers with ReLU and an input skip, max-pooled
    over points, then projected to the latent size."""

    def __init__(self, width=128, latent=128, depth=8, skip_at=4):
        super().__init__()
        self.skip_at = skip_at
        layers = []
        for i in range(depth):
            in_dim = 3 if i == 0 else width
            if i == skip_at:
                in_dim += 3
            layers.append(nn.Linear(in_dim, width))
        self.layers = nn.ModuleList(layers)
        self.proj = nn.Linear(width, latent)

    def forward(self, pts):
        # pts (..., M, 3) -> (..., latent)
        h = pts
        for i, lin in enumerate(self.layers):
            if i == self.skip_at:
                h = torch.cat([h, pts], dim=-1)
            h = torch.relu(lin(h))
        pooled = h.max(dim=-2).values
        return self.proj(pooled)


class PartDecoder(nn.Module):
    """Ten-layer MLP on (local query, box bit, code, one-hot), Softplus hidden
    activations (beta=100, linearized above threshold 20), scalar logit out."""

    def __init__(self, in_dim, width=512, depth=10, skip_at=5):
        super().__init__()
        self.skip_at = skip_at
        layers = []
        for i in range(depth):
            d_in = in_dim if i == 0 else width
            if i == skip_at:
                d_in += in_dim
            d_out = 1 if i == depth - 1 else width
            layers.append(nn.Linear(d_in, d_out))
        self.layers = nn.ModuleList(layers)
        self.act = nn.Softplus(beta=100.0, threshold=20.0)
        # start the untrained field predicting mostly outside
        with torch.no_grad():
            self.layers[-1].bias.fill_(-0.5)

    def forward(self, feats):
        # feats (..., in_dim) -> (...,)
        h = feats
        for i, lin in enumerate(self.layers):
            if i == self.skip_at:
                h = torch.cat([h, feats], dim=-1)
            h = lin(h)
            if i < len(self.layers) - 1:
                h = self.act(h)
        return h.squeeze(-1)


@dataclass
class FieldConfig:
    num_parts: int
    latent: int = 128
    encoder_width: int = 128
    decoder_width: int = 512

    @classmethod
    def desk(cls, num_parts) -> "FieldConfig":
        return cls(num_parts=num_parts, latent=32, encoder_width=64, decoder_width=64)

    def to_dict(self):
        return {"num_parts": self.num_parts, "latent": self.latent,
                "encoder_width": self.encoder_width, "decoder_width": self.decoder_width}


class OccupancyField(nn.Module):
    """Shared encoder + shared decoder for all parts, plus the part one-hots."""

    def __init__(self, config: FieldConfig, seed=None):
        super().__init__()
        self.config = config
        self.code_dim = config.latent + config.num_parts
        in_dim = 3 + 1 + self.code_dim
        if seed is None:
            self.encoder = PointSetEncoder(config.encoder_width, config.latent)
            self.decoder = PartDecoder(in_dim, config.decoder_width)
        else:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                self.encoder = PointSetEncoder(config.encoder_width, config.latent)
                self.decoder = PartDecoder(in_dim, config.decoder_width)
        self.register_buffer("part_eye", torch.eye(config.num_parts))

    @property
    def dtype(self):
        return self.part_eye.dtype


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------

@dataclass
class LocalCode:
    """Latent part code plus its one-hot part indicator."""

    z: torch.Tensor
    onehot: torch.Tensor

    def feature(self) -> torch.Tensor:
        return torch.cat([self.z, self.onehot], dim=-1)


def encode_part(field: OccupancyField, points, k) -> LocalCode:
    """Encode one canonical part cloud (M,3); exactly permutation-invariant."""
    pts = torch.as_tensor(points, dtype=field.dtype)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise InputError("encode_part needs a non-empty (M,3) cloud")
    with torch.no_grad():
        z = field.encoder(pts)
    return LocalCode(z=z, onehot=field.part_eye[k].clone())


def decode_part(field: OccupancyField, x_local, mask_bit, code: LocalCode) -> torch.Tensor:
    """Per-part logit b * MLP(x_local ++ b ++ z ++ onehot); b=0 gives exactly 0."""
    x = torch.as_tensor(x_local, dtype=field.dtype)
    squeeze = x.ndim == 1
    x = x.reshape(-1, 3)
    b = torch.as_tensor(mask_bit, dtype=field.dtype).reshape(-1)
    if b.numel() == 1:
        b = b.expand(x.shape[0])
    feats = torch.cat([x, b.unsqueeze(-1),
                       code.feature().reshape(1, -1).expand(x.shape[0], -1)], dim=-1)
    with torch.no_grad():
        out = b * field.decoder(feats)
    return out[0] if squeeze else out


def compose_occupancy(part_logits, dim=None):
    """Union of per-part logits via max; returns (composed, argmax part index)."""
    if isinstance(part_logits, torch.Tensor):
        d = dim if dim is not None else (0 if part_logits.ndim == 1 else -2)
        vals, labels = part_logits.max(dim=d)
        return vals, labels
    arr = np.asarray(part_logits)
    d = dim if dim is not None else (0 if arr.ndim == 1 else -2)
    return arr.max(axis=d), arr.argmax(axis=d)


def classify_inside(logits):
    """Zero-level-set rule: strictly positive logit means inside."""
    if isinstance(logits, torch.Tensor):
        return logits > 0
    return np.asarray(logits) > 0


# ---------------------------------------------------------------------------
# masked evaluation core
# ---------------------------------------------------------------------------

def _decode_masked_rows(field: OccupancyField, lo, hi, codes, part_transforms, queries):
    """Canonicalize queries per part, gate by the boxes, decode in-box rows.

    Returns (local coords (...,K,Q,3), inside mask (...,K,Q), index tuple of the
    in-box rows, decoded row logits). Masked rows never touch the decoder.
    """
    inv = rigid_inverse(part_transforms)
    R, t = inv[..., :3, :3], inv[..., :3, 3]
    local = torch.einsum("...kij,...qj->...kqi", R, queries) + t.unsqueeze(-2)
    inside = ((local >= lo.unsqueeze(-2)) & (local <= hi.unsqueeze(-2))).all(-1)
    idx = inside.nonzero(as_tuple=True)
    k_idx = idx[-2]
    feats = torch.cat([
        local[idx],
        local.new_ones(k_idx.shape[0], 1),
        codes[idx[:-1]],
        field.part_eye[k_idx],
    ], dim=-1)
    return local, inside, idx, field.decoder(feats)


def masked_part_logits(field: OccupancyField, lo, hi, codes, part_transforms, queries):
    """Dense per-part logits with exact zeros outside the part boxes.

    lo/hi: (K,3) canonical boxes; codes: (...,K,L); part_transforms: (...,K,4,4);
    queries: (...,Q,3). Returns (logits (...,K,Q), inside mask (...,K,Q)).
    """
    local, inside, idx, rows = _decode_masked_rows(field, lo, hi, codes,
                                                   part_transforms, queries)
    dense = local.new_zeros(inside.shape)
    return dense.index_put(idx, rows), inside


def masked_part_occupancy(field: OccupancyField, lo, hi, codes, part_transforms, queries):
    """Dense per-part occupancies b_k * sigmoid(logit) in [0,1].

    A masked part reads as occupancy exactly 0 (certainly outside), which keeps
    the training gradient alive for queries that miss some boxes; the >0.5
    decision agrees with the >0 rule on masked logits everywhere.
    """
    local, inside, idx, rows = _decode_masked_rows(field, lo, hi, codes,
                                                   part_transforms, queries)
    dense = local.new_zeros(inside.shape)
    return dense.index_put(idx, torch.sigmoid(rows)), inside


def canonical_clouds(snapshot_vertices, faces, plan, part_transforms):
    """Gather planned surface samples from posed vertices and canonicalize.

    snapshot_vertices (N,3); plan face_vertices (K,M,3) / bary (K,M,3);
    part_transforms (K,4,4). Returns (K,M,3) bone-local clouds.
    """
    tri = snapshot_vertices[plan.face_vertices]            # (K,M,3,3)
    pts = (tri * plan.bary.unsqueeze(-1)).sum(dim=-2)      # (K,M,3)
    inv = rigid_inverse(part_transforms)
    return torch.einsum("kij,kmj->kmi", inv[:, :3, :3], pts) + inv[:, None, :3, 3]


@dataclass
class CloudPlan:
    """Pose-independent sampling plan: which faces and barycentric weights make
    up each part cloud; positions are recovered from any posed vertices."""

    bones: np.ndarray              # (K,) bone index per part
    face_vertices: torch.Tensor    # (K,M,3) long vertex ids of sampled faces
    bary: torch.Tensor             # (K,M,3)
    n_central: int
    fallbacks: list[bool]
    seed: int


def plan_clouds(body, decomp: PartDecomposition, count, seed, dtype=torch.float32) -> CloudPlan:
    pbody = body.body if isinstance(body, CapsuleBody) else body
    areas = face_areas(pbody.vertices, pbody.faces)
    picks, barys, fallbacks = [], [], []
    for k in range(decomp.num_parts):
        face_pick, bary, fb = plan_part_cloud(pbody, decomp, k, count,
                                              seed + 7919 * k, areas)
        picks.append(pbody.faces[face_pick])
        barys.append(bary)
        fallbacks.append(fb)
    return CloudPlan(
        bones=decomp.bones(),
        face_vertices=torch.as_tensor(np.stack(picks), dtype=torch.long),
        bary=torch.as_tensor(np.stack(barys), dtype=dtype),
        n_central=count // 2,
        fallbacks=fallbacks,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# field state: codes cache keyed on the bone transforms
# ---------------------------------------------------------------------------

def transforms_key(transforms) -> str:
    arr = np.ascontiguousarray(np.asarray(transforms, dtype=np.float64))
    return hashlib.sha256(arr.tobytes()).hexdigest()[:24]


@dataclass
class FieldState:
    field: OccupancyField
    body: ParametricBody | CapsuleBody
    decomp: PartDecomposition
    snapshot: BodySnapshot
    boxes: list[PartBox]
    cloud_count: int = 1000
    cloud_seed: int = 0
    infer_shape: bool = True
    refit_boxes: bool = False
    codes: torch.Tensor | None = None
    transforms: torch.Tensor | None = None
    key: str | None = dc_field(default=None)
    plan: CloudPlan | None = None

    @property
    def num_parts(self) -> int:
        return self.decomp.num_parts

    def box_tensors(self):
        lo = torch.as_tensor(np.stack([b.lo for b in self.boxes]), dtype=self.field.dtype)
        hi = torch.as_tensor(np.stack([b.hi for b in self.boxes]), dtype=self.field.dtype)
        return lo, hi

    def part_transforms(self, transforms: torch.Tensor) -> torch.Tensor:
        bones = torch.as_tensor(self.decomp.bones(), dtype=torch.long)
        return transforms[..., bones, :, :]


def build_state(field: OccupancyField, body, decomp=None, boxes=None,
                cloud_count=1000, cloud_seed=0, beta=None, infer_shape=None,
                refit_boxes=False) -> FieldState:
    """Assemble a field state for one body; boxes default to the zero pose fit."""
    pbody = body.body if isinstance(body, CapsuleBody) else body
    if decomp is None:
        decomp = decompose_parts(pbody)
    if decomp.num_parts != field.config.num_parts:
        raise InputError(f"field expects {field.config.num_parts} parts, "
                         f"decomposition has {decomp.num_parts}")
    if boxes is None:
        boxes = fit_body_boxes(body, decomp, count=cloud_count, seed=cloud_seed)
    if infer_shape is None:
        infer_shape = pbody.num_shape_coeffs > 0
    snapshot = pbody.snapshot(beta=beta, dtype=field.dtype)
    return FieldState(field=field, body=body, decomp=decomp, snapshot=snapshot,
                      boxes=boxes, cloud_count=cloud_count, cloud_seed=cloud_seed,
                      infer_shape=infer_shape, refit_boxes=refit_boxes)


def refresh_codes(state: FieldState, transforms, seed=None) -> FieldState:
    """Recompute local codes for the given bone transforms (pipeline: pose the
    mesh, sample part clouds, canonicalize, encode). Must be called before
    field_forward whenever the transforms change."""
    G = validate_transforms(transforms)
    pbody = state.body.body if isinstance(state.body, CapsuleBody) else state.body
    if state.infer_shape and pbody.num_shape_coeffs:
        beta, _ = shape_from_transforms(pbody, G)
        if np.linalg.norm(beta - state.snapshot.beta) > 1e-9:
            state.snapshot = pbody.snapshot(beta=beta, dtype=state.field.dtype)
    seed = state.cloud_seed if seed is None else seed
    state.plan = plan_clouds(state.body, state.decomp, state.cloud_count, seed,
                             dtype=state.field.dtype)
    G_t = torch.as_tensor(G, dtype=state.field.dtype)
    with torch.no_grad():
        V = state.snapshot.pose_from_transforms(G_t)
        part_T = state.part_transforms(G_t)
        clouds = canonical_clouds(V, state.snapshot.faces, state.plan, part_T)
        if state.refit_boxes:
            central = clouds[:, : state.plan.n_central].numpy()
            state.boxes = [fit_part_box(central[k], bone=int(state.plan.bones[k]))
                           for k in range(len(state.boxes))]
        state.codes = state.field.encoder(clouds)
    state.transforms = G_t
    state.key = transforms_key(G)
    return state


def field_forward(state: FieldState, transforms, queries, chunk=16384):
    """Composed logits and argmax part labels for posed-space queries.

    Raises StaleCodesError when the codes cache was not refreshed for these
    transforms. Returns numpy arrays (logits (Q,), labels (Q,)).
    """
    if state.key is None or state.key != transforms_key(transforms):
        raise StaleCodesError("codes cache is stale; call refresh_codes first")
    pts = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    lo, hi = state.box_tensors()
    part_T = state.part_transforms(state.transforms)
    logits = np.empty(pts.shape[0], dtype=np.float64)
    labels = np.empty(pts.shape[0], dtype=np.int64)
    with torch.no_grad():
        for start in range(0, pts.shape[0], chunk):
            q = torch.as_tensor(pts[start: start + chunk], dtype=state.field.dtype)
            dense, _ = masked_part_logits(state.field, lo, hi, state.codes, part_T, q)
            vals, lab = compose_occupancy(dense)
            logits[start: start + chunk] = vals.numpy()
            labels[start: start + chunk] = lab.numpy()
    return logits, labels


def part_logits_forward(state: FieldState, transforms, queries, chunk=16384) -> np.ndarray:
    """Per-part logits (K,Q) numpy; masked entries are exactly zero."""
    if state.key is None or state.key != transforms_key(transforms):
        raise StaleCodesError("codes cache is stale; call refresh_codes first")
    pts = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    lo, hi = state.box_tensors()
    part_T = state.part_transforms(state.transforms)
    out = np.empty((state.num_parts, pts.shape[0]), dtype=np.float64)
    with torch.no_grad():
        for start in range(0, pts.shape[0], chunk):
            q = torch.as_tensor(pts[start: start + chunk], dtype=state.field.dtype)
            dense, _ = masked_part_logits(state.field, lo, hi, state.codes, part_T, q)
            out[:, start: start + chunk] = dense.numpy()
    return out


def as_field_fn(state: FieldState, transforms):
    """Adapter: points -> composed logits, for metrics and iso-surfacing."""
    def fn(points):
        return field_forward(state, transforms, points)[0]
    return fn


# ---------------------------------------------------------------------------
# differentiable pose path
# ---------------------------------------------------------------------------

def pose_logits(field: OccupancyField, snapshot: BodySnapshot, plan: CloudPlan,
                lo, hi, theta: torch.Tensor, queries: torch.Tensor,
                occupancy=False):
    """Composed field as a differentiable function of pose theta (K,3).

    The pose path reaches the output through both the part clouds/codes and the
    query canonicalization. Returns (composed (Q,), dense (K,Q), transforms);
    composed is the max logit, or the max masked occupancy when occupancy=True.
    """
    V, G = snapshot.pose(theta)
    bones = torch.as_tensor(plan.bones, dtype=torch.long)
    part_T = G[bones]
    clouds = canonical_clouds(V, snapshot.faces, plan, part_T)
    codes = field.encoder(clouds)
    compose = masked_part_occupancy if occupancy else masked_part_logits
    dense, _ = compose(field, lo, hi, codes, part_T, queries)
    composed, _ = compose_occupancy(dense)
    return composed, dense, G


def field_gradients(state: FieldState, transforms, queries, wrt="params",
                    labels=None, theta=None):
    """Exact reverse-mode gradients over the queries.

    Without labels: gradient of sum(sigmoid(composed logit)). With labels:
    gradient of the training loss (mean squared error of the masked composed
    occupancy against the labels).
    wrt="params": dict of parameter-name -> gradient array.
    wrt="pose": needs theta (K,3) consistent with `transforms`; returns (K,3).
    """
    if state.key is None or state.key != transforms_key(transforms):
        raise StaleCodesError("codes cache is stale; call refresh_codes first")
    q = torch.as_tensor(np.atleast_2d(np.asarray(queries, dtype=np.float64)),
                        dtype=state.field.dtype)
    lo, hi = state.box_tensors()
    occupancy = labels is not None

    def objective(composed):
        if labels is None:
            return torch.sigmoid(composed).sum()
        lab = torch.as_tensor(np.asarray(labels, dtype=np.float64),
                              dtype=composed.dtype)
        return ((composed - lab) ** 2).mean()

    if wrt == "params":
        # rebuild the codes inside the graph so encoder gradients flow
        with torch.no_grad():
            V = state.snapshot.pose_from_transforms(state.transforms)
        part_T = state.part_transforms(state.transforms)
        clouds = canonical_clouds(V, state.snapshot.faces, state.plan, part_T)
        codes = state.field.encoder(clouds)
        compose = masked_part_occupancy if occupancy else masked_part_logits
        dense, _ = compose(state.field, lo, hi, codes, part_T, q)
        composed, _ = compose_occupancy(dense)
        value = objective(composed)
        params = dict(state.field.named_parameters())
        grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
        return {name: (torch.zeros_like(p) if g is None else g).detach().numpy()
                for (name, p), g in zip(params.items(), grads)}

    if wrt == "pose":
        if theta is None:
            raise InputError("pose gradients need theta")
        theta_t = torch.as_tensor(np.asarray(theta, dtype=np.float64),
                                  dtype=state.field.dtype).clone().requires_grad_(True)
        composed, _, G = pose_logits(state.field, state.snapshot, state.plan,
                                     lo, hi, theta_t, q, occupancy=occupancy)
        with torch.no_grad():
            drift = (G - state.transforms).abs().max().item()
        if drift > 1e-5:
            raise InputError("theta does not reproduce the cached transforms")
        value = objective(composed)
        grad, = torch.autograd.grad(value, theta_t, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(theta_t)
        return grad.detach().numpy()

    raise InputError(f"unknown gradient target {wrt!r}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, field: OccupancyField, boxes, extra=None,
                    optimizer_arrays=None) -> None:
    """Self-describing checkpoint: config + layer shapes + fp32 LE tensors +
    part boxes + format version (+ optional optimizer arrays for resuming)."""
    arrays = {}
    shapes = {}
    for name, tensor in field.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        arrays["param/" + name] = arr
        shapes[name] = list(arr.shape)
    arrays["box_lo"] = np.stack([b.lo for b in boxes]).astype("<f8")
    arrays["box_hi"] = np.stack([b.hi for b in boxes]).astype("<f8")
    arrays["box_bone"] = np.asarray([b.bone for b in boxes], dtype="<i8")
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "field_config": field.config.to_dict(),
        "tensor_shapes": shapes,
        "extra": extra or {},
    }
    if optimizer_arrays:
        for name, arr in optimizer_arrays.items():
            arrays["opt/" + name] = np.asarray(arr)
        header["optimizer_keys"] = sorted(optimizer_arrays.keys())
    np.savez(path, header=np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8),
             **arrays)


def load_checkpoint(path, dtype=torch.float32):
    """Returns (field, boxes, header, optimizer_arrays_or_None)."""
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    if "header" not in data:
        raise InputError(f"checkpoint {path} has no header")
    header = json.loads(bytes(data["header"]).decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint format version "
                         f"{header.get('format_version')!r}")
    config = FieldConfig(**header["field_config"])
    field = OccupancyField(config).to(dtype)
    state_dict = {}
    for name, shape in header["tensor_shapes"].items():
        arr = data["param/" + name]
        if list(arr.shape) != shape:
            raise InputError(f"checkpoint tensor {name} has shape {arr.shape}, "
                             f"header says {shape}")
        state_dict[name] = torch.as_tensor(arr, dtype=dtype)
    field.load_state_dict(state_dict)
    boxes = [PartBox(lo=lo, hi=hi, bone=int(bone)) for lo, hi, bone in
             zip(data["box_lo"], data["box_hi"], data["box_bone"])]
    opt = None
    if "optimizer_keys" in header:
        opt = {name: data["opt/" + name] for name in header["optimizer_keys"]}
    return field, boxes, header, opt
