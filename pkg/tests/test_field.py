import numpy as np
import pytest
import torch

import partocc as po
from partocc.errors import InputError, StaleCodesError
from partocc.field import (FieldConfig, OccupancyField, build_state, compose_occupancy,
                           decode_part, encode_part, field_forward, field_gradients,
                           load_checkpoint, masked_part_occupancy, part_logits_forward,
                           refresh_codes, save_checkpoint, transforms_key)
from partocc.body import axis_angle_to_matrix


@pytest.fixture(scope="module")
def setup3(cap3):
    """Double-precision desk field over the K=3 capsule body, codes refreshed."""
    field = OccupancyField(FieldConfig.desk(3), seed=1).double()
    with torch.no_grad():
        field.decoder.layers[-1].bias.fill_(0.05)   # logits straddle zero untrained
    state = build_state(field, cap3, cloud_count=128)
    theta = np.zeros((3, 3))
    theta[1] = [0.4, 0.2, 0.0]
    theta[2] = [0.0, -0.5, 0.3]
    V, G = po.skin_vertices(cap3.body, theta=theta)
    refresh_codes(state, G, seed=2)
    rng = np.random.default_rng(1)
    queries = V[rng.integers(0, len(V), 128)] + rng.normal(0, 0.03, (128, 3))
    return state, theta, G, V, queries


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def test_encoder_permutation_invariant_bitwise(setup3):
    state, *_ = setup3
    rng = np.random.default_rng(0)
    pts = torch.as_tensor(rng.normal(size=(200, 3)))
    z = encode_part(state.field, pts, 0)
    for seed in range(5):
        perm = torch.as_tensor(np.random.default_rng(seed).permutation(200))
        z2 = encode_part(state.field, pts[perm], 0)
        assert (z.z == z2.z).all()
    assert int(z.onehot.argmax()) == 0 and float(z.onehot.sum()) == 1.0


def test_encoder_duplicate_points_idempotent(setup3):
    state, *_ = setup3
    pts = torch.as_tensor(np.random.default_rng(2).normal(size=(64, 3)))
    z1 = encode_part(state.field, pts, 1)
    z2 = encode_part(state.field, torch.cat([pts, pts, pts]), 1)
    assert (z1.z == z2.z).all()


def test_encoder_rejects_empty_cloud(setup3):
    state, *_ = setup3
    with pytest.raises(InputError):
        encode_part(state.field, np.zeros((0, 3)), 0)


def test_encoder_matches_naive_forward_oracle(setup3):
    state, *_ = setup3
    enc = state.field.encoder
    pts = np.random.default_rng(3).normal(size=(40, 3))
    # naive per-point loop with explicit skip and max pooling
    weights = [(l.weight.detach().numpy(), l.bias.detach().numpy()) for l in enc.layers]
    feats = []
    for p in pts:
        h = p
        for i, (W, b) in enumerate(weights):
            if i == enc.skip_at:
                h = np.concatenate([h, p])
            h = np.maximum(W @ h + b, 0.0)
        feats.append(h)
    pooled = np.max(feats, axis=0)
    Wp, bp = enc.proj.weight.detach().numpy(), enc.proj.bias.detach().numpy()
    expected = Wp @ pooled + bp
    z = encode_part(state.field, pts, 0).z.detach().numpy()
    assert np.abs(z - expected).max() < 1e-6


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

def test_decode_masked_is_exact_zero(setup3):
    state, *_ = setup3
    code = encode_part(state.field, np.random.default_rng(0).normal(size=(32, 3)), 2)
    out = decode_part(state.field, [0.3, -0.1, 0.2], 0.0, code)
    assert float(out) == 0.0


def test_decode_deterministic(setup3):
    state, *_ = setup3
    code = encode_part(state.field, np.random.default_rng(1).normal(size=(32, 3)), 1)
    a = decode_part(state.field, [0.1, 0.0, -0.2], 1.0, code)
    b = decode_part(state.field, [0.1, 0.0, -0.2], 1.0, code)
    assert float(a) == float(b)


def test_decoder_matches_naive_layer_oracle(setup3):
    state, *_ = setup3
    dec = state.field.decoder
    code = encode_part(state.field, np.random.default_rng(2).normal(size=(32, 3)), 1)
    x = np.array([0.05, -0.02, 0.1])
    feats = np.concatenate([x, [1.0], code.z.detach().numpy(),
                            code.onehot.detach().numpy()])

    def softplus(v, beta=100.0, threshold=20.0):
        v = np.asarray(v, dtype=np.float64)
        return np.where(v * beta > threshold, v, np.log1p(np.exp(v * beta)) / beta)

    h = feats
    for i, layer in enumerate(dec.layers):
        W = layer.weight.detach().numpy()
        b = layer.bias.detach().numpy()
        if i == dec.skip_at:
            h = np.concatenate([h, feats])
        h = W @ h + b
        if i < len(dec.layers) - 1:
            h = softplus(h)
    expected = h[0]
    out = float(decode_part(state.field, x, 1.0, code))
    assert abs(out - expected) < 1e-6


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

def test_compose_simple_max():
    vals, label = compose_occupancy(np.array([0.2, 0.9, 0.1]))
    assert vals == pytest.approx(0.9) and label == 1


def test_compose_all_masked_is_outside():
    vals, _ = compose_occupancy(np.zeros(5))
    assert vals == 0.0
    assert not bool(po.field.classify_inside(vals))


def test_compose_matches_bruteforce():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(24, 100))
    vals, labels = compose_occupancy(logits)
    assert np.array_equal(vals, logits.max(axis=0))
    assert np.array_equal(labels, logits.argmax(axis=0))


# ---------------------------------------------------------------------------
# field forward
# ---------------------------------------------------------------------------

def test_far_query_logit_exactly_zero(setup3):
    state, theta, G, V, _ = setup3
    logits, _ = field_forward(state, G, np.array([[10.0, 10.0, 10.0]]))
    assert logits[0] == 0.0


def test_batch_equals_single_queries(setup3):
    state, theta, G, V, queries = setup3
    batch, labels = field_forward(state, G, queries)
    singles = np.array([field_forward(state, G, q[None])[0][0] for q in queries[:20]])
    assert np.abs(batch[:20] - singles).max() < 1e-12
    assert labels.shape == batch.shape


def test_stale_codes_raise(setup3):
    state, theta, G, V, queries = setup3
    G2 = G.copy()
    G2[1, :3, 3] += 1e-3
    with pytest.raises(StaleCodesError):
        field_forward(state, G2, queries[:4])
    assert transforms_key(G2) != transforms_key(G)


def test_part_logits_masked_entries_zero(setup3):
    state, theta, G, V, queries = setup3
    pl = part_logits_forward(state, G, queries)
    assert pl.shape == (3, len(queries))
    lo, hi = state.box_tensors()
    part_T = state.part_transforms(state.transforms)
    with torch.no_grad():
        _, inside = masked_part_occupancy(
            state.field, lo, hi, state.codes, part_T,
            torch.as_tensor(queries, dtype=torch.float64))
    assert (pl[~inside.numpy()] == 0.0).all()


def test_rigid_equivariance(setup3, cap3):
    state, theta, G, V, queries = setup3
    base, _ = field_forward(state, G, queries)
    for seed in range(8):
        rng = np.random.default_rng(seed)
        T = np.eye(4)
        T[:3, :3] = axis_angle_to_matrix(
            torch.as_tensor(rng.normal(size=3), dtype=torch.float64)).numpy()
        T[:3, 3] = rng.normal(size=3)
        TG = np.einsum("ij,kjl->kil", T, G)
        qT = queries @ T[:3, :3].T + T[:3, 3]
        st2 = build_state(state.field, cap3, cloud_count=128)
        refresh_codes(st2, TG, seed=2)
        moved, _ = field_forward(st2, TG, qT)
        assert np.abs(moved - base).max() <= 1e-5


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def fd_check_params(state, G, queries, labels, n_coords, seed, h=1e-4):
    grads = field_gradients(state, G, queries, wrt="params", labels=labels)
    params = dict(state.field.named_parameters())
    names = list(grads)
    rng = np.random.default_rng(seed)

    def value():
        logits, _ = field_forward(state, G, queries)
        if labels is None:
            return sigmoid(logits).sum()
        occ = part_occ_compose(state, G, queries)
        return ((occ - labels) ** 2).mean()

    def part_occ_compose(state, G, queries):
        pl = part_logits_forward(state, G, queries)
        lo, hi = state.box_tensors()
        part_T = state.part_transforms(state.transforms)
        with torch.no_grad():
            dense, _ = masked_part_occupancy(
                state.field, lo, hi, state.codes, part_T,
                torch.as_tensor(queries, dtype=state.field.dtype))
        return dense.max(dim=0).values.numpy()

    checked = failed = 0
    while checked < n_coords:
        nm = names[rng.integers(len(names))]
        idx = tuple(rng.integers(s) for s in grads[nm].shape)
        p = params[nm]
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + h
        refresh_codes(state, G, seed=2)
        f_plus = value()
        with torch.no_grad():
            p[idx] = orig - h
        refresh_codes(state, G, seed=2)
        f_minus = value()
        with torch.no_grad():
            p[idx] = orig
        refresh_codes(state, G, seed=2)
        f_mid = value()
        fd = (f_plus - f_minus) / (2 * h)
        d_plus = (f_plus - f_mid) / h
        d_minus = (f_mid - f_minus) / h
        if abs(d_plus - d_minus) > 1e-3 * max(abs(d_plus), abs(d_minus), 1e-6):
            continue        # stencil straddles a ReLU/max kink
        checked += 1
        ad = grads[nm][idx]
        if abs(ad - fd) > 1e-3 * max(abs(ad), abs(fd)) + 1e-6:
            failed += 1
    return checked, failed


def test_param_gradients_match_fd(setup3):
    state, theta, G, V, queries = setup3
    checked, failed = fd_check_params(state, G, queries[:64], None, 30, seed=5)
    assert checked == 30 and failed == 0


def test_param_gradients_of_training_loss_match_fd(setup3, cap3):
    state, theta, G, V, queries = setup3
    labels = cap3.contains(queries[:64], G).astype(np.float64)
    checked, failed = fd_check_params(state, G, queries[:64], labels, 20, seed=6)
    assert checked == 20 and failed == 0


def test_pose_gradients_match_fd(setup3, cap3):
    state, theta, G, V, queries = setup3
    qs = queries[:48]
    # keep only queries whose box-mask pattern is stable under the fd stencil
    J = po.regress_joints(cap3.body)

    def masks(th):
        Gp = po.forward_kinematics(cap3.body.tree, th, J)
        st = build_state(state.field, cap3, cloud_count=128)
        refresh_codes(st, Gp, seed=2)
        return part_logits_forward(st, Gp, qs) != 0.0

    h = 1e-4
    stable = np.ones(qs.shape[0], dtype=bool)
    base_mask = masks(theta)
    for j in range(3):
        for c in range(3):
            tp = theta.copy()
            tp[j, c] += h
            tm = theta.copy()
            tm[j, c] -= h
            stable &= (masks(tp) == base_mask).all(axis=0)
            stable &= (masks(tm) == base_mask).all(axis=0)
    qs = qs[stable]
    assert qs.shape[0] >= 10

    grad = field_gradients(state, G, qs, wrt="pose", theta=theta)

    def value(th):
        Gp = po.forward_kinematics(cap3.body.tree, th, J)
        st = build_state(state.field, cap3, cloud_count=128)
        refresh_codes(st, Gp, seed=2)
        logits, _ = field_forward(st, Gp, qs)
        return sigmoid(logits).sum()

    for j in range(3):
        for c in range(3):
            tp = theta.copy()
            tp[j, c] += h
            tm = theta.copy()
            tm[j, c] -= h
            fd = (value(tp) - value(tm)) / (2 * h)
            ad = grad[j, c]
            assert abs(ad - fd) <= 1e-3 * max(abs(ad), abs(fd)) + 1e-7, (j, c, ad, fd)


def test_outside_all_boxes_zero_param_gradient(setup3):
    state, theta, G, V, _ = setup3
    far = np.random.default_rng(8).uniform(20.0, 30.0, size=(64, 3))
    logits, _ = field_forward(state, G, far)
    assert (logits == 0.0).all()
    grads = field_gradients(state, G, far, wrt="params")
    assert all(np.abs(g).max() == 0.0 for g in grads.values())


def test_pose_gradient_requires_matching_theta(setup3):
    state, theta, G, V, queries = setup3
    with pytest.raises(InputError):
        field_gradients(state, G, queries[:4], wrt="pose", theta=theta + 0.3)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, setup3, cap3):
    state, theta, G, V, queries = setup3
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, state.field, state.boxes, extra={"iteration": 7})
    field2, boxes2, header, opt = load_checkpoint(path, dtype=torch.float64)
    assert header["extra"]["iteration"] == 7
    assert opt is None
    st2 = build_state(field2, cap3, boxes=boxes2, cloud_count=128)
    refresh_codes(st2, G, seed=2)
    a, _ = field_forward(state, G, queries)
    b, _ = field_forward(st2, G, queries)
    # weights round through fp32 storage
    assert np.abs(a - b).max() < 1e-4
    for (n1, p1), (n2, p2) in zip(state.field.named_parameters(),
                                  field2.named_parameters()):
        assert n1 == n2
        assert np.abs(p1.detach().numpy().astype(np.float32)
                      - p2.detach().numpy().astype(np.float32)).max() == 0.0


def test_checkpoint_rejects_wrong_version(tmp_path, setup3):
    state, *_ = setup3
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, state.field, state.boxes)
    import json
    data = dict(np.load(path, allow_pickle=False))
    header = json.loads(bytes(data["header"]).decode())
    header["format_version"] = 999
    data["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(path, **data)
    with pytest.raises(InputError):
        load_checkpoint(path)
