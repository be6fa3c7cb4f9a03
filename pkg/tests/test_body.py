import json

import numpy as np
import pytest
import torch

import partocc as po
from partocc.body import (axis_angle_to_matrix, check_watertight, joints_from_transforms,
                          mesh_face_components, pose_vertices_from_transforms,
                          rigid_inverse_np)
from partocc.errors import InputError, NumericError
from partocc import meshio
from conftest import tiny_body


def fk_hand(parents, theta, joints):
    """Independent chain composition oracle."""
    K = len(parents)
    rots = axis_angle_to_matrix(torch.as_tensor(theta, dtype=torch.float64)).numpy()
    G = [None] * K
    for k in range(K):
        local = np.eye(4)
        local[:3, :3] = rots[k]
        local[:3, 3] = joints[k] if parents[k] < 0 else joints[k] - joints[parents[k]]
        G[k] = local if parents[k] < 0 else G[parents[k]] @ local
    return np.asarray(G)


# ---------------------------------------------------------------------------
# joint regression
# ---------------------------------------------------------------------------

def test_regress_joints_one_hot_regressor():
    reg = np.zeros((2, 5))
    reg[0, 3] = 1.0
    reg[1, 0] = 1.0
    w = np.zeros((2, 5))
    w[0] = [1, 1, 1, 0.5, 0]
    w[1] = 1 - w[0]
    body = tiny_body(w, regressor=reg)
    J = po.regress_joints(body)
    assert np.allclose(J[0], body.vertices[3])
    assert np.allclose(J[1], body.vertices[0])


def test_regress_joints_uniform_regressor_centroid():
    w = np.full((2, 6), 0.5)
    body = tiny_body(w)
    J = po.regress_joints(body)
    assert np.allclose(J, body.vertices.mean(axis=0))


def test_regress_joints_matches_naive_matmul(cap3):
    body = cap3.body
    rng = np.random.default_rng(3)
    beta = rng.normal(size=body.num_shape_coeffs)
    J = po.regress_joints(body, beta)
    shaped = body.vertices + sum(beta[s] * body.shape_basis[s]
                                 for s in range(len(beta)))
    naive = np.zeros((body.num_joints, 3))
    for k in range(body.num_joints):
        for n in range(body.num_vertices):
            naive[k] += body.joint_regressor[k, n] * shaped[n]
    assert np.abs(J - naive).max() < 1e-12


def test_regress_joints_dimension_mismatch(cap3):
    with pytest.raises(InputError):
        po.regress_joints(cap3.body, np.zeros(5))


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

def test_fk_single_joint_identity():
    tree = po.KinematicTree([-1])
    G = po.forward_kinematics(tree, np.zeros((1, 3)), np.zeros((1, 3)))
    assert np.allclose(G[0], np.eye(4))


def test_fk_zero_pose_translations_are_joints():
    tree = po.KinematicTree([-1, 0, 1, 1])
    J = np.random.default_rng(0).normal(size=(4, 3))
    G = po.forward_kinematics(tree, np.zeros((4, 3)), J)
    assert np.allclose(G[:, :3, :3], np.eye(3))
    assert np.allclose(G[:, :3, 3], J)


def test_fk_three_joint_chain_hand_composed():
    tree = po.KinematicTree([-1, 0, 1])
    J = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    theta = np.zeros((3, 3))
    theta[1] = [0.0, 0.0, np.pi / 2]
    G = po.forward_kinematics(tree, theta, J)
    assert np.allclose(G, fk_hand([-1, 0, 1], theta, J), atol=1e-12)
    # the leaf joint lands rotated about joint 1
    assert np.allclose(G[2, :3, 3], [1.0, 1.0, 0.0], atol=1e-12)


def test_fk_random_matches_hand_oracle(cap8):
    body = cap8.body
    rng = np.random.default_rng(5)
    theta = rng.normal(0, 0.5, size=(8, 3))
    J = po.regress_joints(body)
    G = po.forward_kinematics(body.tree, theta, J)
    assert np.abs(G - fk_hand(body.tree.parents, theta, J)).max() < 1e-12
    po.validate_transforms(G)


# ---------------------------------------------------------------------------
# linear blend skinning
# ---------------------------------------------------------------------------

def test_lbs_zero_pose_is_canonical(cap3):
    V, _ = po.skin_vertices(cap3.body)
    assert np.abs(V - cap3.body.vertices).max() < 1e-12


def test_lbs_single_bone_weight_is_rigid():
    w = np.zeros((2, 6))
    w[1, :] = 1.0
    reg = np.zeros((2, 6))
    reg[0, 0] = 1.0
    reg[1, 1] = 1.0
    body = tiny_body(w, regressor=reg)
    theta = np.zeros((2, 3))
    theta[1] = [0.0, 0.0, 0.7]
    V, _ = po.skin_vertices(body, theta=theta)
    J = po.regress_joints(body)
    R = axis_angle_to_matrix(torch.as_tensor(theta[1], dtype=torch.float64)).numpy()
    expected = (body.vertices - J[1]) @ R.T + J[1]
    assert np.abs(V - expected).max() < 1e-9


def test_lbs_matches_naive_per_vertex_oracle(cap3):
    body = cap3.body
    theta = np.random.default_rng(4).normal(0, 0.4, size=(3, 3))
    V, G = po.skin_vertices(body, theta=theta)
    J = po.regress_joints(body)
    naive = np.zeros_like(body.vertices)
    for i in range(body.num_vertices):
        M = np.zeros((4, 4))
        for k in range(3):
            G0_inv = np.eye(4)
            G0_inv[:3, 3] = -J[k]
            M += body.weights[k, i] * (G[k] @ G0_inv)
        naive[i] = (M @ np.append(body.vertices[i], 1.0))[:3]
    assert np.abs(V - naive).max() < 1e-6


def test_rigid_equivariance_of_skinning(cap3):
    theta = np.random.default_rng(6).normal(0, 0.4, size=(3, 3))
    V, G = po.skin_vertices(cap3.body, theta=theta)
    aa = np.array([0.3, -1.1, 0.6])
    T = np.eye(4)
    T[:3, :3] = axis_angle_to_matrix(torch.as_tensor(aa, dtype=torch.float64)).numpy()
    T[:3, 3] = [0.5, -2.0, 1.0]
    TV = V @ T[:3, :3].T + T[:3, 3]
    V2 = pose_vertices_from_transforms(cap3.body, np.einsum("ij,kjl->kil", T, G))
    assert np.abs(TV - V2).max() < 1e-6


# ---------------------------------------------------------------------------
# shape from transforms
# ---------------------------------------------------------------------------

def test_shape_recovery_zero(cap3):
    theta = np.random.default_rng(7).normal(0, 0.6, size=(3, 3))
    _, G = po.skin_vertices(cap3.body, theta=theta)
    beta, residual = po.shape_from_transforms(cap3.body, G)
    assert np.abs(beta).max() < 1e-6
    assert residual < 1e-9


def test_shape_recovery_round_trip(cap8):
    body = cap8.body
    beta_star = np.array([0.4, -0.8])
    theta = np.random.default_rng(8).normal(0, 0.5, size=(8, 3))
    J = po.regress_joints(body, beta_star)
    G = po.forward_kinematics(body.tree, theta, J)
    beta, residual = po.shape_from_transforms(body, G)
    assert np.abs(beta - beta_star).max() < 1e-5
    assert residual < 1e-8
    assert np.abs(po.regress_joints(body, beta) - J).max() < 1e-5


def test_shape_recovery_off_span_reports_residual(cap3):
    body = cap3.body
    J = po.regress_joints(body) + np.random.default_rng(9).normal(0, 0.02, (3, 3))
    G = po.forward_kinematics(body.tree, np.zeros((3, 3)), J)
    beta, residual = po.shape_from_transforms(body, G)
    # compare against a direct lstsq oracle on the relative-offset system
    parents = body.tree.parents
    reg_rel = body.joint_regressor[1:] - body.joint_regressor[parents[1:]]
    A = np.stack([(reg_rel @ body.shape_basis[s]).reshape(-1) for s in range(2)], axis=1)
    rel = J[1:] - J[parents[1:]]
    b = (rel - reg_rel @ body.vertices).reshape(-1)
    beta_ref = np.linalg.lstsq(A, b, rcond=None)[0]
    assert np.abs(beta - beta_ref).max() < 1e-10
    assert residual == pytest.approx(np.linalg.norm(A @ beta_ref - b), rel=1e-9)
    assert residual > 1e-4


def test_shape_recovery_rank_deficient():
    w = np.full((2, 8), 0.5)
    basis = np.zeros((2, 8, 3))  # both directions identical -> deficient
    basis[0, :, 0] = 1.0
    basis[1, :, 0] = 1.0
    body = tiny_body(w, shape_basis=basis)
    J = po.regress_joints(body)
    G = po.forward_kinematics(body.tree, np.zeros((2, 3)), J)
    with pytest.raises(NumericError):
        po.shape_from_transforms(body, G)


def test_joints_from_transforms_pose_invariant(cap8):
    body = cap8.body
    J = po.regress_joints(body)
    for seed in range(3):
        theta = np.random.default_rng(seed).normal(0, 0.8, size=(8, 3))
        G = po.forward_kinematics(body.tree, theta, J)
        assert np.abs(joints_from_transforms(body.tree, G) - J).max() < 1e-9


# ---------------------------------------------------------------------------
# rotations and transform validation
# ---------------------------------------------------------------------------

def test_rodrigues_known_values():
    R = axis_angle_to_matrix(torch.tensor([0.0, 0.0, np.pi / 2], dtype=torch.float64))
    assert np.allclose(R.numpy(), [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    R0 = axis_angle_to_matrix(torch.zeros(3, dtype=torch.float64))
    assert np.allclose(R0.numpy(), np.eye(3))


def test_rodrigues_gradient_finite_at_zero():
    aa = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    R = axis_angle_to_matrix(aa)
    R.sum().backward()
    assert torch.isfinite(aa.grad).all()
    # derivative of R_01 w.r.t. theta_z at zero is -1 (skew term)
    aa2 = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    axis_angle_to_matrix(aa2)[0, 1].backward()
    assert aa2.grad[2].item() == pytest.approx(-1.0, abs=1e-9)


def test_rodrigues_series_matches_exact_branch():
    for mag in (1e-9, 1e-7, 1e-5):
        aa = torch.tensor([mag, 0.0, 0.0], dtype=torch.float64)
        R = axis_angle_to_matrix(aa).numpy()
        c, s = np.cos(mag), np.sin(mag)
        expected = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
        assert np.abs(R - expected).max() < 1e-15


def test_validate_transforms_rejects_non_rigid():
    G = np.tile(np.eye(4), (1, 1, 1))
    G[0, 0, 0] = 2.0
    with pytest.raises(InputError):
        po.validate_transforms(G)
    G2 = np.tile(np.eye(4), (1, 1, 1))
    G2[0, 3, 0] = 0.1
    with pytest.raises(InputError):
        po.validate_transforms(G2)


def test_rigid_inverse_np_round_trip():
    rng = np.random.default_rng(11)
    aa = rng.normal(size=3)
    T = np.eye(4)
    T[:3, :3] = axis_angle_to_matrix(torch.as_tensor(aa, dtype=torch.float64)).numpy()
    T[:3, 3] = rng.normal(size=3)
    assert np.abs(rigid_inverse_np(T) @ T - np.eye(4)).max() < 1e-12


# ---------------------------------------------------------------------------
# capsule body
# ---------------------------------------------------------------------------

def test_capsule_body_deterministic():
    a = po.make_capsule_body(2, seed=7)
    b = po.make_capsule_body(2, seed=7)
    assert po.body_digest(a) == po.body_digest(b)
    c = po.make_capsule_body(2, seed=8)
    assert po.body_digest(a) != po.body_digest(c)


def test_capsule_body_rejects_single_part():
    with pytest.raises(InputError):
        po.make_capsule_body(1, seed=0)


def test_capsule_segment_midpoint_inside(cap3):
    mids = cap3.segments.mean(axis=1)
    assert cap3.contains(mids).all()


def test_capsule_mesh_is_watertight(cap8):
    check_watertight(cap8.body.faces, cap8.body.num_vertices)


def test_capsule_mesh_components_one_per_part(cap8):
    labels = mesh_face_components(cap8.body.faces, cap8.body.num_vertices)
    assert len(np.unique(labels)) == cap8.num_parts


def test_capsule_analytic_vs_mesh_parity(cap3):
    rng = np.random.default_rng(12)
    V, G = po.skin_vertices(cap3.body)
    lo, hi = V.min(0) - 0.1, V.max(0) + 0.1
    pts = lo + rng.random((10000, 3)) * (hi - lo)
    analytic = cap3.contains(pts, G)
    parity = po.label_occupancy(V, cap3.body.faces, pts, seed=0).astype(bool)
    assert (analytic == parity).mean() >= 0.99


def test_capsule_body_roundtrip_file(tmp_path, cap3):
    path = tmp_path / "body.json"
    po.save_body(path, cap3)
    loaded = po.load_body(path)
    assert isinstance(loaded, po.CapsuleBody)
    assert po.body_digest(loaded) == po.body_digest(cap3)
    # same flags -> identical file bytes
    path2 = tmp_path / "body2.json"
    po.save_body(path2, po.make_capsule_body(3, seed=5))
    assert path.read_bytes() == path2.read_bytes()


def test_load_body_rejects_bad_version(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"format_version": 99}))
    with pytest.raises(InputError):
        po.load_body(path)


def test_watertight_check_catches_open_mesh():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    faces = np.array([[0, 1, 2], [0, 3, 1], [1, 3, 2]])  # one face missing
    with pytest.raises(InputError):
        check_watertight(faces, 4)


# ---------------------------------------------------------------------------
# mesh I/O
# ---------------------------------------------------------------------------

def test_obj_roundtrip(tmp_path, cap2):
    path = tmp_path / "mesh.obj"
    meshio.save_obj(path, cap2.body.vertices, cap2.body.faces)
    v, f = meshio.load_obj(path)
    assert np.abs(v - cap2.body.vertices).max() < 1e-6
    assert (f == cap2.body.faces).all()


def test_ply_roundtrip(tmp_path, cap2):
    path = tmp_path / "mesh.ply"
    meshio.save_ply(path, cap2.body.vertices, cap2.body.faces)
    v, f, _ = meshio.load_ply(path)
    assert np.abs(v - cap2.body.vertices).max() < 1e-6
    assert (f == cap2.body.faces).all()


def test_ply_point_cloud_with_normals(tmp_path):
    rng = np.random.default_rng(1)
    pts, nrm = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    path = tmp_path / "scan.ply"
    meshio.save_ply(path, pts, normals=nrm)
    p, n = meshio.load_scan(path)
    assert np.abs(p - pts).max() < 1e-6
    assert np.abs(n - nrm).max() < 1e-6


def test_xyz_scan(tmp_path):
    path = tmp_path / "scan.xyz"
    path.write_text("0 0 0 0 1 0\n1 2 3 0 0 1\n")
    p, n = meshio.load_scan(path)
    assert p.shape == (2, 3) and n.shape == (2, 3)
