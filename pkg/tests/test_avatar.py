"""Skinning, the joint PCA model and the texture editing operators."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splattex.avatar import (
    DegenerateTransformError, LayoutMismatchError, SkinningRig, canonicalize, expression_transfer,
    fit_coefficients, gem_reconstruct, interpolate, load_model, pca_fit, pose, reconstruct_flat,
    reconstruction_errors, refine_mean, region_swap, save_model, standardize, swap_weights, truncate,
    unflatten,
)
from splattex.core_math import RigidPose, axis_angle_to_quat, quat_multiply
from splattex.gaussians import CHANNELS, GaussianTexture


def random_texture(rng, H=4, W=5, valid=None):
    q = rng.normal(size=(H, W, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    valid = np.ones((H, W), bool) if valid is None else valid
    return GaussianTexture(rng.uniform(0.2, 0.8, (H, W, 3)), rng.uniform(0.2, 0.8, (H, W)),
                           0.1 * rng.normal(size=(H, W, 3)), rng.uniform(1e-3, 5e-3, (H, W, 3)), q, valid)


def random_rigid(rng, angle=0.6, shift=0.05):
    axis = rng.normal(size=3)
    return RigidPose(axis_angle_to_quat(axis, rng.uniform(-angle, angle)), shift * rng.normal(size=3)).as_4x4()


def random_rig(rng, shape=(4, 5), J=3):
    rest = np.stack([random_rigid(rng) for _ in range(J)])
    posed = np.stack([random_rigid(rng) for _ in range(J)])
    w = rng.random(shape + (J,))
    return SkinningRig(rest, posed, w / w.sum(-1, keepdims=True))


def translation(t):
    T = np.eye(4)
    T[:3, 3] = t
    return T


# ---------------------------------------------------------------------------
# skinning
# ---------------------------------------------------------------------------

def test_rest_pose_leaves_texture_unchanged():
    rng = np.random.default_rng(0)
    g = random_texture(rng)
    rig = random_rig(rng)
    rig = SkinningRig(rig.rest, rig.rest.copy(), rig.weights)
    for op in (canonicalize, pose):
        out = op(g, rig)
        assert np.abs(out.as_array() - g.as_array()).max() < 1e-9


def test_pure_translation_and_cancelling_pair():
    rng = np.random.default_rng(1)
    g = random_texture(rng)
    t = np.array([0.01, -0.02, 0.03])
    rig = SkinningRig(np.eye(4)[None], translation(t)[None], np.ones((4, 5, 1)))
    assert np.allclose(canonicalize(g, rig).position, g.position - t, atol=1e-15)
    pair = SkinningRig(np.stack([np.eye(4)] * 2), np.stack([translation(t), translation(-t)]),
                       np.full((4, 5, 2), 0.5))
    assert np.allclose(pose(g, pair).position, g.position, atol=1e-15)


def test_single_joint_rotation_matches_direct_transform():
    rng = np.random.default_rng(2)
    g = random_texture(rng)
    T = random_rigid(rng)
    rig = SkinningRig(np.eye(4)[None], T[None], np.ones((4, 5, 1)))
    out = pose(g, rig)
    assert np.allclose(out.position, g.position @ T[:3, :3].T + T[:3, 3], atol=1e-14)
    q = RigidPose.from_matrix(T[:3, :3], T[:3, 3]).rotation
    expect = quat_multiply(np.broadcast_to(q, g.rotation.shape), g.rotation)
    sign = np.sign((expect * out.rotation).sum(-1, keepdims=True))
    assert np.allclose(out.rotation, sign * expect, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pose_and_canonicalize_are_inverse(seed):
    rng = np.random.default_rng(seed)
    g = random_texture(rng)
    rig = random_rig(rng)
    back = canonicalize(pose(g, rig), rig)
    assert np.abs(back.position - g.position).max() < 1e-6
    sign = np.sign((back.rotation * g.rotation).sum(-1, keepdims=True))
    assert np.abs(sign * back.rotation - g.rotation).max() < 1e-6
    fwd = pose(canonicalize(g, rig), rig)
    assert np.abs(fwd.position - g.position).max() < 1e-6


def test_rig_validation_and_degenerate_blend():
    with pytest.raises(ValueError):
        SkinningRig(np.eye(4)[None], np.eye(4)[None], np.full((2, 2, 1), 0.9))
    flip = np.diag([-1.0, -1.0, 1.0, 1.0])  # a half turn about z
    rig = SkinningRig(np.stack([np.eye(4)] * 2), np.stack([np.eye(4), flip]), np.full((4, 5, 2), 0.5))
    with pytest.raises(DegenerateTransformError):
        pose(random_texture(np.random.default_rng(3)), rig)
    small = SkinningRig(np.eye(4)[None], np.eye(4)[None], np.ones((2, 2, 1)))
    with pytest.raises(LayoutMismatchError):
        pose(random_texture(np.random.default_rng(3)), small)


# ---------------------------------------------------------------------------
# joint PCA
# ---------------------------------------------------------------------------

def frames(rng, N, valid=None):
    return [random_texture(rng, valid=valid) for _ in range(N)]


def test_eigenvalues_match_covariance_decomposition():
    rng = np.random.default_rng(4)
    fs = frames(rng, 5)
    model = pca_fit(fs, 4)
    X = np.stack([standardize(model, f) for f in fs])
    C = np.cov(X, rowvar=False)
    evals = np.sort(np.linalg.eigvalsh(C))[::-1][:4]
    assert np.allclose(model.explained_variance, evals, atol=1e-8)
    assert np.abs(model.basis.T @ model.basis - np.eye(4)).max() < 1e-8
    assert model.D == 20 * CHANNELS


def test_full_rank_reconstructs_training_frames():
    rng = np.random.default_rng(5)
    fs = frames(rng, 6)
    model = pca_fit(fs, 5)
    for f in fs:
        x = standardize(model, f)
        assert np.abs(reconstruct_flat(model, fit_coefficients(model, f)) - x).max() < 1e-6


def test_two_frames_basis_along_difference():
    rng = np.random.default_rng(6)
    a, b = frames(rng, 2)
    model = pca_fit([a, b], 1)
    d = standardize(model, b) - standardize(model, a)
    cos = abs(model.basis[:, 0] @ d) / np.linalg.norm(d)
    assert abs(cos - 1.0) < 1e-12
    pivot = np.argmax(np.abs(model.basis[:, 0]))
    assert model.basis[pivot, 0] > 0


def test_error_non_increasing_in_k_and_truncate():
    rng = np.random.default_rng(7)
    fs = frames(rng, 8)
    model = pca_fit(fs, 7)
    errs = [reconstruction_errors(truncate(model, k), fs).mean() for k in range(1, 8)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert np.array_equal(pca_fit(fs, 3).basis, truncate(model, 3).basis)


def test_reconstruction_affine_and_projection_round_trip():
    rng = np.random.default_rng(8)
    model = pca_fit(frames(rng, 6), 4)
    k1, k2 = rng.normal(size=4), rng.normal(size=4)
    z = np.zeros(4)
    lhs = reconstruct_flat(model, k1) + reconstruct_flat(model, k2) - reconstruct_flat(model, z)
    assert np.allclose(lhs, reconstruct_flat(model, k1 + k2), atol=1e-12)
    small = 0.1 * k1  # stays clear of every clamp
    g = gem_reconstruct(model, small)
    # the mean texture itself (before rotation renormalization) has zero coefficients
    mean_tex = unflatten(model.mean * model.channel_scale(), model.valid)
    assert np.abs(fit_coefficients(model, mean_tex)).max() < 1e-10
    x = reconstruct_flat(model, small)
    assert np.allclose(model.basis.T @ (x - model.mean), small, atol=1e-10)
    assert g.valid.all()


def test_coefficients_solve_least_squares():
    rng = np.random.default_rng(9)
    fs = frames(rng, 7)
    model = pca_fit(fs, 3)
    g = random_texture(rng)
    B = model.basis
    normal = np.linalg.solve(B.T @ B, B.T @ (standardize(model, g) - model.mean))
    assert np.allclose(fit_coefficients(model, g), normal, atol=1e-8)


def test_reconstruction_satisfies_texture_ranges():
    rng = np.random.default_rng(10)
    model = pca_fit(frames(rng, 5), 4)
    g = gem_reconstruct(model, 50.0 * rng.normal(size=4))
    v = g.valid
    assert np.all((g.opacity[v] > 0) & (g.opacity[v] < 1)) and np.all(g.scale[v] > 0)
    assert np.all((g.color[v] >= 0) & (g.color[v] <= 1))
    assert np.allclose(np.linalg.norm(g.rotation[v], axis=-1), 1.0)


def test_static_mask_freezes_appearance():
    rng = np.random.default_rng(11)
    static = np.zeros((4, 5), bool)
    static[1:3, 1:4] = True
    model = pca_fit(frames(rng, 6), 5, static_mask=static)
    g0, g1 = gem_reconstruct(model, np.zeros(5)), gem_reconstruct(model, rng.normal(size=5))
    for name in ("color", "opacity", "scale"):
        assert np.array_equal(getattr(g0, name)[static], getattr(g1, name)[static])
    assert not np.allclose(g0.position[static], g1.position[static])


def test_fit_validation():
    rng = np.random.default_rng(12)
    fs = frames(rng, 3)
    with pytest.raises(ValueError):
        pca_fit(fs, 3)
    with pytest.raises(ValueError):
        pca_fit(fs[:1], 1)
    with pytest.raises(ValueError):
        pca_fit([fs[0], fs[0].copy()], 1)
    other = random_texture(rng, valid=np.eye(4, 5, dtype=bool))
    with pytest.raises(LayoutMismatchError):
        pca_fit([fs[0], other], 1)


def test_refine_mean_is_a_fixed_point_inside_the_clamps():
    rng = np.random.default_rng(13)
    fs = frames(rng, 5)
    model = pca_fit(fs, 4)
    refined = refine_mean(model, fs)
    assert np.allclose(refined.mean, model.mean, atol=1e-10)


def test_model_file_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    valid = np.ones((4, 5), bool)
    valid[0, 0] = False
    model = pca_fit(frames(rng, 5, valid), 3, static_mask=np.eye(4, 5, dtype=bool))
    save_model(tmp_path / "m.gem", model)
    back = load_model(tmp_path / "m.gem")
    assert np.array_equal(back.valid, model.valid) and np.array_equal(back.static_mask, model.static_mask)
    assert np.array_equal(back.mean, model.mean.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.basis, model.basis.astype(np.float32).astype(np.float64))
    assert np.allclose(back.class_scale, model.class_scale, rtol=0, atol=0)


# ---------------------------------------------------------------------------
# editing
# ---------------------------------------------------------------------------

def test_interpolation_endpoints_and_midpoint():
    rng = np.random.default_rng(15)
    a, b = random_texture(rng), random_texture(rng)
    assert np.array_equal(interpolate(a, b, 0.0).as_array(), a.as_array())
    assert np.array_equal(interpolate(a, b, 1.0).as_array(), b.as_array())
    assert np.allclose(interpolate(a, b, 0.5).position, (a.position + b.position) / 2, atol=1e-15)
    with pytest.raises(ValueError):
        interpolate(a, b, 1.5)


def test_quaternion_midpoint_matches_slerp():
    rng = np.random.default_rng(16)
    a, b = random_texture(rng, 1, 1), random_texture(rng, 1, 1)
    a.rotation[:] = [1.0, 0, 0, 0]
    b.rotation[:] = axis_angle_to_quat([0, 0, 1], np.pi / 2)
    mid = interpolate(a, b, 0.5).rotation[0, 0]
    assert np.abs(mid - axis_angle_to_quat([0, 0, 1], np.pi / 4)).max() < 1e-6
    b.rotation[:] = -b.rotation  # other hemisphere, same rotation
    mid2 = interpolate(a, b, 0.5).rotation[0, 0]
    assert np.abs(mid2 - mid).max() < 1e-12


def test_region_swap_hard_and_trivial_masks():
    rng = np.random.default_rng(17)
    src, tgt = random_texture(rng, 6, 6), random_texture(rng, 6, 6)
    assert np.array_equal(region_swap(src, tgt, np.zeros((6, 6), bool)).as_array(), src.as_array())
    assert np.array_equal(region_swap(src, tgt, np.ones((6, 6), bool)).as_array(), tgt.as_array())
    mask = rng.random((6, 6)) < 0.4
    out = region_swap(src, tgt, mask).as_array()
    for r in range(6):
        for c in range(6):
            assert np.array_equal(out[r, c], (tgt if mask[r, c] else src).as_array()[r, c])


def test_feathered_swap_band():
    rng = np.random.default_rng(18)
    src, tgt = random_texture(rng, 1, 8), random_texture(rng, 1, 8)
    mask = np.zeros((1, 8), bool)
    mask[0, :2] = True
    w = swap_weights(mask, 3.0)
    # distances to the mask: 1, 2, 3 texels -> smoothstep(2/3), smoothstep(1/3), 0
    assert np.allclose(w[0], [1, 1, 20 / 27, 7 / 27, 0, 0, 0, 0], atol=1e-15)
    out = region_swap(src, tgt, mask, feather=3.0)
    assert np.allclose(out.position[0, 2], (7 / 27) * src.position[0, 2] + (20 / 27) * tgt.position[0, 2])
    assert np.array_equal(out.position[0, 5:], src.position[0, 5:])


def test_expression_transfer_identities():
    rng = np.random.default_rng(19)
    src, n, e = random_texture(rng), random_texture(rng), random_texture(rng)
    same = expression_transfer(src, n, n)
    assert np.abs(same.as_array() - src.as_array()).max() < 1e-12
    assert np.abs(expression_transfer(n, n, e).as_array() - e.as_array()).max() < 1e-12


def test_expression_transfer_inverse():
    rng = np.random.default_rng(20)
    src, n = random_texture(rng), random_texture(rng)
    e = n.copy()
    e.position += 0.01 * rng.normal(size=e.position.shape)
    e.color = np.clip(e.color + 0.05 * rng.normal(size=e.color.shape), 0.1, 0.9)
    e.opacity = np.clip(e.opacity + 0.05 * rng.normal(size=e.opacity.shape), 0.1, 0.9)
    e.scale *= np.exp(0.1 * rng.normal(size=e.scale.shape))
    e.rotation = quat_multiply(e.rotation, axis_angle_to_quat([0.0, 1.0, 0.0], 0.2))
    fwd = expression_transfer(src, n, e)
    back = expression_transfer(fwd, e, n)
    assert np.abs(back.as_array() - src.as_array()).max() < 1e-9


def test_editing_layout_checks():
    rng = np.random.default_rng(21)
    a = random_texture(rng)
    b = random_texture(rng, valid=np.eye(4, 5, dtype=bool))
    with pytest.raises(LayoutMismatchError):
        interpolate(a, b, 0.5)
    with pytest.raises(LayoutMismatchError):
        region_swap(a, a, np.zeros((3, 3), bool))


def test_constant_attribute_class_keeps_unit_scale():
    rng = np.random.default_rng(21)
    fs = frames(rng, 5)
    for f in fs:
        f.color[:] = 0.3  # identical in every frame
        f.opacity[:] = 0.7
    model = pca_fit(fs, 4)
    assert model.class_scale[0] == 1.0 and model.class_scale[1] == 1.0
    assert reconstruction_errors(model, fs).max() < 1e-10


def test_zero_residual_transfer_is_bit_exact():
    rng = np.random.default_rng(22)
    src, n = random_texture(rng, 8, 8), random_texture(rng, 8, 8)
    assert np.array_equal(expression_transfer(src, n, n).as_array(), src.as_array())
