import numpy as np
import pytest

from fissureseg import autodiff as ad
from fissureseg import gradcheck as gc
from fissureseg.errors import ParameterError
from fissureseg.registration import (ConvOperator, DemonsOperator, conv3d, conv_register, demons_register,
                                     gaussian_kernel, gaussian_smooth, operator_from_config, warp)

from oracles import demons_oracle, smooth_loop, warp_scipy


def _field(op, moving, fixed):
    tape = ad.Tape()
    return op(tape.constant(moving[None]), fixed).value


def test_gaussian_constant_field():
    f = np.full((2, 4, 5, 3), 2.5)
    out = gaussian_smooth(ad.Tape().constant(f), 1.0).value
    np.testing.assert_allclose(out, f, rtol=1e-15)


def test_gaussian_impulse_bump():
    # 13 voxels: every window that reaches the impulse lies inside the volume
    f = np.zeros((1, 13, 13, 13))
    f[0, 6, 6, 6] = 1.0
    out = gaussian_smooth(ad.Tape().constant(f), 1.0).value[0]
    k = np.exp(-0.5 * np.arange(-3, 4) ** 2)
    k /= k.sum()
    bump = np.zeros(13)
    bump[3:10] = k
    np.testing.assert_allclose(out, np.einsum("i,j,k->ijk", bump, bump, bump), atol=1e-16)
    assert abs(out.sum() - 1.0) < 1e-14


def test_gaussian_matches_loop_and_channels_independent(rng):
    f = rng.standard_normal((3, 5, 4, 6))
    out = gaussian_smooth(ad.Tape().constant(f), 0.8).value
    np.testing.assert_allclose(out, smooth_loop(f, 0.8), rtol=1e-12, atol=1e-14)
    single = gaussian_smooth(ad.Tape().constant(f[1:2]), 0.8).value
    np.testing.assert_array_equal(out[1:2], single)


def test_gaussian_rejects_bad_sigma():
    with pytest.raises(ParameterError):
        gaussian_smooth(ad.Tape().constant(np.zeros((1, 2, 2, 2))), 0.0)
    assert gaussian_kernel(1.0).size == 7


def test_warp_matches_scipy(rng):
    img = rng.random((5, 6, 4))
    disp = rng.uniform(-2.5, 2.5, size=(3, 5, 6, 4))
    tape = ad.Tape()
    out = warp(tape.constant(img[None]), tape.constant(disp)).value[0]
    np.testing.assert_allclose(out, warp_scipy(img, disp), rtol=1e-12, atol=1e-14)


def test_demons_identity_is_exactly_zero(rng):
    a = rng.random((6, 5, 4))
    for k in (1, 2, 3, 5):
        assert np.all(_field(DemonsOperator(k, 1.0), a, a) == 0.0)


def test_demons_constant_fixed_gives_zero(rng):
    assert np.all(_field(DemonsOperator(), rng.random((4, 4, 4)), np.full((4, 4, 4), 0.3)) == 0.0)


def test_demons_ramp_shift_matches_oracle():
    x = np.arange(8, dtype=float)[:, None, None] * np.ones((8, 4, 4))
    fixed = x / 8
    moving = (x - 1) / 8
    u = _field(DemonsOperator(3, 1.0), moving, fixed)
    np.testing.assert_allclose(u, demons_oracle(moving, fixed, 3, 1.0), rtol=1e-10, atol=1e-13)
    # sampling the moving image at x - u with u_x < 0 looks one voxel ahead, toward the fixed ramp
    assert np.all(u[0, 1:-1] < 0)
    assert np.allclose(u[1:], 0.0)


def test_demons_random_matches_oracle(rng):
    for _ in range(3):
        m, f = rng.random((6, 5, 7)), rng.random((6, 5, 7))
        np.testing.assert_allclose(_field(DemonsOperator(3, 1.2), m, f), demons_oracle(m, f, 3, 1.2),
                                   rtol=1e-9, atol=1e-12)


def test_demons_force_bound(rng):
    m = rng.uniform(-100, 100, size=(6, 6, 6))
    f = rng.uniform(-100, 100, size=(6, 6, 6))
    _, forces = demons_oracle(m, f, 4, 1.0, return_forces=True)
    prev = np.zeros((3, 6, 6, 6))
    for k, force in enumerate(forces, start=1):
        assert np.sqrt((force ** 2).sum(axis=0)).max() <= 500
        u = _field(DemonsOperator(k, 1.0), m, f)
        assert np.abs(u - prev).max() <= 500
        prev = u


def test_demons_shape_mismatch():
    with pytest.raises(ParameterError):
        demons_register(ad.Tape().constant(np.zeros((1, 3, 3, 3))), np.zeros((3, 3, 4)))


def test_conv3d_matches_loop(rng):
    x = rng.standard_normal((2, 4, 3, 5))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    tape = ad.Tape()
    out = conv3d(tape.constant(x), tape.constant(w), tape.constant(b)).value
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for o in range(3):
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    ref[o, i, j, k] = (w[o] * xp[:, i:i + 3, j:j + 3, k:k + 3]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-13)


def test_conv3d_gradients(rng):
    x = rng.standard_normal((2, 3, 3, 3))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    b = rng.standard_normal(2)
    g = rng.standard_normal((2, 3, 3, 3))

    def wrt_x(n):
        t = n.tape
        return ad.sum_all(ad.mul(conv3d(n, t.constant(w), t.constant(b)), t.constant(g)))

    def wrt_w(n):
        t = n.tape
        return ad.sum_all(ad.mul(conv3d(t.constant(x), n, t.constant(b)), t.constant(g)))

    assert gc.check(wrt_x, x).max_rel_error < gc.REL_TOL
    assert gc.check(wrt_w, w).max_rel_error < gc.REL_TOL


def test_conv_operator_deterministic_and_nonzero_on_identity(rng):
    a = rng.random((4, 5, 3))
    f1 = _field(ConvOperator(seed=3), a, a)
    f2 = _field(ConvOperator(seed=3), a, a)
    assert f1.shape == (3, 4, 5, 3)
    np.testing.assert_array_equal(f1, f2)
    assert np.abs(f1).max() > 0
    assert not np.array_equal(f1, _field(ConvOperator(seed=4), a, a))
    np.testing.assert_array_equal(conv_register(ad.Tape().constant(a[None]), a, seed=3).value, f1)


@pytest.mark.parametrize("op", [DemonsOperator(3, 1.0), ConvOperator(seed=5)], ids=["demons", "conv"])
def test_field_l1_gradient_6cubed(op):
    rng = np.random.default_rng(21)
    fixed = rng.random((6, 6, 6))
    m = rng.random((1, 6, 6, 6))
    res = gc.check(lambda n: ad.l1_norm(op(n, fixed)), m)
    assert res.max_rel_error < gc.REL_TOL


def test_operator_config_round_trip():
    for op in (DemonsOperator(4, 0.7), ConvOperator(seed=9)):
        assert operator_from_config(op.to_config()) == op
    with pytest.raises(ParameterError):
        operator_from_config({"kind": "voxelmorph"})
    with pytest.raises(ParameterError):
        operator_from_config({"kind": "demons", "seed": 1})
    with pytest.raises(ParameterError):
        DemonsOperator(0, 1.0)
