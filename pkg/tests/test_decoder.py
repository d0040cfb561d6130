import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ladder.batchnorm import BatchStats, batch_statistics
from ladder.decoder import (
    G_PARAM_COUNT,
    GKind,
    decoder_pass,
    g_apply,
    g_backward,
    g_identity_params,
    gamma_subset,
    init_decoder,
    param_count,
)
from ladder.encoder import CleanTrace, clean_pass, corrupted_pass, init_encoder, make_layers
from ladder.numerics import make_rng
from ladder.oracle import posterior_mean_gaussian

finite = st.floats(-5, 5)


def unit(kind, values):
    return np.asarray(values, dtype=np.float64).reshape(G_PARAM_COUNT[kind], 1)


def test_param_counts():
    assert G_PARAM_COUNT == {
        GKind.PROPOSED: 10, GKind.MINI_MLP: 9, GKind.NO_AUGMENTED: 7, GKind.LINEAR: 4, GKind.ADDITIVE_U: 9,
    }


@pytest.mark.parametrize("kind", list(GKind))
def test_identity_init_copies_z(kind):
    rng = make_rng(0)
    z, u = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    assert np.array_equal(g_apply(kind, z, u, g_identity_params(kind, 3)), z)


def test_proposed_constant_and_gaussian_examples():
    p = np.zeros(10)
    p[4] = 1.7
    assert g_apply(GKind.PROPOSED, np.array([[3.0]]), np.array([[-2.0]]), unit(GKind.PROPOSED, p))[0, 0] == 1.7
    p = np.zeros(10)
    p[9] = 0.5
    out = g_apply(GKind.PROPOSED, np.array([[2.0]]), np.array([[0.4]]), unit(GKind.PROPOSED, p))[0, 0]
    assert out == pytest.approx(1.0, abs=1e-15)
    assert out == pytest.approx(float(posterior_mean_gaussian(2.0, 0.0, 1.0, 1.0)), abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=10, max_size=10), finite, finite, finite, st.floats(0, 1))
def test_proposed_is_affine_in_z(a, z1, z2, u, alpha):
    p = unit(GKind.PROPOSED, a)
    g = lambda z: g_apply(GKind.PROPOSED, np.array([[z]]), np.array([[u]]), p)[0, 0]  # noqa: E731
    lhs = g(alpha * z1 + (1 - alpha) * z2)
    rhs = alpha * g(z1) + (1 - alpha) * g(z2)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs), abs(g(z1)), abs(g(z2)))


def test_proposed_represents_any_affine_map():
    rng = make_rng(1)
    for _ in range(100):
        v, k = rng.uniform(-3, 3), rng.uniform(-3, 3)
        p = np.zeros(10)
        p[9] = v
        p[4] = k / (1 - v)
        z = rng.standard_normal((4, 1))
        out = g_apply(GKind.PROPOSED, z, rng.standard_normal((4, 1)), unit(GKind.PROPOSED, p))
        assert np.allclose(out, v * z + k, atol=1e-10 * max(1, abs(k / (1 - v))))


def test_linear_g_identity():
    z, u = make_rng(2).standard_normal((2, 4, 1))
    assert np.array_equal(g_apply(GKind.LINEAR, z, u, unit(GKind.LINEAR, [0, 1, 0, 0])), z)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=9, max_size=9), finite, finite, finite, finite)
def test_additive_u_separates(a, z1, z2, u1, u2):
    p = unit(GKind.ADDITIVE_U, a)
    g = lambda z, u: g_apply(GKind.ADDITIVE_U, np.array([[z]]), np.array([[u]]), p)[0, 0]  # noqa: E731
    d1, d2 = g(z1, u1) - g(z1, u2), g(z2, u1) - g(z2, u2)
    assert abs(d1 - d2) <= 1e-12 * max(1.0, abs(g(z1, u1)), abs(g(z2, u1)))


@pytest.mark.parametrize("kind", list(GKind))
def test_g_backward_matches_finite_differences(kind):
    rng = make_rng(3)
    z, u = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    p = rng.standard_normal((G_PARAM_COUNT[kind], 2))
    w = rng.standard_normal((4, 2))
    f = lambda z_, u_, p_: float(np.sum(w * g_apply(kind, z_, u_, p_)))  # noqa: E731
    dz, du, dp = g_backward(kind, z, u, p, w)
    h = 1e-6
    for arr, grad, which in ((z, dz, 0), (u, du, 1), (p, dp, 2)):
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            args = [z.copy(), u.copy(), p.copy()]
            args[which][i] += h
            up = f(*args)
            args[which][i] -= 2 * h
            num[i] = (up - f(*args)) / (2 * h)
        assert np.allclose(grad, num, atol=1e-7)


def setup(widths=(3, 5, 4, 2), noise=0.3, seed=0, kind=GKind.PROPOSED):
    layers = make_layers(widths, [noise] * len(widths), [1.0] * len(widths))
    enc = init_encoder(layers, make_rng(seed))
    dec = init_decoder(list(widths), kind, make_rng(seed + 1))
    x = make_rng(seed + 2).standard_normal((6, widths[0]))
    return enc, dec, x


def test_v_shapes_mirror_w():
    enc, dec, _ = setup()
    assert [v.shape for v in dec.V] == [w.T.shape for w in enc.W]


def test_identity_g_zero_noise_reconstructs_clean():
    enc, dec, x = setup(noise=0.0)
    clean = clean_pass(enc, x)
    t = decoder_pass(dec, corrupted_pass(enc, x, make_rng(1)), clean)
    for l in range(4):
        assert np.array_equal(t.z_hat[l], clean.z[l])


def test_z_hat_bn_uses_clean_statistics():
    enc, dec, x = setup()
    clean = clean_pass(enc, x)
    t = decoder_pass(dec, corrupted_pass(enc, x, make_rng(2)), clean)
    assert np.array_equal(t.z_hat_bn[0], t.z_hat[0])
    for l in range(1, 4):
        assert np.array_equal(t.z_hat_bn[l], (t.z_hat[l] - clean.stats[l].mean) / clean.stats[l].std)


def test_z_hat_bn_hand_case():
    stats = BatchStats(np.array([2.0]), np.array([1.0]))
    assert ((np.array([[3.0]]) - stats.mean) / stats.std)[0, 0] == 1.0


def test_forced_projection_reproduces_clean_z():
    # if the reconstruction equals the clean pre-activation, its normalized form is z itself
    enc, _, x = setup()
    clean = clean_pass(enc, x)
    for l in range(1, 4):
        st_ = clean.stats[l]
        assert np.array_equal((clean.z_pre[l] - st_.mean) / st_.std, clean.z[l])


def test_u_top_modes():
    enc, dec, x = setup()
    clean = clean_pass(enc, x)
    cor = corrupted_pass(enc, x, make_rng(3))
    bn = decoder_pass(dec, cor, clean)
    raw = decoder_pass(dec, cor, clean, "raw")
    top = bn.u_pre[3]
    s = batch_statistics(top)
    assert np.array_equal(bn.u[3], (top - s.mean) / s.std)
    assert np.array_equal(raw.u[3], cor.h[3])
    with pytest.raises(ValueError):
        decoder_pass(dec, cor, clean, "other")


def test_gamma_subset():
    enc, dec, x = setup(widths=(3, 5, 4, 10))
    sub = gamma_subset(dec)
    assert sub.top_only and param_count(sub) == 10 * 10
    clean = clean_pass(enc, x)
    cor = corrupted_pass(enc, x, make_rng(4))
    full, part = decoder_pass(dec, cor, clean), decoder_pass(sub, cor, clean)
    assert np.array_equal(full.z_hat[3], part.z_hat[3])
    assert all(v is None for v in part.z_hat[:3])


def test_decoder_scaling_identity_on_random_reconstructions():
    rng = make_rng(5)
    enc, _, x = setup()
    clean = clean_pass(enc, x)
    for l in range(1, 4):
        z_hat = rng.standard_normal(clean.z_pre[l].shape)
        st_ = clean.stats[l]
        lhs = np.sum((clean.z_pre[l] - z_hat) ** 2 / st_.std**2)
        rhs = np.sum((clean.z[l] - (z_hat - st_.mean) / st_.std) ** 2)
        assert abs(lhs - rhs) <= 1e-9 * max(1, lhs)


def test_shape_mismatch_rejected():
    enc, dec, x = setup()
    clean = clean_pass(enc, x)
    short = CleanTrace(clean.z_pre[:3], clean.stats[:3], clean.z[:3], clean.h[:3])
    with pytest.raises(ValueError):
        decoder_pass(dec, corrupted_pass(enc, x, make_rng(0)), short)
