import math

import numpy as np
import pytest

from ladder.decoder import DecoderTrace, GKind, decoder_pass, init_decoder
from ladder.encoder import CleanTrace, clean_pass, corrupted_pass, init_encoder, make_layers
from ladder.numerics import make_rng
from ladder.objective import denoising_cost, supervised_cost, total_cost


def test_supervised_examples():
    assert supervised_cost(np.array([[0.0, 1.0]]), [1], [True]) == 0.0
    assert supervised_cost(np.full((3, 10), 0.1), [0, 4, 9], [True] * 3) == pytest.approx(math.log(10), abs=1e-12)
    y = np.array([[0.5, 0.5], [0.25, 0.75]])
    assert supervised_cost(y, [0, 0], [True, True]) == pytest.approx(1.039721, abs=1e-6)


def test_supervised_ignores_unlabeled_and_floors_log():
    y = np.array([[1.0, 0.0], [0.3, 0.7]])
    assert supervised_cost(y, [0, -1], [True, False]) == 0.0
    assert supervised_cost(y, [0, 1], [False, False]) == 0.0
    assert supervised_cost(y, [1, -1], [True, False]) == pytest.approx(-math.log(1e-15))
    with pytest.raises(ValueError):
        supervised_cost(y, [2, 0], [True, False])


def one_layer(z, z_hat_bn):
    z = np.asarray(z, dtype=float)
    clean = CleanTrace([None], [None], [z], [z])
    dec = DecoderTrace([None], [None], [None], [z_hat_bn], [np.asarray(z_hat_bn, dtype=float)])
    return clean, dec


def test_denoising_examples():
    clean, dec = one_layer([[1.0, 0.0]], [[0.0, 0.0]])
    assert denoising_cost(clean, dec, [2.0]) == ([1.0], 1.0)
    assert denoising_cost(clean, dec, [0.0])[1] == 0.0
    clean, dec = one_layer([[1.0, 2.0]], [[1.0, 2.0]])
    assert denoising_cost(clean, dec, [5.0])[1] == 0.0
    with pytest.raises(ValueError):
        denoising_cost(clean, dec, [-1.0])


def test_total_cost_examples():
    assert total_cost(0.0, [0.0]).total == 0.0
    c = total_cost(2.3, [0.7])
    assert c.total == pytest.approx(3.0, abs=1e-12)
    c = total_cost(1.5, [0.0, 0.0, 0.25])
    assert c.total == 1.75 and c.c_denoise == 0.25


def traces(seed=0, widths=(3, 6, 4), B=8):
    layers = make_layers(widths, [0.3] * 3, [1.0] * 3)
    enc = init_encoder(layers, make_rng(seed))
    dec = init_decoder(list(widths), GKind.PROPOSED, make_rng(seed + 1))
    dec.g = [g + 0.2 * make_rng(seed + 2).standard_normal(g.shape) for g in dec.g]
    x = make_rng(seed + 3).standard_normal((B, widths[0]))
    noise = corrupted_pass(enc, x, make_rng(seed + 4)).noise
    return enc, dec, x, noise


def run(enc, dec, x, noise):
    clean = clean_pass(enc, x)
    return clean, decoder_pass(dec, corrupted_pass(enc, x, noise=noise), clean)


def test_denoising_cost_row_permutation_invariant():
    enc, dec, x, noise = traces()
    perm = make_rng(9).permutation(x.shape[0])
    a = denoising_cost(*run(enc, dec, x, noise), [1, 1, 1])
    b = denoising_cost(*run(enc, dec, x[perm], [n[perm] for n in noise]), [1, 1, 1])
    assert np.allclose(a[0], b[0], atol=1e-12)


def test_denoising_cost_linear_in_lambda():
    enc, dec, x, noise = traces()
    c, d = run(enc, dec, x, noise)
    base, _ = denoising_cost(c, d, [1.0, 1.0, 1.0])
    doubled, _ = denoising_cost(c, d, [1.0, 2.0, 1.0])
    assert doubled[1] == 2 * base[1] and doubled[0] == base[0] and doubled[2] == base[2]
    assert all(v >= 0 for v in base)


def test_denoising_cost_duplicated_batch():
    enc, dec, x, noise = traces()
    a, _ = denoising_cost(*run(enc, dec, x, noise), [1, 1, 1])
    b, _ = denoising_cost(*run(enc, dec, np.vstack([x, x]), [np.vstack([n, n]) for n in noise]), [1, 1, 1])
    assert np.allclose(a, b, atol=1e-9)


def test_supervised_zero_iff_confident():
    y = np.array([[1 - 1e-16, 1e-16]])
    assert supervised_cost(y, [0], [True]) == pytest.approx(0.0, abs=1e-15)
    assert supervised_cost(np.array([[0.9, 0.1]]), [0], [True]) > 0
