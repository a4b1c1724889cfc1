import subprocess
import sys

import numpy as np
import pytest

from conftest import make_random_bundle
from fastsep.linalg import VAR_FLOOR, weighted_cov
from fastsep.separation import (
    DemixingStack,
    back_project,
    demix,
    demix_one,
    fmvae_separate,
    ilrma_separate,
    ip_update,
    neg_log_likelihood,
    update_gain,
)


def _random_complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _gaussian_sources(rng, variances):
    """variances: (J, F, N) -> complex samples with those variances."""
    noise = _random_complex(rng, variances.shape) / np.sqrt(2.0)
    return np.sqrt(variances) * noise


def _block_variances(n_bins, n_frames, period=40):
    """Two complementary on/off variance profiles, shared across bins."""
    gate = (np.arange(n_frames) % period) < (period // 2)
    v1 = np.where(gate, 4.0, 0.04)
    v2 = np.where(gate, 0.04, 4.0)
    return np.stack(
        [np.tile(v1, (n_bins, 1)), np.tile(v2, (n_bins, 1))]
    )


def naive_nll(matrices, variances, mixture):
    n_bins, n_chan, n_frames = mixture.shape
    total = 0.0
    for f in range(n_bins):
        total -= 2.0 * n_frames * np.log(abs(np.linalg.det(matrices[f].conj().T)))
        for n in range(n_frames):
            for j in range(n_chan):
                y = matrices[f][:, j].conj() @ mixture[f, :, n]
                total += np.log(variances[j, f, n]) + abs(y) ** 2 / variances[j, f, n]
    return total


def test_nll_single_channel_plugin():
    rng = np.random.default_rng(0)
    x = _random_complex(rng, (3, 1, 5))
    power = np.abs(x[:, 0, :]) ** 2
    stack = DemixingStack.identity(3, 1)
    value = neg_log_likelihood(stack, power[None], x)
    assert value == pytest.approx(float(np.sum(np.log(power) + 1.0)), rel=1e-12)


def test_nll_scaling_shift_matches_closed_form():
    rng = np.random.default_rng(1)
    x = _random_complex(rng, (4, 2, 6))
    v = rng.uniform(0.5, 2.0, (2, 4, 6))
    w = np.stack([np.linalg.qr(_random_complex(rng, (2, 2)))[0] for _ in range(4)])
    alpha = 1.9
    base = neg_log_likelihood(w, v, x)
    scaled = neg_log_likelihood(w, alpha**2 * v, alpha * x)
    expected_shift = v.size * np.log(alpha**2)
    assert scaled - base == pytest.approx(expected_shift, rel=1e-10)


def test_nll_matches_naive_loop():
    rng = np.random.default_rng(2)
    x = _random_complex(rng, (3, 2, 4))
    v = rng.uniform(0.2, 3.0, (2, 3, 4))
    w = np.stack([_random_complex(rng, (2, 2)) for _ in range(3)])
    fast = neg_log_likelihood(w, v, x)
    slow = naive_nll(w, v, x)
    assert fast == pytest.approx(slow, rel=1e-10)


def test_ip_update_enforces_normalization():
    rng = np.random.default_rng(3)
    n_bins, n_frames = 6, 50
    variances = _block_variances(n_bins, n_frames)
    sources = _gaussian_sources(rng, variances)
    mixing = np.array([[1.0, 0.4], [0.7, 1.0]], dtype=complex)
    mixture = np.einsum("ij,jfn->fin", mixing, sources)
    stack = DemixingStack.identity(n_bins, 2)
    for j in range(2):
        ip_update(stack, mixture, variances[j], j)
        for f in range(n_bins):
            cov = weighted_cov(mixture[f], variances[j, f])
            w = stack.matrices[f][:, j]
            assert abs((w.conj() @ cov @ w).real - 1.0) < 1e-8


def test_ip_update_never_increases_nll():
    rng = np.random.default_rng(4)
    n_bins, n_frames = 5, 60
    variances = _block_variances(n_bins, n_frames)
    sources = _gaussian_sources(rng, variances)
    mixing = _random_complex(rng, (2, 2)) + 2.0 * np.eye(2)
    mixture = np.einsum("ij,jfn->fin", mixing, sources)
    stack = DemixingStack.identity(n_bins, 2)
    before = neg_log_likelihood(stack, variances, mixture)
    for _ in range(10):
        for j in range(2):
            ip_update(stack, mixture, variances[j], j)
            after = neg_log_likelihood(stack, variances, mixture)
            assert after <= before + 1e-8 * abs(before)
            before = after


def test_ip_update_is_fixed_point_at_convergence():
    rng = np.random.default_rng(5)
    n_bins, n_frames = 4, 200
    variances = _block_variances(n_bins, n_frames)
    sources = _gaussian_sources(rng, variances)
    mixing = np.array([[1.0, -0.5], [0.3, 1.0]], dtype=complex)
    mixture = np.einsum("ij,jfn->fin", mixing, sources)
    stack = DemixingStack.identity(n_bins, 2)
    for _ in range(200):
        for j in range(2):
            ip_update(stack, mixture, variances[j], j)
    settled = neg_log_likelihood(stack, variances, mixture)
    for j in range(2):
        ip_update(stack, mixture, variances[j], j)
    final = neg_log_likelihood(stack, variances, mixture)
    assert abs(final - settled) < 1e-9 * abs(settled)


def test_ip_converges_to_scaled_permutation_with_oracle_variances():
    rng = np.random.default_rng(6)
    n_bins, n_frames = 8, 800
    variances = _block_variances(n_bins, n_frames)
    sources = _gaussian_sources(rng, variances)
    mixing = np.array([[1.0, 0.55], [-0.6, 1.0]], dtype=complex)
    mixture = np.einsum("ij,jfn->fin", mixing, sources)
    stack = DemixingStack.identity(n_bins, 2)
    for _ in range(30):
        for j in range(2):
            ip_update(stack, mixture, variances[j], j)
    # W^H A should be a scaled permutation per frequency: off-diagonal power
    # at least 30 dB below the diagonal under the best assignment.
    product = np.einsum("fij,jk->fik", stack.matrices.conj().transpose(0, 2, 1), mixing)
    power = np.abs(product) ** 2
    for f in range(n_bins):
        straight = power[f, 0, 0] + power[f, 1, 1]
        swapped = power[f, 0, 1] + power[f, 1, 0]
        diag = max(straight, swapped)
        off = power[f].sum() - diag
        assert off / diag < 1e-3


def test_update_gain_trivial_and_homogeneous():
    rng = np.random.default_rng(7)
    power = rng.uniform(0.1, 2.0, (4, 3))
    assert update_gain(power, power) == pytest.approx(1.0, rel=1e-12)
    sigma = rng.uniform(0.1, 2.0, (4, 3))
    alpha = 1.7
    assert update_gain(alpha**2 * power, sigma) == pytest.approx(
        alpha**2 * update_gain(power, sigma), rel=1e-12
    )


def test_update_gain_matches_mean_of_ratios_oracle():
    rng = np.random.default_rng(8)
    power = rng.uniform(0.1, 2.0, (4, 3))
    sigma = rng.uniform(0.2, 1.5, (4, 3))
    expected = 0.0
    for f in range(4):
        for n in range(3):
            expected += power[f, n] / sigma[f, n]
    expected /= 12.0
    assert update_gain(power, sigma) == pytest.approx(expected, rel=1e-12)


def test_update_gain_is_stationary_point_by_finite_difference():
    rng = np.random.default_rng(9)
    for _ in range(5):
        power = rng.uniform(0.5, 2.0, (4, 3))
        sigma = rng.uniform(0.5, 2.0, (4, 3))
        gain = update_gain(power, sigma)

        def nll_of_gain(g):
            v = g * sigma
            return float(np.sum(np.log(v) + power / v))

        h = 1e-4 * gain
        derivative = (nll_of_gain(gain + h) - nll_of_gain(gain - h)) / (2 * h)
        assert abs(derivative) < 1e-6


def test_ilrma_nll_non_increasing():
    rng = np.random.default_rng(10)
    variances = _block_variances(16, 80)
    sources = _gaussian_sources(rng, variances)
    mixing = np.array([[1.0, 0.5], [0.45, 1.0]], dtype=complex)
    mixture = np.einsum("ij,jfn->fin", mixing, sources)
    _, _, trace = ilrma_separate(mixture, 2, 40, seed=0)
    nll = trace.nll_curve
    diffs = np.diff(nll)
    assert np.all(diffs <= 1e-8 * np.abs(nll[:-1]))


def test_ilrma_rejects_wrong_source_count():
    with pytest.raises(ValueError, match="sources == channels"):
        ilrma_separate(np.zeros((4, 2, 10), dtype=complex), 3, 5)


def test_ilrma_trace_is_deterministic():
    rng = np.random.default_rng(11)
    variances = _block_variances(8, 40)
    mixture = np.einsum(
        "ij,jfn->fin",
        np.array([[1.0, 0.3], [0.2, 1.0]], dtype=complex),
        _gaussian_sources(rng, variances),
    )
    _, _, t1 = ilrma_separate(mixture, 2, 10, seed=3)
    _, _, t2 = ilrma_separate(mixture, 2, 10, seed=3)
    np.testing.assert_array_equal(t1.nll_curve, t2.nll_curve)
    assert t1.to_jsonl() == t2.to_jsonl()


def test_fmvae_runs_records_posteriors_and_is_deterministic():
    bundle = make_random_bundle(freq_bins=17, class_count=3, latent_channels=4)
    rng = np.random.default_rng(12)
    variances = _block_variances(17, 30)
    mixture = np.einsum(
        "ij,jfn->fin",
        np.array([[1.0, 0.4], [0.5, 1.0]], dtype=complex),
        _gaussian_sources(rng, variances),
    )
    init, _, _ = ilrma_separate(mixture, 2, 5, seed=0)
    stack1, states1, trace1 = fmvae_separate(mixture, bundle, init, 4)
    stack2, states2, trace2 = fmvae_separate(mixture, bundle, init, 4)

    assert len(trace1.records) == 4
    for record in trace1.records:
        assert len(record.class_posteriors) == 2
        for post in record.class_posteriors:
            assert abs(sum(post) - 1.0) < 1e-6
    np.testing.assert_array_equal(stack1.matrices, stack2.matrices)
    assert trace1.to_jsonl() == trace2.to_jsonl()
    for s1, s2 in zip(states1, states2):
        np.testing.assert_array_equal(s1.variance, s2.variance)
        assert s1.variance.min() >= VAR_FLOOR
        np.testing.assert_allclose(
            s1.variance, np.maximum(s1.gain * s1.variance / s1.gain, VAR_FLOOR)
        )


def test_fmvae_validates_bins_and_class_count():
    bundle = make_random_bundle(freq_bins=17, class_count=3)
    mixture = np.zeros((16, 2, 10), dtype=complex)
    init = DemixingStack.identity(16, 2)
    with pytest.raises(ValueError, match="bins"):
        fmvae_separate(mixture, bundle, init, 2)
    mixture = np.ones((17, 2, 10), dtype=complex)
    init = DemixingStack.identity(17, 2)
    with pytest.raises(ValueError, match="classes"):
        fmvae_separate(mixture, bundle, init, 2, expected_classes=4)


def test_back_projection_reconstructs_reference_channel():
    rng = np.random.default_rng(13)
    n_bins = 6
    mixture = _random_complex(rng, (n_bins, 2, 9))
    matrices = np.stack(
        [_random_complex(rng, (2, 2)) + 2.0 * np.eye(2) for _ in range(n_bins)]
    )
    for ref in (0, 1):
        stack = DemixingStack(matrices.copy(), reference_channel=ref)
        separated = demix(stack.matrices, mixture)
        projected = back_project(separated, stack, mixture)
        total = projected.sum(axis=0)
        assert np.max(np.abs(total - mixture[:, ref, :])) < 1e-8


def test_demix_one_matches_demix_column():
    rng = np.random.default_rng(14)
    mixture = _random_complex(rng, (5, 3, 8))
    matrices = np.stack([_random_complex(rng, (3, 3)) for _ in range(5)])
    full = demix(matrices, mixture)
    for j in range(3):
        np.testing.assert_allclose(demix_one(matrices, mixture, j), full[:, j, :])


def test_trace_jsonl_schema_and_timing_suppression():
    rng = np.random.default_rng(15)
    variances = _block_variances(8, 30)
    mixture = np.einsum(
        "ij,jfn->fin",
        np.array([[1.0, 0.3], [0.4, 1.0]], dtype=complex),
        _gaussian_sources(rng, variances),
    )
    _, _, trace = ilrma_separate(mixture, 2, 3, seed=0)
    import json

    lines = trace.to_jsonl().strip().splitlines()
    assert len(lines) == 3
    for i, line in enumerate(lines):
        payload = json.loads(line)
        assert set(payload) == {"iteration", "nll", "duration_ms", "class_posteriors"}
        assert payload["iteration"] == i
        assert payload["duration_ms"] is None
    timed = json.loads(trace.to_jsonl(include_timings=True).splitlines()[0])
    assert timed["duration_ms"] > 0


def test_package_does_not_import_gradient_machinery():
    code = (
        "import sys; import fastsep; "
        "bad = [m for m in sys.modules if m.split('.')[0] in "
        "('torch', 'tensorflow', 'jax', 'autograd')]; "
        "assert not bad, bad"
    )
    subprocess.run([sys.executable, "-c", code], check=True)
