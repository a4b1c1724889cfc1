import numpy as np
import pytest

from conftest import make_random_bundle
from fastsep.neural import (
    MAGIC,
    BundleFormatError,
    NeuralBundle,
    batch_norm,
    classifier_forward,
    conv1d,
    conv_transpose1d,
    decoder_forward,
    encoder_forward,
    glu,
    load_bundle,
    save_bundle,
)


def _naive_conv1d(x, weight, bias, stride, padding):
    c_out, c_in, kernel = weight.shape
    xp = np.pad(x, ((0, 0), (padding, padding)))
    n_out = (xp.shape[1] - kernel) // stride + 1
    out = np.zeros((c_out, n_out))
    for o in range(c_out):
        for t in range(n_out):
            acc = bias[o]
            for i in range(c_in):
                for k in range(kernel):
                    acc += weight[o, i, k] * xp[i, t * stride + k]
            out[o, t] = acc
    return out


def _naive_deconv1d(x, weight, bias, stride, padding, output_padding):
    c_in, c_out, kernel = weight.shape
    n = x.shape[1]
    full = np.zeros((c_out, (n - 1) * stride + kernel))
    for i in range(c_in):
        for t in range(n):
            for k in range(kernel):
                full[:, t * stride + k] += weight[i, :, k] * x[i, t]
    n_out = (n - 1) * stride - 2 * padding + kernel + output_padding
    padded = np.pad(full, ((0, 0), (0, max(0, padding + n_out - full.shape[1]))))
    return padded[:, padding : padding + n_out] + bias[:, None]


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 2), (2, 2), (3, 1)])
def test_conv1d_matches_direct_loop(stride, padding):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 17)).astype(np.float32)
    weight = rng.standard_normal((4, 3, 5)).astype(np.float32)
    bias = rng.standard_normal(4).astype(np.float32)
    fast = conv1d(x, weight, bias, stride=stride, padding=padding)
    slow = _naive_conv1d(x, weight, bias, stride, padding)
    np.testing.assert_allclose(fast, slow, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("stride,padding,output_padding", [(1, 0, 0), (2, 1, 0), (2, 1, 1), (2, 2, 1)])
def test_conv_transpose1d_matches_direct_loop(stride, padding, output_padding):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 9)).astype(np.float32)
    weight = rng.standard_normal((3, 4, 4)).astype(np.float32)
    bias = rng.standard_normal(4).astype(np.float32)
    fast = conv_transpose1d(x, weight, bias, stride, padding, output_padding)
    slow = _naive_deconv1d(x, weight, bias, stride, padding, output_padding)
    assert fast.shape == slow.shape
    np.testing.assert_allclose(fast, slow, rtol=1e-5, atol=1e-5)


def test_batch_norm_maps_running_mean_to_beta_exactly():
    rng = np.random.default_rng(2)
    channels = 6
    mean = rng.standard_normal(channels).astype(np.float32)
    var = (1.0 + rng.random(channels)).astype(np.float32)
    gamma = rng.standard_normal(channels).astype(np.float32)
    beta = rng.standard_normal(channels).astype(np.float32)
    x = np.repeat(mean[:, None], 4, axis=1)
    out = batch_norm(x, mean, var, gamma, beta, eps=1e-5)
    np.testing.assert_array_equal(out, np.repeat(beta[:, None], 4, axis=1))


def test_glu_matches_elementwise_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((8, 11)).astype(np.float32)
    expected = x[:4] * (1.0 / (1.0 + np.exp(-x[4:])))
    np.testing.assert_allclose(glu(x), expected, rtol=1e-6, atol=1e-7)
    with pytest.raises(ValueError, match="even"):
        glu(x[:3])


def test_classifier_posterior_is_simplex(random_bundle):
    rng = np.random.default_rng(4)
    power = rng.random((33, 20))
    posterior = classifier_forward(random_bundle, power)
    assert posterior.shape == (3,)
    assert np.all(posterior >= 0)
    assert abs(posterior.sum() - 1.0) < 1e-6


def test_classifier_scale_invariance(random_bundle):
    rng = np.random.default_rng(5)
    power = rng.random((33, 18))
    a = classifier_forward(random_bundle, power)
    b = classifier_forward(random_bundle, 37.5 * power)
    np.testing.assert_array_equal(a, b)


def test_forward_passes_are_deterministic(random_bundle):
    rng = np.random.default_rng(6)
    power = rng.random((33, 16))
    c = classifier_forward(random_bundle, power)
    mu1, var1 = encoder_forward(random_bundle, power, c)
    mu2, var2 = encoder_forward(random_bundle, power, c)
    np.testing.assert_array_equal(mu1, mu2)
    np.testing.assert_array_equal(var1, var2)
    d1 = decoder_forward(random_bundle, mu1, c)
    d2 = decoder_forward(random_bundle, mu2, c)
    np.testing.assert_array_equal(d1, d2)


def test_encoder_variance_positive(random_bundle):
    rng = np.random.default_rng(7)
    _, var = encoder_forward(
        random_bundle, rng.random((33, 12)), np.array([0.2, 0.3, 0.5])
    )
    assert np.all(var > 0)


def test_decoder_output_positive_and_cropped(random_bundle):
    rng = np.random.default_rng(8)
    latents = 5.0 * rng.standard_normal((4, 6))
    c = np.array([1.0, 0.0, 0.0])
    out = decoder_forward(random_bundle, latents, c, n_frames=11)
    assert out.shape == (33, 11)
    assert out.min() > 0


def test_decoder_continuity_in_class_vector(random_bundle):
    rng = np.random.default_rng(9)
    latents = rng.standard_normal((4, 5))
    base = decoder_forward(random_bundle, latents, np.array([1.0, 0.0, 0.0]))
    deltas = []
    for eps in (1e-2, 1e-4, 1e-6):
        c = np.array([1.0 - eps, eps / 2, eps / 2])
        deltas.append(np.abs(decoder_forward(random_bundle, latents, c) - base).max())
    assert deltas[0] > deltas[1] > deltas[2] or deltas[2] == 0.0
    assert deltas[2] < 1e-4


def test_shape_mismatch_errors(random_bundle):
    rng = np.random.default_rng(10)
    with pytest.raises(ValueError, match="bins"):
        classifier_forward(random_bundle, rng.random((32, 5)))
    with pytest.raises(ValueError, match="class vector"):
        encoder_forward(random_bundle, rng.random((33, 5)), np.array([0.5, 0.5]))
    with pytest.raises(ValueError, match="latent"):
        decoder_forward(random_bundle, rng.standard_normal((3, 5)), np.ones(3) / 3)


def test_bundle_save_load_roundtrip_bit_exact(tmp_path, random_bundle):
    path = tmp_path / "model.fmv"
    save_bundle(path, random_bundle)
    loaded = load_bundle(path)
    assert loaded.manifest == random_bundle.manifest
    for name, tensor in random_bundle.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[name], tensor)

    second = tmp_path / "model2.fmv"
    save_bundle(second, loaded)
    assert path.read_bytes() == second.read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.fmv"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(BundleFormatError, match="magic"):
        load_bundle(path)


def test_load_rejects_truncated_payload(tmp_path, random_bundle):
    path = tmp_path / "model.fmv"
    save_bundle(path, random_bundle)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(BundleFormatError, match="truncated"):
        load_bundle(path)


def test_load_rejects_trailing_garbage(tmp_path, random_bundle):
    path = tmp_path / "model.fmv"
    save_bundle(path, random_bundle)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(BundleFormatError, match="trailing"):
        load_bundle(path)


def test_validation_rejects_unsupported_layer_kind(random_bundle):
    manifest = {k: v for k, v in random_bundle.manifest.items()}
    import copy

    manifest = copy.deepcopy(manifest)
    manifest["networks"]["classifier"]["layers"][0]["kind"] = "attention"
    with pytest.raises(BundleFormatError, match="unsupported layer kind"):
        NeuralBundle(manifest, dict(random_bundle.tensors))


def test_validation_rejects_shape_inconsistency(random_bundle):
    import copy

    manifest = copy.deepcopy(random_bundle.manifest)
    tensors = dict(random_bundle.tensors)
    tensors["classifier.0.weight"] = tensors["classifier.0.weight"][:, :-1, :]
    with pytest.raises(BundleFormatError, match="shape"):
        NeuralBundle(manifest, tensors)


def test_magic_is_eight_bytes():
    assert len(MAGIC) == 8
