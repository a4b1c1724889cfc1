import numpy as np
import pytest

from fastsep.neural import NeuralBundle


def _conv_layer(name, idx, c_in, c_out, kernel, stride, padding, rng, tensors, entries):
    layer = {
        "kind": "conv", "in_channels": c_in, "out_channels": c_out,
        "kernel": kernel, "stride": stride, "padding": padding,
    }
    scale = 1.0 / np.sqrt(c_in * kernel)
    tensors[f"{name}.{idx}.weight"] = (
        rng.standard_normal((c_out, c_in, kernel)) * scale
    ).astype(np.float32)
    tensors[f"{name}.{idx}.bias"] = np.zeros(c_out, dtype=np.float32)
    entries.append({"name": f"{name}.{idx}.weight", "shape": [c_out, c_in, kernel]})
    entries.append({"name": f"{name}.{idx}.bias", "shape": [c_out]})
    return layer


def _deconv_layer(name, idx, c_in, c_out, kernel, stride, padding, output_padding,
                  rng, tensors, entries):
    layer = {
        "kind": "deconv", "in_channels": c_in, "out_channels": c_out,
        "kernel": kernel, "stride": stride, "padding": padding,
        "output_padding": output_padding,
    }
    scale = 1.0 / np.sqrt(c_in * kernel)
    tensors[f"{name}.{idx}.weight"] = (
        rng.standard_normal((c_in, c_out, kernel)) * scale
    ).astype(np.float32)
    tensors[f"{name}.{idx}.bias"] = np.zeros(c_out, dtype=np.float32)
    entries.append({"name": f"{name}.{idx}.weight", "shape": [c_in, c_out, kernel]})
    entries.append({"name": f"{name}.{idx}.bias", "shape": [c_out]})
    return layer


def _bn_layer(name, idx, channels, rng, tensors, entries):
    layer = {"kind": "batch_norm", "channels": channels, "eps": 1e-5}
    tensors[f"{name}.{idx}.gamma"] = np.ones(channels, dtype=np.float32)
    tensors[f"{name}.{idx}.beta"] = np.zeros(channels, dtype=np.float32)
    tensors[f"{name}.{idx}.running_mean"] = (
        0.1 * rng.standard_normal(channels)
    ).astype(np.float32)
    tensors[f"{name}.{idx}.running_var"] = (
        1.0 + 0.1 * rng.random(channels)
    ).astype(np.float32)
    for suffix in ("gamma", "beta", "running_mean", "running_var"):
        entries.append({"name": f"{name}.{idx}.{suffix}", "shape": [channels]})
    return layer


def make_random_bundle(freq_bins=33, class_count=3, latent_channels=4, hidden=8, seed=0):
    """Random (untrained) bundle with the standard three-network layout."""
    rng = np.random.default_rng(seed)
    tensors, entries = {}, {}
    entries = []
    networks = {}

    def gated_stack(name, c_in, widths_strides, c_final, final_kind="conv",
                    final_kwargs=None):
        layers = []
        cur = c_in
        for width, stride in widths_strides:
            layers.append(
                _conv_layer(name, len(layers), cur, 2 * width, 5, stride, 2,
                            rng, tensors, entries)
            )
            layers.append(_bn_layer(name, len(layers), 2 * width, rng, tensors, entries))
            layers.append({"kind": "glu"})
            cur = width
        if final_kind == "conv":
            layers.append(
                _conv_layer(name, len(layers), cur, c_final, 5, 1, 2,
                            rng, tensors, entries)
            )
        else:
            layers.append(
                _deconv_layer(name, len(layers), cur, c_final, 4, 2, 1, 0,
                              rng, tensors, entries)
            )
        return layers

    networks["encoder"] = {
        "layers": gated_stack(
            "encoder", freq_bins + class_count,
            [(hidden, 1), (hidden, 2)], 2 * latent_channels,
        )
    }
    # decoder: gated upsampling deconv, then a plain conv head emitting log-variance
    dec_layers = []
    dec_layers.append(
        _deconv_layer("decoder", 0, latent_channels + class_count, 2 * hidden,
                      4, 2, 1, 0, rng, tensors, entries)
    )
    dec_layers.append(_bn_layer("decoder", 1, 2 * hidden, rng, tensors, entries))
    dec_layers.append({"kind": "glu"})
    dec_layers.append(
        _conv_layer("decoder", 3, hidden, freq_bins, 5, 1, 2, rng, tensors, entries)
    )
    networks["decoder"] = {"layers": dec_layers}
    networks["classifier"] = {
        "layers": gated_stack(
            "classifier", freq_bins, [(hidden, 2)], class_count,
        )
    }

    manifest = {
        "format": "FMVAE01",
        "version": 1,
        "class_count": class_count,
        "latent_channels": latent_channels,
        "freq_bins": freq_bins,
        "conditioning": "concat",
        "input_normalization": "unit_mean_power",
        "networks": networks,
        "tensors": entries,
    }
    return NeuralBundle(manifest, tensors)


@pytest.fixture
def random_bundle():
    return make_random_bundle()
