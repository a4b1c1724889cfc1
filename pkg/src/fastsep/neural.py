"""Forward-only neural source model: layer kernels and the FMVAE01 file format.

The bundle holds three fully-convolutional 1-D networks operating on power
spectrograms whose frequency axis is treated as the channel axis:

* encoder:    (freq_bins + class_count, N) -> (2 * latent_channels, Nz),
              split into posterior mean and log-variance;
* decoder:    (latent_channels + class_count, Nz) -> (freq_bins, N'),
              emitting per-bin log-variance;
* classifier: (freq_bins, N) -> (class_count, Nc) logits, averaged over time
              and soft-maxed into a class posterior.

Class conditioning is channel-concatenation of the class vector broadcast
over time. Encoder and classifier inputs are normalized to unit mean power,
making both forwards invariant to global input scale; the separation gain
absorbs absolute scale instead.

File format FMVAE01: 8-byte magic ``FMVAE01\\0``, a little-endian uint32
byte length, a UTF-8 JSON manifest (sorted keys, compact separators), then
raw tensor payloads as little-endian IEEE-754 float32 in manifest order.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .linalg import VAR_FLOOR

MAGIC = b"FMVAE01\x00"
NETWORK_NAMES = ("encoder", "decoder", "classifier")
_LOG_VAR_LIMIT = 60.0  # keeps exp() finite whatever the weights emit
_INPUT_POWER_CAP = 1e5  # 50 dB above mean power; healthy maps peak near 1e3
_ACTIVATION_LIMIT = 1e6  # float32 guard for far out-of-distribution inputs


class BundleFormatError(ValueError):
    """Malformed or internally inconsistent FMVAE01 bundle."""


@dataclass
class NeuralBundle:
    """Immutable container for the manifest and float32 weight tensors."""

    manifest: dict
    tensors: dict

    def __post_init__(self):
        validate_bundle(self.manifest, self.tensors)

    @property
    def class_count(self):
        return int(self.manifest["class_count"])

    @property
    def latent_channels(self):
        return int(self.manifest["latent_channels"])

    @property
    def freq_bins(self):
        return int(self.manifest["freq_bins"])

    def layers(self, network):
        return self.manifest["networks"][network]["layers"]


# ---------------------------------------------------------------------------
# layer kernels (float32 throughout)


def conv1d(x, weight, bias, stride=1, padding=0):
    """1-D convolution (cross-correlation); weight is (out, in, kernel)."""
    c_out, c_in, kernel = weight.shape
    if x.shape[0] != c_in:
        raise ValueError(f"conv expects {c_in} input channels, got {x.shape[0]}")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding)))
    n_out = (x.shape[1] - kernel) // stride + 1
    if n_out <= 0:
        raise ValueError("input too short for convolution kernel")
    windows = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=1)
    windows = windows[:, ::stride, :][:, :n_out, :]
    col = windows.transpose(0, 2, 1).reshape(c_in * kernel, n_out)
    return weight.reshape(c_out, c_in * kernel) @ col + bias[:, None]


def conv_transpose1d(x, weight, bias, stride=1, padding=0, output_padding=0):
    """Transposed 1-D convolution; weight is (in, out, kernel)."""
    c_in, c_out, kernel = weight.shape
    if x.shape[0] != c_in:
        raise ValueError(f"deconv expects {c_in} input channels, got {x.shape[0]}")
    n = x.shape[1]
    span = (n - 1) * stride + kernel
    full = np.zeros((c_out, span), dtype=np.float32)
    for tap in range(kernel):
        full[:, tap : tap + (n - 1) * stride + 1 : stride] += weight[:, :, tap].T @ x
    n_out = (n - 1) * stride - 2 * padding + kernel + output_padding
    if n_out <= 0:
        raise ValueError("deconv output length is not positive")
    if padding + n_out > span:
        full = np.pad(full, ((0, 0), (0, padding + n_out - span)))
    return full[:, padding : padding + n_out] + bias[:, None]


def batch_norm(x, running_mean, running_var, gamma, beta, eps):
    """Inference-mode batch normalization with stored running statistics."""
    scale = gamma / np.sqrt(running_var + eps)
    return (x - running_mean[:, None]) * scale[:, None] + beta[:, None]


def glu(x):
    """Gated linear unit: first half of the channels gated by the second."""
    if x.shape[0] % 2 != 0:
        raise ValueError("GLU needs an even channel count")
    half = x.shape[0] // 2
    return x[:half] * expit(x[half:])


def run_network(bundle, network, x):
    """Apply one of the bundle's layer sequences to x (channels, time)."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    for idx, layer in enumerate(bundle.layers(network)):
        kind = layer["kind"]
        name = f"{network}.{idx}"
        if kind == "conv":
            x = conv1d(
                x,
                bundle.tensors[f"{name}.weight"],
                bundle.tensors[f"{name}.bias"],
                stride=layer.get("stride", 1),
                padding=layer.get("padding", 0),
            )
        elif kind == "deconv":
            x = conv_transpose1d(
                x,
                bundle.tensors[f"{name}.weight"],
                bundle.tensors[f"{name}.bias"],
                stride=layer.get("stride", 1),
                padding=layer.get("padding", 0),
                output_padding=layer.get("output_padding", 0),
            )
        elif kind == "batch_norm":
            x = batch_norm(
                x,
                bundle.tensors[f"{name}.running_mean"],
                bundle.tensors[f"{name}.running_var"],
                bundle.tensors[f"{name}.gamma"],
                bundle.tensors[f"{name}.beta"],
                eps=layer.get("eps", 1e-5),
            )
        elif kind == "glu":
            x = glu(x)
        else:
            raise BundleFormatError(f"unsupported layer kind {kind!r}")
        # inactive for in-distribution inputs; keeps extreme separated
        # spectrograms (near-singular demixing bins) finite in float32
        x = np.clip(np.asarray(x, dtype=np.float32), -_ACTIVATION_LIMIT, _ACTIVATION_LIMIT)
    return x


# ---------------------------------------------------------------------------
# forward passes


def normalize_power(power):
    """Scale a nonnegative power map to unit mean, capped at 50 dB above it."""
    power = np.asarray(power, dtype=np.float64)
    scaled = power / max(float(power.mean()), VAR_FLOOR)
    return np.minimum(scaled, _INPUT_POWER_CAP)


def _conditioned_input(base, class_probs, class_count):
    class_probs = np.asarray(class_probs, dtype=np.float64).ravel()
    if class_probs.size != class_count:
        raise ValueError(
            f"class vector has {class_probs.size} entries, bundle expects {class_count}"
        )
    cond = np.repeat(class_probs[:, None], base.shape[1], axis=1)
    return np.concatenate([base, cond], axis=0)


def classifier_forward(bundle, power):
    """Class posterior for a power spectrogram (freq_bins, N).

    Logits are averaged over time before the softmax, so the posterior is
    invariant to the input length and, thanks to pre-normalization, to any
    global scaling of the input.
    """
    if power.shape[0] != bundle.freq_bins:
        raise ValueError(
            f"classifier expects {bundle.freq_bins} bins, got {power.shape[0]}"
        )
    logits = run_network(bundle, "classifier", normalize_power(power))
    mean_logits = logits.mean(axis=1, dtype=np.float64)
    shifted = np.exp(mean_logits - mean_logits.max())
    return shifted / shifted.sum()


def encoder_forward(bundle, power, class_probs):
    """Posterior mean and variance of the latent sequence.

    Returns:
        (mu, var): each (latent_channels, Nz); var is strictly positive.
    """
    if power.shape[0] != bundle.freq_bins:
        raise ValueError(
            f"encoder expects {bundle.freq_bins} bins, got {power.shape[0]}"
        )
    x = _conditioned_input(normalize_power(power), class_probs, bundle.class_count)
    out = run_network(bundle, "encoder", x)
    half = bundle.latent_channels
    mu = out[:half].astype(np.float64)
    log_var = np.clip(out[half:].astype(np.float64), -_LOG_VAR_LIMIT, _LOG_VAR_LIMIT)
    return mu, np.maximum(np.exp(log_var), VAR_FLOOR)


def decoder_forward(bundle, latents, class_probs, n_frames=None):
    """Modeled spectral variance map for a latent sequence and class vector.

    The final layer emits log-variance; exponentiation (plus the global
    floor) guarantees a strictly positive map. If ``n_frames`` is given the
    output is cropped, or edge-padded, to that many frames.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] != bundle.latent_channels:
        raise ValueError(
            f"latent input must be ({bundle.latent_channels}, Nz), got {latents.shape}"
        )
    x = _conditioned_input(latents, class_probs, bundle.class_count)
    log_var = run_network(bundle, "decoder", x).astype(np.float64)
    if n_frames is not None:
        if log_var.shape[1] >= n_frames:
            log_var = log_var[:, :n_frames]
        else:
            log_var = np.pad(log_var, ((0, 0), (0, n_frames - log_var.shape[1])), mode="edge")
    log_var = np.clip(log_var, -_LOG_VAR_LIMIT, _LOG_VAR_LIMIT)
    return np.maximum(np.exp(log_var), VAR_FLOOR)


# ---------------------------------------------------------------------------
# bundle validation and file IO

_LAYER_TENSORS = {
    "conv": ("weight", "bias"),
    "deconv": ("weight", "bias"),
    "batch_norm": ("gamma", "beta", "running_mean", "running_var"),
    "glu": (),
}


def _trace_channels(name, layers, in_channels, tensors):
    """Walk a layer sequence checking channel flow and tensor shapes."""
    current = in_channels
    for idx, layer in enumerate(layers):
        kind = layer.get("kind")
        prefix = f"{name}.{idx}"
        if kind not in _LAYER_TENSORS:
            raise BundleFormatError(f"{prefix}: unsupported layer kind {kind!r}")
        for suffix in _LAYER_TENSORS[kind]:
            if f"{prefix}.{suffix}" not in tensors:
                raise BundleFormatError(f"{prefix}: missing tensor {suffix!r}")
        if kind == "conv":
            weight = tensors[f"{prefix}.weight"]
            expected = (layer["out_channels"], layer["in_channels"], layer["kernel"])
            if layer["in_channels"] != current:
                raise BundleFormatError(
                    f"{prefix}: declares {layer['in_channels']} input channels, "
                    f"flow carries {current}"
                )
            if weight.shape != expected:
                raise BundleFormatError(
                    f"{prefix}: weight shape {weight.shape} != declared {expected}"
                )
            if tensors[f"{prefix}.bias"].shape != (layer["out_channels"],):
                raise BundleFormatError(f"{prefix}: bias shape mismatch")
            current = layer["out_channels"]
        elif kind == "deconv":
            weight = tensors[f"{prefix}.weight"]
            expected = (layer["in_channels"], layer["out_channels"], layer["kernel"])
            if layer["in_channels"] != current:
                raise BundleFormatError(
                    f"{prefix}: declares {layer['in_channels']} input channels, "
                    f"flow carries {current}"
                )
            if weight.shape != expected:
                raise BundleFormatError(
                    f"{prefix}: weight shape {weight.shape} != declared {expected}"
                )
            if tensors[f"{prefix}.bias"].shape != (layer["out_channels"],):
                raise BundleFormatError(f"{prefix}: bias shape mismatch")
            current = layer["out_channels"]
        elif kind == "batch_norm":
            if layer["channels"] != current:
                raise BundleFormatError(
                    f"{prefix}: batch_norm over {layer['channels']} channels, "
                    f"flow carries {current}"
                )
            for suffix in _LAYER_TENSORS[kind]:
                if tensors[f"{prefix}.{suffix}"].shape != (current,):
                    raise BundleFormatError(f"{prefix}.{suffix}: shape mismatch")
        elif kind == "glu":
            if current % 2 != 0:
                raise BundleFormatError(f"{prefix}: GLU needs even channels, got {current}")
            current //= 2
    return current


def validate_bundle(manifest, tensors):
    for key in ("format", "class_count", "latent_channels", "freq_bins", "networks", "tensors"):
        if key not in manifest:
            raise BundleFormatError(f"manifest missing required key {key!r}")
    if manifest["format"] != "FMVAE01":
        raise BundleFormatError(f"unknown format tag {manifest['format']!r}")
    for net in NETWORK_NAMES:
        if net not in manifest["networks"]:
            raise BundleFormatError(f"manifest missing network {net!r}")
    declared = {entry["name"] for entry in manifest["tensors"]}
    if declared != set(tensors):
        raise BundleFormatError("manifest tensor list does not match stored tensors")
    for entry in manifest["tensors"]:
        actual = tensors[entry["name"]]
        if tuple(entry["shape"]) != actual.shape:
            raise BundleFormatError(
                f"tensor {entry['name']!r}: stored shape {actual.shape} "
                f"!= declared {tuple(entry['shape'])}"
            )
        if actual.dtype != np.float32:
            raise BundleFormatError(f"tensor {entry['name']!r} must be float32")

    n_classes = int(manifest["class_count"])
    latent = int(manifest["latent_channels"])
    bins = int(manifest["freq_bins"])
    if n_classes < 1 or latent < 1 or bins < 2:
        raise BundleFormatError("class_count, latent_channels and freq_bins must be positive")

    nets = manifest["networks"]
    out = _trace_channels("encoder", nets["encoder"]["layers"], bins + n_classes, tensors)
    if out != 2 * latent:
        raise BundleFormatError(
            f"encoder emits {out} channels, needs {2 * latent} (mean + log-variance)"
        )
    out = _trace_channels("decoder", nets["decoder"]["layers"], latent + n_classes, tensors)
    if out != bins:
        raise BundleFormatError(f"decoder emits {out} channels, needs {bins}")
    out = _trace_channels("classifier", nets["classifier"]["layers"], bins, tensors)
    if out != n_classes:
        raise BundleFormatError(f"classifier emits {out} channels, needs {n_classes}")


def manifest_bytes(manifest):
    """Canonical manifest serialization (shared with any writer of FMVAE01)."""
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_bundle(path, bundle):
    """Write an FMVAE01 file; byte-identical for byte-identical bundles."""
    blob = manifest_bytes(bundle.manifest)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for entry in bundle.manifest["tensors"]:
            arr = np.ascontiguousarray(bundle.tensors[entry["name"]], dtype="<f4")
            fh.write(arr.tobytes())


def load_bundle(path):
    """Read and validate an FMVAE01 file."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise BundleFormatError(
                f"{path!r} is not an FMVAE01 bundle (bad magic {magic!r})"
            )
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise BundleFormatError(f"{path!r}: truncated manifest length")
        (blob_len,) = struct.unpack("<I", raw_len)
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise BundleFormatError(f"{path!r}: truncated manifest")
        try:
            manifest = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BundleFormatError(f"{path!r}: invalid manifest JSON: {exc}") from exc

        tensors = {}
        for entry in manifest.get("tensors", []):
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(4 * count)
            if len(payload) != 4 * count:
                raise BundleFormatError(
                    f"{path!r}: truncated payload for tensor {entry['name']!r}"
                )
            tensors[entry["name"]] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise BundleFormatError(f"{path!r}: trailing bytes after tensor payloads")
    return NeuralBundle(manifest, tensors)
