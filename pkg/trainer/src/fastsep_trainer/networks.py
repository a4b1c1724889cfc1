"""Torch encoder/decoder/classifier and their FMVAE01 (de)serialization.

Each network is a flat sequence of primitive ops (Conv1d, ConvTranspose1d,
BatchNorm1d, GLU) so that the exported layer list maps 1:1 onto the portable
file format consumed by the inference runtime. Gated blocks are a convolution
with doubled channels, batch norm, then a GLU halving them back.

All networks take power spectrograms with frequency as the channel axis.
Encoder and classifier normalize their input to unit mean power internally;
class conditioning is channel-concatenation of the class vector broadcast
over time.
"""

import json
import math
import struct

import numpy as np
import torch
from torch import nn

MAGIC = b"FMVAE01\x00"
VAR_FLOOR = 1e-10


def _gated_conv(c_in, c_out, kernel, stride, padding):
    return [
        nn.Conv1d(c_in, 2 * c_out, kernel, stride=stride, padding=padding),
        nn.BatchNorm1d(2 * c_out),
        nn.GLU(dim=1),
    ]


def _gated_deconv(c_in, c_out, kernel, stride, padding):
    return [
        nn.ConvTranspose1d(c_in, 2 * c_out, kernel, stride=stride, padding=padding),
        nn.BatchNorm1d(2 * c_out),
        nn.GLU(dim=1),
    ]


def _normalize_power(power):
    mean = power.mean(dim=(-2, -1), keepdim=True)
    scaled = power / mean.clamp_min(VAR_FLOOR)
    return scaled.clamp_max(1e5)  # mirror the runtime's input cap


def _concat_classes(x, class_probs):
    cond = class_probs[:, :, None].expand(-1, -1, x.shape[-1])
    return torch.cat([x, cond], dim=1)


def _ops_from_layers(layers):
    """Rebuild a primitive op sequence from manifest layer dicts."""
    ops = []
    for layer in layers:
        kind = layer["kind"]
        if kind == "conv":
            ops.append(nn.Conv1d(
                layer["in_channels"], layer["out_channels"], layer["kernel"],
                stride=layer.get("stride", 1), padding=layer.get("padding", 0),
            ))
        elif kind == "deconv":
            ops.append(nn.ConvTranspose1d(
                layer["in_channels"], layer["out_channels"], layer["kernel"],
                stride=layer.get("stride", 1), padding=layer.get("padding", 0),
                output_padding=layer.get("output_padding", 0),
            ))
        elif kind == "batch_norm":
            ops.append(nn.BatchNorm1d(layer["channels"], eps=layer.get("eps", 1e-5)))
        elif kind == "glu":
            ops.append(nn.GLU(dim=1))
        else:
            raise ValueError(f"unsupported layer kind {kind!r}")
    return nn.ModuleList(ops)


class Encoder(nn.Module):
    """(B, F, N) power + (B, C) classes -> latent mean and log-variance."""

    def __init__(self, freq_bins, class_count, latent_channels, hidden, ops=None,
                 stride_stages=1):
        super().__init__()
        self.latent_channels = latent_channels
        if ops is None:
            # downsample immediately: the first layer sees the full frame rate
            # and the widest channel count, so it dominates the forward cost
            ops = []
            current = freq_bins + class_count
            for _ in range(max(stride_stages, 1)):
                ops += _gated_conv(current, hidden, 5, 2, 2)
                current = hidden
            ops += _gated_conv(current, hidden, 5, 1, 2)
            ops += _gated_conv(hidden, hidden, 5, 1, 2)
            ops.append(nn.Conv1d(hidden, 2 * latent_channels, 5, stride=1, padding=2))
            ops = nn.ModuleList(ops)
        self.ops = ops

    def forward(self, power, class_probs):
        x = _concat_classes(_normalize_power(power), class_probs)
        for op in self.ops:
            x = op(x)
        mean, log_var = torch.chunk(x, 2, dim=1)
        return mean, log_var


class Decoder(nn.Module):
    """(B, D, Nz) latents + (B, C) classes -> (B, F, ~N) log-variance map."""

    def __init__(self, freq_bins, class_count, latent_channels, hidden, ops=None,
                 stride_stages=1):
        super().__init__()
        if ops is None:
            ops = []
            current = latent_channels + class_count
            for _ in range(max(stride_stages, 1)):
                ops += _gated_deconv(current, hidden, 4, 2, 1)
                current = hidden
            ops += _gated_conv(hidden, hidden, 5, 1, 2)
            ops.append(nn.Conv1d(hidden, freq_bins, 5, stride=1, padding=2))
            ops = nn.ModuleList(ops)
        self.ops = ops

    def forward(self, latents, class_probs, n_frames=None):
        x = _concat_classes(latents, class_probs)
        for op in self.ops:
            x = op(x)
        if n_frames is not None:
            if x.shape[-1] < n_frames:
                pad = x[..., -1:].expand(-1, -1, n_frames - x.shape[-1])
                x = torch.cat([x, pad], dim=-1)
            x = x[..., :n_frames]
        return x


class Classifier(nn.Module):
    """(B, F, N) power -> (B, C) class posterior (see also ``logits``)."""

    def __init__(self, freq_bins, class_count, hidden, ops=None):
        super().__init__()
        if ops is None:
            ops = []
            ops += _gated_conv(freq_bins, hidden, 5, 2, 2)
            ops += _gated_conv(hidden, hidden, 5, 2, 2)
            ops.append(nn.Conv1d(hidden, class_count, 5, stride=1, padding=2))
            ops = nn.ModuleList(ops)
        self.ops = ops

    def logits(self, power):
        x = _normalize_power(power)
        for op in self.ops:
            x = op(x)
        return x.mean(dim=-1)

    def forward(self, power):
        return torch.softmax(self.logits(power), dim=-1)


class SourceModelNets:
    """The trained triple plus the metadata the file format carries."""

    def __init__(self, encoder, decoder, classifier, freq_bins, class_count,
                 latent_channels, extra=None):
        self.encoder = encoder
        self.decoder = decoder
        self.classifier = classifier
        self.freq_bins = freq_bins
        self.class_count = class_count
        self.latent_channels = latent_channels
        self.extra = dict(extra or {})

    def eval(self):
        for net in (self.encoder, self.decoder, self.classifier):
            net.eval()
        return self

    def parameters(self):
        for net in (self.encoder, self.decoder, self.classifier):
            yield from net.parameters()

    @classmethod
    def build(cls, freq_bins, class_count, latent_channels=16, hidden=40,
              classifier_hidden=16, stride_stages=1, extra=None):
        return cls(
            Encoder(freq_bins, class_count, latent_channels, hidden,
                    stride_stages=stride_stages),
            Decoder(freq_bins, class_count, latent_channels, hidden,
                    stride_stages=stride_stages),
            Classifier(freq_bins, class_count, classifier_hidden),
            freq_bins, class_count, latent_channels, extra,
        )


# ---------------------------------------------------------------------------
# FMVAE01 serialization

def _op_entries(net_name, ops):
    """Manifest layer dicts and tensor dict for one op sequence."""
    layers, tensors = [], {}
    for idx, op in enumerate(ops):
        prefix = f"{net_name}.{idx}"
        if isinstance(op, nn.Conv1d):
            layers.append({
                "kind": "conv",
                "in_channels": op.in_channels, "out_channels": op.out_channels,
                "kernel": op.kernel_size[0], "stride": op.stride[0],
                "padding": op.padding[0],
            })
            tensors[f"{prefix}.weight"] = op.weight.detach().numpy().astype(np.float32)
            tensors[f"{prefix}.bias"] = op.bias.detach().numpy().astype(np.float32)
        elif isinstance(op, nn.ConvTranspose1d):
            layers.append({
                "kind": "deconv",
                "in_channels": op.in_channels, "out_channels": op.out_channels,
                "kernel": op.kernel_size[0], "stride": op.stride[0],
                "padding": op.padding[0], "output_padding": op.output_padding[0],
            })
            tensors[f"{prefix}.weight"] = op.weight.detach().numpy().astype(np.float32)
            tensors[f"{prefix}.bias"] = op.bias.detach().numpy().astype(np.float32)
        elif isinstance(op, nn.BatchNorm1d):
            layers.append({
                "kind": "batch_norm", "channels": op.num_features, "eps": op.eps,
            })
            tensors[f"{prefix}.gamma"] = op.weight.detach().numpy().astype(np.float32)
            tensors[f"{prefix}.beta"] = op.bias.detach().numpy().astype(np.float32)
            tensors[f"{prefix}.running_mean"] = (
                op.running_mean.detach().numpy().astype(np.float32)
            )
            tensors[f"{prefix}.running_var"] = (
                op.running_var.detach().numpy().astype(np.float32)
            )
        elif isinstance(op, nn.GLU):
            layers.append({"kind": "glu"})
        else:
            raise TypeError(f"cannot serialize layer type {type(op).__name__}")
    return layers, tensors


def export_bundle(path, nets):
    """Write the networks as an FMVAE01 file (see the format notes above)."""
    networks, tensors = {}, {}
    for name, net in (
        ("encoder", nets.encoder), ("decoder", nets.decoder),
        ("classifier", nets.classifier),
    ):
        layers, net_tensors = _op_entries(name, net.ops)
        networks[name] = {"layers": layers}
        tensors.update(net_tensors)

    entries = [
        {"name": name, "shape": list(tensor.shape)}
        for name, tensor in tensors.items()
    ]
    manifest = {
        "format": "FMVAE01",
        "version": 1,
        "class_count": nets.class_count,
        "latent_channels": nets.latent_channels,
        "freq_bins": nets.freq_bins,
        "conditioning": "concat",
        "input_normalization": "unit_mean_power",
        "networks": networks,
        "tensors": entries,
    }
    manifest.update(nets.extra)

    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for entry in manifest["tensors"]:
            fh.write(np.ascontiguousarray(tensors[entry["name"]], dtype="<f4").tobytes())


def import_bundle(path):
    """Read an FMVAE01 file back into torch networks (eval mode)."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path!r} is not an FMVAE01 bundle")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        tensors = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            tensors[entry["name"]] = data.copy()

    freq_bins = manifest["freq_bins"]
    class_count = manifest["class_count"]
    latent = manifest["latent_channels"]

    built = {}
    for name, cls, extra_args in (
        ("encoder", Encoder, (latent,)),
        ("decoder", Decoder, (latent,)),
        ("classifier", Classifier, ()),
    ):
        ops = _ops_from_layers(manifest["networks"][name]["layers"])
        net = cls(freq_bins, class_count, *extra_args, hidden=0, ops=ops)
        for idx, op in enumerate(net.ops):
            prefix = f"{name}.{idx}"
            with torch.no_grad():
                if isinstance(op, (nn.Conv1d, nn.ConvTranspose1d)):
                    op.weight.copy_(torch.from_numpy(tensors[f"{prefix}.weight"]))
                    op.bias.copy_(torch.from_numpy(tensors[f"{prefix}.bias"]))
                elif isinstance(op, nn.BatchNorm1d):
                    op.weight.copy_(torch.from_numpy(tensors[f"{prefix}.gamma"]))
                    op.bias.copy_(torch.from_numpy(tensors[f"{prefix}.beta"]))
                    op.running_mean.copy_(
                        torch.from_numpy(tensors[f"{prefix}.running_mean"])
                    )
                    op.running_var.copy_(
                        torch.from_numpy(tensors[f"{prefix}.running_var"])
                    )
        built[name] = net

    meta_keys = set(manifest) - {
        "format", "version", "class_count", "latent_channels", "freq_bins",
        "conditioning", "input_normalization", "networks", "tensors",
    }
    nets = SourceModelNets(
        built["encoder"], built["decoder"], built["classifier"],
        freq_bins, class_count, latent,
        extra={k: manifest[k] for k in meta_keys},
    )
    return nets.eval()


def latent_frames(n_frames, stride_stages=1):
    """Latent sequence length after the encoder's stride-2 stages."""
    for _ in range(max(stride_stages, 1)):
        n_frames = math.ceil(n_frames / 2)
    return n_frames
