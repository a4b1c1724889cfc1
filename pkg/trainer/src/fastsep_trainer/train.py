"""Training driver: fit the auxiliary-classifier source model, export FMVAE01."""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import load_corpus, sample_batch, spectrogram_set
from .losses import classifier_ce, elbo, mi_regularizer
from .networks import SourceModelNets, export_bundle

log = logging.getLogger("fastsep_trainer")


@dataclass
class TrainingConfig:
    corpus: object  # corpus directory, or list of (samples, label) pairs
    class_count: int
    out: str = "model.fmv"
    latent_channels: int = 8
    hidden: int = 48
    classifier_hidden: int = 24
    lambda_mi: float = 1.0  # weight of the mutual-information bound
    lambda_ce: float = 1.0  # weight of the classifier label likelihood
    learning_rate: float = 1e-3
    epochs: int = 120
    steps_per_epoch: int = 24
    batch_size: int = 16
    segment_frames: int = 64
    window_length: int = 2048
    frame_shift: int = 1024
    sample_rate: int = 16000
    seed: int = 0
    curve_out: str | None = None
    extra_manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lambda_mi < 0 or self.lambda_ce < 0:
            raise ValueError("regularizer weights must be nonnegative")


def _dataset_from_config(config):
    if isinstance(config.corpus, (str, bytes)) or hasattr(config.corpus, "joinpath"):
        return load_corpus(config.corpus, config.window_length, config.frame_shift)
    return spectrogram_set(
        config.corpus, config.class_count, config.window_length, config.frame_shift
    )


def train_acvae(config):
    """Train encoder/decoder/classifier and export an FMVAE01 bundle.

    Maximizes elbo + lambda_mi * mi_regularizer + lambda_ce * classifier_ce
    with Adam; with both weights at zero this reduces to plain conditional
    VAE training. Returns (bundle path, training-curve rows).
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed + 1)

    dataset = _dataset_from_config(config)
    if dataset.class_count != config.class_count:
        raise ValueError(
            f"corpus has {dataset.class_count} classes, config says {config.class_count}"
        )
    extra = {
        "sample_rate": config.sample_rate,
        "window_length": config.window_length,
        "frame_shift": config.frame_shift,
        "training_seed": config.seed,
    }
    extra.update(config.extra_manifest)
    nets = SourceModelNets.build(
        dataset.freq_bins,
        config.class_count,
        latent_channels=config.latent_channels,
        hidden=config.hidden,
        classifier_hidden=config.classifier_hidden,
        extra=extra,
    )
    optimizer = torch.optim.Adam(nets.parameters(), lr=config.learning_rate)

    curve = []
    for epoch in range(config.epochs):
        sums = {"elbo": 0.0, "mi_bound": 0.0, "label_ll": 0.0}
        count = 0
        for _ in range(config.steps_per_epoch):
            power, labels = sample_batch(
                dataset, config.batch_size, config.segment_frames, rng
            )
            j_term = elbo(nets, power, labels, generator)
            l_term = mi_regularizer(nets, power, labels, generator)
            i_term = classifier_ce(nets, power, labels)
            objective = j_term + config.lambda_mi * l_term + config.lambda_ce * i_term
            loss = -objective / config.batch_size
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged at epoch {epoch} (non-finite objective)"
                )
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(list(nets.parameters()), max_norm=100.0)
            optimizer.step()
            sums["elbo"] += float(j_term.detach()) / config.batch_size
            sums["mi_bound"] += float(l_term.detach()) / config.batch_size
            sums["label_ll"] += float(i_term.detach()) / config.batch_size
            count += 1
        row = {"epoch": epoch} | {k: v / count for k, v in sums.items()}
        curve.append(row)
        if epoch % 20 == 0 or epoch == config.epochs - 1:
            log.info(
                "epoch %d elbo %.1f mi %.3f ce %.3f",
                epoch, row["elbo"], row["mi_bound"], row["label_ll"],
            )

    nets.eval()
    export_bundle(config.out, nets)
    if config.curve_out:
        with open(config.curve_out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "elbo", "mi_bound", "label_ll"])
            writer.writeheader()
            writer.writerows(curve)
    return config.out, curve


def held_out_accuracy(nets, dataset):
    """Classifier accuracy over a LabeledSpectrogramSet (whole utterances)."""
    nets.eval()
    correct = 0
    with torch.no_grad():
        for spec, label in zip(dataset.spectrograms, dataset.labels):
            posterior = nets.classifier(torch.from_numpy(spec[None]))
            if int(posterior[0].argmax()) == label:
                correct += 1
    return correct / len(dataset)
