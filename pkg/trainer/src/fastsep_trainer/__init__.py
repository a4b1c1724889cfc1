"""Training side of the separation toolkit.

Fits the class-conditional neural source model (encoder, decoder, auxiliary
classifier) on labeled spectrograms, exports portable FMVAE01 weight bundles
for the runtime package, and provides the original backprop-based separation
loop as a speed and accuracy reference.
"""

from .data import LabeledSpectrogramSet, load_corpus, sample_batch, spectrogram_set
from .losses import classifier_ce, elbo, mi_regularizer
from .mvae_ref import ReferenceTrace, mvae_separate_reference
from .networks import (
    Classifier,
    Decoder,
    Encoder,
    SourceModelNets,
    export_bundle,
    import_bundle,
)
from .train import TrainingConfig, held_out_accuracy, train_acvae

__all__ = [
    "Classifier",
    "Decoder",
    "Encoder",
    "LabeledSpectrogramSet",
    "ReferenceTrace",
    "SourceModelNets",
    "TrainingConfig",
    "classifier_ce",
    "elbo",
    "export_bundle",
    "held_out_accuracy",
    "import_bundle",
    "load_corpus",
    "mi_regularizer",
    "mvae_separate_reference",
    "sample_batch",
    "spectrogram_set",
    "train_acvae",
]
