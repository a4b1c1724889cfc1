"""Determined multichannel blind source separation toolkit.

Separates I-source / I-microphone mixtures by estimating per-frequency
demixing matrices under a local Gaussian source model. Two source models are
provided: a rank-K nonnegative factorization (ILRMA) and a trained neural
bundle whose classifier, encoder and decoder drive a fast forward-only
optimization loop. A shoebox-room simulator and SDR/SIR/SAR scoring close the
loop for end-to-end experiments.
"""

from .evaluation import BssScores, bss_eval, classification_accuracy, runtime_report
from .linalg import SingularMatrixError
from .neural import BundleFormatError, NeuralBundle, load_bundle, save_bundle
from .nmf import NmfModel, nmf_update, nmf_variance
from .roomsim import RoomSpec, Scene, image_method_rir, make_scene, toy_corpus
from .separation import (
    DemixingStack,
    SeparationTrace,
    SourceModelState,
    back_project,
    fmvae_separate,
    ilrma_separate,
    ip_update,
    neg_log_likelihood,
    update_gain,
)
from .signal_io import Spectrogram, Waveform, istft, read_wav, stft, write_wav

__version__ = "0.1.0"

__all__ = [
    "BssScores",
    "BundleFormatError",
    "DemixingStack",
    "NeuralBundle",
    "NmfModel",
    "RoomSpec",
    "Scene",
    "SeparationTrace",
    "SingularMatrixError",
    "SourceModelState",
    "Spectrogram",
    "Waveform",
    "back_project",
    "bss_eval",
    "classification_accuracy",
    "fmvae_separate",
    "ilrma_separate",
    "image_method_rir",
    "ip_update",
    "istft",
    "load_bundle",
    "make_scene",
    "neg_log_likelihood",
    "nmf_update",
    "nmf_variance",
    "read_wav",
    "runtime_report",
    "save_bundle",
    "stft",
    "toy_corpus",
    "update_gain",
    "write_wav",
]
