"""Rank-K nonnegative source-variance model with Itakura-Saito updates.

A source's power spectrogram is modeled as the product of a basis matrix
(F x K) and an activation matrix (K x N). Fitting minimizes the IS divergence

    D(P || V) = sum_{f,n} P/V - log(P/V) - 1,   V = basis @ activation,

with the standard multiplicative updates, which never increase D.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import VAR_FLOOR


@dataclass
class NmfModel:
    """Nonnegative factors of one source's variance map."""

    basis: np.ndarray  # (F, K), entries >= VAR_FLOOR
    activation: np.ndarray  # (K, N), entries >= VAR_FLOOR

    @classmethod
    def random_init(cls, n_bins, n_frames, n_basis, rng):
        """Uniform random factors in [0.1, 1)."""
        return cls(
            basis=rng.uniform(0.1, 1.0, size=(n_bins, n_basis)),
            activation=rng.uniform(0.1, 1.0, size=(n_basis, n_frames)),
        )

    def scaled(self, factor):
        """Model with the basis scaled by ``factor`` (variance scales alike)."""
        return NmfModel(np.maximum(self.basis * factor, VAR_FLOOR), self.activation)


def nmf_variance(model, floor=VAR_FLOOR):
    """Variance map sum_k basis[:, k] activation[k, :], floored."""
    return np.maximum(model.basis @ model.activation, floor)


def nmf_update(model, power, floor=VAR_FLOOR):
    """One multiplicative IS-NMF sweep (basis then activation).

    Args:
        model: current factors.
        power: observed power map |y|^2, shape (F, N), nonnegative.
        floor: nonnegativity floor applied to the updated factors.

    Returns:
        New NmfModel; the IS divergence between ``power`` and the modeled
        variance does not increase.
    """
    power = np.asarray(power)
    if np.any(power < 0):
        raise ValueError("power map must be nonnegative")

    basis = model.basis
    act = model.activation

    recip = 1.0 / nmf_variance(NmfModel(basis, act), floor)
    basis = basis * np.sqrt(((power * recip**2) @ act.T) / (recip @ act.T))
    basis = np.maximum(basis, floor)

    recip = 1.0 / nmf_variance(NmfModel(basis, act), floor)
    act = act * np.sqrt((basis.T @ (power * recip**2)) / (basis.T @ recip))
    act = np.maximum(act, floor)

    return NmfModel(basis, act)


def is_divergence(power, variance, floor=VAR_FLOOR):
    """Itakura-Saito divergence D(power || variance)."""
    ratio = np.maximum(power, floor) / np.maximum(variance, floor)
    return float(np.sum(ratio - np.log(ratio) - 1.0))
