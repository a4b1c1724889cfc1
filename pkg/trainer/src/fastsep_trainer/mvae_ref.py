"""Backprop reference separation: the original neural-source-model loop.

Same structure as the fast forward-only separation, but the class vector and
latent sequence are refreshed by gradient ascent on the mixture
log-likelihood through the decoder (Adam, several steps per outer iteration),
with the class vector kept on the simplex through a softmax parameterization.
The gain keeps its closed-form update and the demixing matrices their
iterative-projection update.

This module is deliberately self-contained (its own demixing/likelihood
helpers) so the training package touches the runtime package only through
the weight-file format.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .networks import VAR_FLOOR


@dataclass
class ReferenceTrace:
    """Per-iteration log of the backprop reference run."""

    records: list = field(default_factory=list)
    method: str = "mvae"

    @property
    def durations_ms(self):
        return np.array([r["duration_ms"] for r in self.records])

    @property
    def nll_curve(self):
        return np.array([r["nll"] for r in self.records])

    def class_argmax(self):
        return np.array(
            [[int(np.argmax(p)) for p in r["class_posteriors"]] for r in self.records]
        )


def _demix_one(matrices, mixture, j):
    return np.einsum("fi,fin->fn", matrices[:, :, j].conj(), mixture)


def _ip_update(matrices, mixture, variance, j):
    n_frames = mixture.shape[2]
    weights = np.maximum(variance, VAR_FLOOR)
    cov = np.einsum("fin,fn,fjn->fij", mixture, 1.0 / weights, mixture.conj()) / n_frames
    cov = 0.5 * (cov + cov.conj().transpose(0, 2, 1))
    lhs = matrices.conj().transpose(0, 2, 1) @ cov
    lhs += 1e-12 * np.eye(matrices.shape[1])[None]
    rhs = np.zeros((matrices.shape[1], 1), dtype=np.complex128)
    rhs[j] = 1.0
    w = np.linalg.solve(lhs, np.broadcast_to(rhs, lhs.shape[:1] + rhs.shape))[..., 0]
    denom = np.einsum("fi,fij,fj->f", w.conj(), cov, w).real
    matrices[:, :, j] = w / np.sqrt(np.maximum(denom, VAR_FLOOR))[:, None]


def _nll(matrices, variances, mixture):
    n_frames = mixture.shape[2]
    v = np.maximum(variances, VAR_FLOOR)
    y = np.einsum("fij,fin->fjn", matrices.conj(), mixture)
    power = (np.abs(y) ** 2).transpose(1, 0, 2)
    _, logdets = np.linalg.slogdet(matrices)
    return float(np.sum(np.log(v)) + np.sum(power / v) - 2.0 * n_frames * logdets.sum())


def mvae_separate_reference(
    mixture,
    nets,
    init_matrices,
    iterations,
    grad_steps=30,
    learning_rate=1e-2,
):
    """Separate a (F, I, N) mixture with backprop source-model updates.

    Args:
        mixture: complex mixture STFT stack.
        nets: trained SourceModelNets (eval mode; batch-norm running stats).
        init_matrices: (F, I, I) demixing stack to start from.
        iterations: outer iterations.
        grad_steps: Adam steps on (latents, class logits) per source per
            iteration; 0 degenerates to gain + demixing updates only.
        learning_rate: Adam step size for the source-model variables.

    Returns:
        (matrices, ReferenceTrace).
    """
    nets.eval()
    n_bins, n_sources, n_frames = mixture.shape
    matrices = np.array(init_matrices, dtype=np.complex128, copy=True)

    latents, class_logits, optimizers = [], [], []
    gains = [1.0] * n_sources
    for j in range(n_sources):
        power = np.abs(_demix_one(matrices, mixture, j)) ** 2
        uniform = torch.full((1, nets.class_count), 1.0 / nets.class_count)
        with torch.no_grad():
            mean, _ = nets.encoder(torch.from_numpy(power[None]).float(), uniform)
        z = mean.clone().requires_grad_(True)
        logits = torch.zeros((1, nets.class_count), requires_grad=True)
        latents.append(z)
        class_logits.append(logits)
        optimizers.append(torch.optim.Adam([z, logits], lr=learning_rate))

    trace = ReferenceTrace()
    variances = np.ones((n_sources, n_bins, n_frames))
    for it in range(iterations):
        tic = time.perf_counter()
        for j in range(n_sources):
            power_np = np.abs(_demix_one(matrices, mixture, j)) ** 2
            power = torch.from_numpy(power_np[None]).float()
            gain = torch.tensor(float(gains[j]))
            for _ in range(grad_steps):
                class_probs = torch.softmax(class_logits[j], dim=-1)
                log_var = nets.decoder(latents[j], class_probs, n_frames=n_frames)
                log_var = log_var.clamp(-60.0, 60.0)
                modeled = gain * torch.exp(log_var)
                loss = (torch.log(modeled) + power / modeled).sum()
                optimizers[j].zero_grad()
                loss.backward()
                optimizers[j].step()
            with torch.no_grad():
                class_probs = torch.softmax(class_logits[j], dim=-1)
                log_var = nets.decoder(latents[j], class_probs, n_frames=n_frames)
                decoded = np.exp(log_var.clamp(-60.0, 60.0)[0].numpy().astype(np.float64))
            gains[j] = float(np.mean(power_np / np.maximum(decoded, VAR_FLOOR)))
            variances[j] = np.maximum(gains[j] * decoded, VAR_FLOOR)
            _ip_update(matrices, mixture, variances[j], j)
        posteriors = [
            torch.softmax(class_logits[j], dim=-1)[0].detach().numpy().tolist()
            for j in range(n_sources)
        ]
        trace.records.append(
            {
                "iteration": it,
                "nll": _nll(matrices, variances, mixture),
                "duration_ms": (time.perf_counter() - tic) * 1e3,
                "class_posteriors": posteriors,
            }
        )
    return matrices, trace
