"""Training objectives for the class-conditional source model.

All three terms are summed over the batch (so duplicating a batch doubles the
value) and are to be MAXIMIZED:

* ``elbo``: complex-Gaussian reconstruction likelihood of the power
  spectrogram under the decoded variance map, minus the closed-form
  KL divergence between the Gaussian latent posterior and a standard normal;
* ``mi_regularizer``: variational lower bound on the mutual information
  between the class vector and decoded spectrograms, estimated with one
  posterior sample and the classifier's log-likelihood of the conditioning
  label on the decoded variance map;
* ``classifier_ce``: classifier log-likelihood of the true labels on the
  training data.
"""

import math

import torch

_LOG_VAR_RANGE = 30.0  # generous bound; optimal log-variances sit within +-25


def _sample_latents(nets, power, class_onehot, generator=None):
    mean, log_var = nets.encoder(power, class_onehot)
    log_var = log_var.clamp(-_LOG_VAR_RANGE, _LOG_VAR_RANGE)
    noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + torch.exp(0.5 * log_var) * noise, mean, log_var


def elbo(nets, power, class_onehot, generator=None):
    """Variational lower bound, one reparameterized sample per item."""
    latents, mean, log_var = _sample_latents(nets, power, class_onehot, generator)
    decoded_log_var = nets.decoder(latents, class_onehot, n_frames=power.shape[-1])
    decoded_log_var = decoded_log_var.clamp(-_LOG_VAR_RANGE, _LOG_VAR_RANGE)
    reconstruction = -(
        math.log(math.pi) + decoded_log_var + power * torch.exp(-decoded_log_var)
    ).sum(dim=(1, 2))
    kl = 0.5 * (mean**2 + torch.exp(log_var) - log_var - 1.0).sum(dim=(1, 2))
    return (reconstruction - kl).sum()


def mi_regularizer(nets, power, class_onehot, generator=None):
    """Classifier log-likelihood of the conditioning label on decoded maps."""
    latents, _, _ = _sample_latents(nets, power, class_onehot, generator)
    decoded_log_var = nets.decoder(latents, class_onehot, n_frames=power.shape[-1])
    decoded_log_var = decoded_log_var.clamp(-_LOG_VAR_RANGE, _LOG_VAR_RANGE)
    variance_map = torch.exp(decoded_log_var)
    log_posterior = torch.log_softmax(nets.classifier.logits(variance_map), dim=-1)
    return (log_posterior * class_onehot).sum()


def classifier_ce(nets, power, class_onehot):
    """Label log-likelihood of the classifier on real spectrograms."""
    log_posterior = torch.log_softmax(nets.classifier.logits(power), dim=-1)
    return (log_posterior * class_onehot).sum()
