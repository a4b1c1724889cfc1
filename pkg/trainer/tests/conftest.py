import numpy as np
import pytest
import torch

from fastsep_trainer.networks import SourceModelNets


@pytest.fixture
def tiny_nets():
    torch.manual_seed(0)
    nets = SourceModelNets.build(
        freq_bins=9, class_count=2, latent_channels=2, hidden=4, classifier_hidden=4
    )
    return nets.eval()


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(0)
    power = torch.from_numpy(rng.random((2, 9, 6)).astype(np.float32)) + 0.1
    labels = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    return power, labels
