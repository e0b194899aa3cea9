import numpy as np
import pytest
import torch

from localization.model import ConstrainedVAE, ModelConfig
from support.synthetic_data import SynthConfig

# 8x8 input, d=4: the model the gradient checks run on.
TINY = ModelConfig(latent_dim=4, input_size=8, encoder_widths=(4, 8))


@pytest.fixture
def tiny_config() -> ModelConfig:
    return TINY


@pytest.fixture
def tiny_model() -> ConstrainedVAE:
    torch.manual_seed(0)
    return ConstrainedVAE(TINY)


@pytest.fixture
def tiny_images() -> torch.Tensor:
    generator = torch.Generator().manual_seed(1)
    return torch.rand(6, 1, 8, 8, generator=generator)


@pytest.fixture
def small_synth() -> SynthConfig:
    return SynthConfig(
        n_train_scans=2,
        n_val_scans=1,
        n_test_scans=2,
        slices_per_scan=3,
        image_size=16,
        blob_radius=(1.5, 3.0),
        seed=7,
    )


@pytest.fixture
def experiment_document(small_synth) -> dict:
    """A complete experiment small enough to synthesize, train and evaluate in seconds."""
    return {
        "data": small_synth.model_dump(mode="json"),
        "model": {"latent_dim": 4, "input_size": 16, "encoder_widths": [4, 8]},
        "train": {"warmup_steps": 2, "total_steps": 4, "batch_size": 4, "log_every": 2},
        "repetitions": 2,
        "n_panels": 1,
    }


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
