import pytest

from eisderm.harness import ExperimentConfig
from eisderm.stats import StatsConfig
from eisderm.synth import GeneratorConfig
from eisderm.training import TrainConfig


@pytest.fixture
def tiny_config():
    """A seconds-scale experiment: 20 small lesions, one epoch per model."""
    one = TrainConfig(epochs=1, batch_size=8, lr=1e-3)
    return ExperimentConfig(
        model_tag="gru-max",
        generator=GeneratorConfig(n_lesions=20, seed=7, image_size=16),
        eis_train=one, cnn_train=one, joint_train=one,
        n_crops=4, n_perm=2, crop_size=8,
        stats=StatsConfig(n_ci=50, n_perm=50, seed=7),
        seed=7,
    )
