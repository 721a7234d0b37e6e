import pytest

from cankd.config import ExperimentConfig

TINY = {
    "epochs": 2,
    "batch_size": 8,
    "teacher.epochs": 2,
    "data.height": 16,
    "data.width": 16,
    "data.train_size": 16,
    "data.val_size": 8,
}


def tiny_config(**overrides) -> ExperimentConfig:
    """Seconds-scale variant of the default experiment."""
    return ExperimentConfig().replace(**{**TINY, **overrides})


@pytest.fixture
def tiny():
    return tiny_config
