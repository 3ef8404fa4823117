import numpy as np
import pytest
import torch

from fadiff.data import DatasetSpec, synth_dataset
from fadiff.expert import ExpertConfig, ExpertTrainConfig, train_expert
from fadiff.unet import UNetConfig


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_dataset():
    """8 classes of 16x16 images, 20 per class."""
    return synth_dataset(DatasetSpec(samples_per_class=20, image_size=16, seed=3))


@pytest.fixture(scope="session")
def tiny_unet_config():
    return UNetConfig(image_size=16, base_channels=8, channel_multipliers=(1, 2, 4),
                      num_classes=8, time_embed_dim=16, norm_groups=4)


@pytest.fixture(scope="session")
def tiny_expert(tiny_dataset):
    expert, _ = train_expert(tiny_dataset, ExpertConfig(num_classes=8, image_size=16),
                             ExpertTrainConfig(epochs=3, batch_size=32), seed=1)
    return expert


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture()
def acceptance_record(request):
    """Callable recording one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        status = "PASS" if passed else "FAIL"
        lines[number] = f"{status}  criterion {number}: {title}" + (f"  [{detail}]" if detail else "")
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
