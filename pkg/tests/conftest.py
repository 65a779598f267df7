import pytest

from posedistill.codec import SimCCConfig
from posedistill.model import ModelConfig
from posedistill.synth import GenConfig, PoseDataset, generate_dataset

SMOKE_GEN = GenConfig(num_samples=250, seed=11, unlabeled_rate=0.2)
TINY_STUDENT = ModelConfig(backbone_channels=[4, 8], feature_dim=8, head_hidden=32)
TINY_TEACHER = ModelConfig(backbone_channels=[8, 16], feature_dim=16, head_hidden=32)


@pytest.fixture(scope="session")
def smoke_root(tmp_path_factory):
    """250 samples: 200 train / 25 val / 25 test."""
    root = tmp_path_factory.mktemp("smoke")
    generate_dataset(SMOKE_GEN, root)
    return root


@pytest.fixture(scope="session")
def smoke_splits(smoke_root):
    sc = SimCCConfig()
    return PoseDataset.from_dir(smoke_root, "train", sc), PoseDataset.from_dir(smoke_root, "val", sc)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
