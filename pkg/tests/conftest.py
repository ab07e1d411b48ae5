import pytest
import torch

from cpe.augment import AugmentConfig
from cpe.data import SplitSpec, build_split, gaussian_mixture
from cpe.model import build_model
from cpe.trainer import TrainConfig, TrainData


@pytest.fixture(scope="session")
def tiny_corpus():
    return gaussian_mixture(num_classes=9, dim=6, per_class=200, test_per_class=40,
                            separation=4.0, seed=7)


@pytest.fixture
def tiny_split(tiny_corpus):
    return build_split(tiny_corpus.y, SplitSpec(9, 40, 12, 10, "inverse", seed=0))


@pytest.fixture
def tiny_data(tiny_corpus, tiny_split):
    return TrainData.from_split(tiny_corpus, tiny_split)


def tiny_config(**kw):
    base = dict(labeled_batch=16, unlabeled_batch=32, total_steps=5, eval_interval=0,
                checkpoint_interval=0, augment=AugmentConfig(kind="vector"))
    base.update(kw)
    return TrainConfig(**base)


def tiny_model(experts=3, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return build_model({"kind": "mlp", "in_dim": 6, "hidden": [16]}, 9, experts).to(dtype)


# acceptance criteria register a (status, detail) line here; printed at the end of the run
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
