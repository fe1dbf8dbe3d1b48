from pathlib import Path
import sys

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import pytest  # noqa: E402
import structlog  # noqa: E402

from app.datasets import synth_dataset  # noqa: E402
from app.knowledge_base import build_knowledge_base  # noqa: E402
from app.model_zoo import HeadSpec, build_seed, make_arch, train_seed  # noqa: E402
from app.training import OptimConfig  # noqa: E402

TINY_IMAGE = 16
TINY_CLASSES = 4
TINY_C = 3


def pytest_addoption(parser) -> None:
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_configure(config) -> None:
    config.addinivalue_line("markers", "slow: end-to-end runs skipped unless --runslow is given")


def pytest_collection_modifyitems(config, items) -> None:
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_specs(head_hidden=(8,)):
    """Two narrow seeds whose widths exercise ext-chp, ext-chdp, chp and chdp."""
    head = HeadSpec.from_hidden(head_hidden, TINY_CLASSES)
    return [
        make_arch("tiny-plain", "plain", (4, 8, 12), TINY_C, head),
        make_arch("tiny-residual", "residual", (6, 4, 8), TINY_C, head),
    ]


@pytest.fixture
def tiny_arch_specs():
    return tiny_specs()


@pytest.fixture(scope="session")
def tiny_dataset():
    return synth_dataset(
        3,
        TINY_CLASSES,
        20,
        image_size=TINY_IMAGE,
        noise=0.3,
        val_fraction=0.25,
        test_fraction=0.25,
    )


@pytest.fixture(scope="session")
def tiny_seeds(tiny_dataset):
    seeds = []
    for index, spec in enumerate(tiny_specs()):
        network = build_seed(spec, 100 + index, TINY_IMAGE)
        train_seed(network, tiny_dataset, 1, OptimConfig(0.05, 0.9, 0.0, 16), seed=index, name=spec.name)
        seeds.append((spec, network))
    return seeds


@pytest.fixture(scope="session")
def tiny_kb(tiny_seeds):
    return build_knowledge_base(tiny_seeds, c=TINY_C, input_size=TINY_IMAGE)


@pytest.fixture(autouse=True)
def _reset_logging():
    """CLI invocations bind structlog to the runner's stderr; drop it afterwards."""
    yield
    structlog.reset_defaults()
    structlog.contextvars.clear_contextvars()
