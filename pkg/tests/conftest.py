import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gradunlearn.cli import main  # noqa: E402
from gradunlearn.data import load_fixture  # noqa: E402
from gradunlearn.experiment import DESK_TRAIN, ExperimentConfig  # noqa: E402
from gradunlearn.model import ModelConfig, init_model  # noqa: E402
from gradunlearn.train import train  # noqa: E402

CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(CRITERIA):
        terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion, then assert it."""

    def record(number: int, name: str, ok: bool, detail: str):
        CRITERIA.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {name}  ({detail})")
        assert ok, f"criterion {number} ({name}) failed: {detail}"

    return record


@pytest.fixture(scope="session")
def dave():
    return load_fixture("dave")


@pytest.fixture(scope="session")
def desk(dave):
    """The desk-scale model trained on the Dave fixture with the default preset."""
    cfg = ExperimentConfig()
    p0 = init_model(cfg.model_config(dave.tokenizer.vocab_size))
    return p0, train(p0, dave, DESK_TRAIN)


@pytest.fixture
def tiny():
    cfg = ModelConfig(vocab_size=11, context_len=8, embed_dim=8, num_blocks=1, num_heads=2, seed=3)
    return init_model(cfg)


def jitter(params, scale=0.1, seed=0):
    """Random offsets on every parameter so norms and biases are not at their init values."""
    rng = np.random.default_rng(seed)
    return params.replace({k: v + rng.normal(0.0, scale, v.shape) for k, v in params.layers.items()})


QUICK = ["--set", "model.embed_dim=16", "--set", "model.num_blocks=1", "--set", "train.epochs=3"]
QUICK_UNLEARN = ["--max-iters", "20", "--eval-every", "10"]


def run_pipeline(out: Path, train_args=(), unlearn_args=()):
    """train, unlearn and report through the command line; returns exit codes and timings."""
    codes, times = {}, {}
    for name, extra in (("train", train_args), ("unlearn", unlearn_args), ("report", ())):
        start = time.perf_counter()
        codes[name] = main([name, "-o", str(out), *extra])
        times[name] = time.perf_counter() - start
    return codes, times


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """The default desk experiment, run end to end once per session."""
    out = tmp_path_factory.mktemp("pipeline")
    codes, times = run_pipeline(out)
    return out, codes, times


@pytest.fixture(scope="session")
def quick(tmp_path_factory):
    """A shrunken model and short runs, for checking artifact contracts quickly."""
    out = tmp_path_factory.mktemp("quick")
    codes, _ = run_pipeline(out, QUICK, QUICK + QUICK_UNLEARN)
    assert codes == {"train": 0, "unlearn": 0, "report": 0}, codes
    return out
