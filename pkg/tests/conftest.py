import shutil
from pathlib import Path

import pytest

from weightmask.config import from_dict

DATA = Path(__file__).parent / "data"


def tiny(task="addmul", sizes=(42, 24, 20), stages=None, **sections):
    raw = {
        "experiment": {"task": task, "seeds": [0]},
        "model": {"sizes": list(sizes)},
        "optim": {"batch_size": 16},
        "weights": {"steps": 20},
        "mask": {"steps": 10, "k": 2, "beta": 1e-4},
        "eval": {"samples": 64},
        "stages": stages if stages is not None else [{"name": "add", "filter": "op=add"},
                                                     {"name": "mul", "filter": "op=mul"}],
    }
    for k, v in sections.items():
        raw.setdefault(k, {}).update(v)
    return from_dict(raw)


@pytest.fixture
def mini_mnist_dir(tmp_path):
    """The checked-in 64-image IDX pair, laid out under the standard MNIST file names."""
    for prefix in ("train", "t10k"):
        shutil.copy(DATA / "mini-images-idx3-ubyte", tmp_path / f"{prefix}-images-idx3-ubyte")
        shutil.copy(DATA / "mini-labels-idx1-ubyte", tmp_path / f"{prefix}-labels-idx1-ubyte")
    return tmp_path


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
