import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
os.environ.setdefault("IGFLAB_DATA_DIR", str(ROOT / "data"))

from igflab.fedsim import set_deterministic  # noqa: E402

set_deterministic()


def mnist_available() -> bool:
    root = Path(os.environ["IGFLAB_DATA_DIR"]) / "mnist"
    return any(root.glob("train-images-idx3-ubyte*"))


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(0)
