import numpy as np
import pytest
import torch
from PIL import Image

from facechannel.model import ModelConfig

ACCEPTANCE_LINES: list[str] = []

# 10 convs, 4 pools, few channels: fast enough for unit tests
TINY = ModelConfig(input_size=16, channel_plan=(2, 2, 3, 3, 4, 4, 4, 4, 4, 4), dense_units=8)
SMALL = ModelConfig(input_size=32, channel_plan=(4, 4, 8, 8, 8, 8, 8, 16, 16, 16), dense_units=32)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def write_png(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        array = np.clip(np.round(array * 255), 0, 255).astype(np.uint8)
    mode = {2: "L", 3: "RGB"}[array.ndim] if array.ndim == 2 or array.shape[2] == 3 else "RGBA"
    Image.fromarray(array, mode).save(path)
    return path


@pytest.fixture
def faces(tmp_path):
    """Twelve rendered faces at 32 px with labels and keypoints."""
    from facechannel.synthetic import write_synthetic_dataset

    return write_synthetic_dataset(tmp_path / "faces", 12, seed=3, size=32)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
