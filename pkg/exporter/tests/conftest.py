import numpy as np
import pytest
from PIL import Image as PilImage


def write_png(path, arr):
    PilImage.fromarray(arr, "RGB").save(path)


@pytest.fixture
def image_dir(tmp_path):
    rng = np.random.default_rng(7)
    d = tmp_path / "imgs"
    d.mkdir()
    for name in ("alpha", "beta", "gamma"):
        arr = (rng.random((64, 64, 3)) * 255).astype(np.uint8)
        write_png(d / f"{name}.png", arr)
    return d
