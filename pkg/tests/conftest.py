import numpy as np
import pytest
import torch

from anomaly_bench.data import Modality, Slice, generate_healthy


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def healthy32():
    return generate_healthy(seed=7, n=24, size=32, modality=Modality.T2LIKE)


@pytest.fixture
def float64_torch():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


def make_slice(pixels, mask=None, modality=Modality.T1LIKE, subject_id="s", index=0) -> Slice:
    pixels = np.asarray(pixels, dtype=np.float32)
    if mask is None:
        mask = np.ones(pixels.shape, dtype=bool)
    return Slice(pixels, mask, modality, subject_id, index)


def write_config(path, body: str, output_dir) -> str:
    path.write_text(f'seed = 0\noutput_dir = "{output_dir}"\n{body}')
    return str(path)
