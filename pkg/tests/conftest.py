import os
import struct
from pathlib import Path

import numpy as np
import pytest

from ddrid.data import MNIST_FILES, load_mnist
from ddrid.nn.layers import autoencoder_specs

MNIST_DIR = Path(os.environ.get("DDRID_MNIST_DIR", os.environ.get("DDRID_DATA_DIR", "/root/data/mnist")))
CIFAR_DIR = Path(os.environ.get("DDRID_CIFAR_DIR", "/root/data/cifar10"))


def write_idx_images(path, images: np.ndarray) -> None:
    n, h, w = images.shape
    Path(path).write_bytes(struct.pack(">IIII", 0x803, n, h, w) + images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    Path(path).write_bytes(struct.pack(">II", 0x801, len(labels)) + np.asarray(labels, np.uint8).tobytes())


def mnist_available() -> bool:
    return all((MNIST_DIR / f).exists() or (MNIST_DIR / f"{f}.gz").exists() for f in MNIST_FILES.values())


needs_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST files not found in {MNIST_DIR}")


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    if not mnist_available():
        pytest.skip(f"MNIST files not found in {MNIST_DIR}")
    return MNIST_DIR


@pytest.fixture(scope="session")
def mini_mnist_dir(tmp_path_factory) -> Path:
    """A small MNIST-format dataset: 400 train / 200 test records.

    Taken from the real files when present, otherwise synthesised blobs.
    """
    out = tmp_path_factory.mktemp("mini_mnist")
    if mnist_available():
        train = load_mnist(MNIST_DIR / MNIST_FILES["train_images"], MNIST_DIR / MNIST_FILES["train_labels"])
        test = load_mnist(MNIST_DIR / MNIST_FILES["test_images"], MNIST_DIR / MNIST_FILES["test_labels"])
        tr_x, tr_y = train.pixels[:400, 0], train.labels[:400]
        te_x, te_y = test.pixels[:200, 0], test.labels[:200]
    else:
        rng = np.random.default_rng(0)
        tr_y, te_y = np.arange(400) % 10, np.arange(200) % 10
        yy, xx = np.mgrid[:28, :28]

        def blobs(labels):
            cx = 6 + 1.6 * labels[:, None, None]
            img = 255 * np.exp(-((xx - cx) ** 2 + (yy - 14) ** 2) / 18.0)
            return np.clip(img + rng.normal(0, 10, img.shape), 0, 255).astype(np.uint8)

        tr_x, te_x = blobs(tr_y), blobs(te_y)
    write_idx_images(out / MNIST_FILES["train_images"], tr_x)
    write_idx_labels(out / MNIST_FILES["train_labels"], tr_y)
    write_idx_images(out / MNIST_FILES["test_images"], te_x)
    write_idx_labels(out / MNIST_FILES["test_labels"], te_y)
    return out


@pytest.fixture
def toy_specs():
    """Encoder/decoder/discriminator for 1x8x8 images with a 4-d latent."""
    return autoencoder_specs(1, 8, 4, widths=(4, 8), disc_widths=(8, 4, 4))


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
