import numpy as np
import pytest

from dopprune.autodiff import Conv2d, Dense, Flatten, LabeledBatch, MaxPool2d, ReLU
from dopprune.model_zoo import NetworkSpec, init_params


def tiny_mlp(classes=3, n_in=6, hidden=8):
    layers = (Flatten(), Dense(n_in, hidden), ReLU(), Dense(hidden, classes))
    return NetworkSpec("tiny_mlp", (n_in,), layers, classes, bottleneck=1)


def tiny_cnn(classes=3, size=6, channels=2):
    layers = (Conv2d(channels, 3), ReLU(), MaxPool2d(2), Flatten(),
              Dense((size // 2) ** 2 * 3, 5), ReLU(), Dense(5, classes))
    return NetworkSpec("tiny_cnn", (size, size, channels), layers, classes, bottleneck=4)


def random_batch(spec, n=5, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, *spec.input_shape))
    y = rng.integers(0, spec.classes, size=n)
    return LabeledBatch(x, y)


@pytest.fixture
def mlp_case():
    spec = tiny_mlp()
    return spec, init_params(spec, 1), random_batch(spec)


@pytest.fixture
def cnn_case():
    spec = tiny_cnn()
    return spec, init_params(spec, 2), random_batch(spec, seed=3)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
