import numpy as np
import pytest

from canonica.fields import ModelConfig, SceneModel

SMALL_ARCH = dict(field_layers=3, field_width=16, field_bands=3,
                  coupling_layers=6, coupling_width=16, coupling_bands=2, latent_dim=4)


def randomize(model: SceneModel, seed: int = 1, scale: float = 1.0) -> SceneModel:
    """Give the zero-initialized output layers init-scale random values."""
    rng = np.random.default_rng(seed)
    for name, node in model.params.items():
        if np.all(node.value == 0):
            fan_in = node.shape[0] if node.ndim == 2 else 16
            bound = scale / np.sqrt(fan_in)
            node.assign(rng.uniform(-bound, bound, node.shape))
    return model


@pytest.fixture
def small_model():
    return SceneModel(ModelConfig(n_frames=4, height=12, width=12, **SMALL_ARCH), seed=0)


@pytest.fixture
def random_model(small_model):
    return randomize(small_model)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def record(number: int, ok: bool, detail: str) -> None:
    line = f"acceptance {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
