import numpy as np
import pytest

from udfforge.field import FieldArch, init_field


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_field():
    return init_field(FieldArch(num_layers=4, hidden_width=32, encoding_frequencies=3), seed=7)


@pytest.fixture(scope="session")
def default_field():
    return init_field(FieldArch(), seed=0)


def central_diff_input(field, p, h=1e-4):
    """Independent oracle: central differences of eval along each axis."""
    out = np.zeros_like(p)
    for d in range(3):
        e = np.zeros(3)
        e[d] = h
        out[:, d] = (field.eval(p + e) - field.eval(p - e)) / (2 * h)
    return out


def activation_pattern(field, p):
    # recompute the forward pass by hand, independent of NeuralField._forward
    from udfforge.field import encode

    h = encode(p, field.arch.encoding_frequencies)
    signs = []
    for i, (W, b) in enumerate(zip(field.weights, field.biases)):
        z = h @ W + b
        signs.append(z > 0)
        h = np.maximum(z, 0)
    return np.concatenate(signs, axis=1)


def generic_points(field, n, rng, h=1e-4, margin=1e-6):
    """Points whose activation pattern is stable over the +-h stencil."""
    pts = []
    while len(pts) < n:
        p = rng.uniform(-1, 1, size=(4 * n, 3))
        pat = activation_pattern(field, p)
        ok = np.ones(len(p), bool)
        for d in range(3):
            for s in (h, -h):
                q = p.copy()
                q[:, d] += s
                ok &= np.all(activation_pattern(field, q) == pat, axis=1)
        ok &= field.min_abs_preactivation(p) > margin
        pts.extend(p[ok])
    return np.array(pts[:n])


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
