import numpy as np
import pytest

from ovmil.preprocess.stain import od_to_rgb


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def stain_pair(angle_deg, rng=None):
    """Two positive unit OD vectors separated by ``angle_deg`` degrees."""
    rng = rng or np.random.default_rng(0)
    for _ in range(10_000):
        a = unit(rng.uniform(0.2, 1.0, 3))
        perp = unit(np.cross(a, rng.normal(size=3)))
        theta = np.deg2rad(angle_deg)
        b = np.cos(theta) * a + np.sin(theta) * perp
        if (b > 0.05).all():
            return np.column_stack([a, unit(b)])
    raise ValueError(f"no positive stain pair found {angle_deg} degrees apart")


def two_stain_concentrations(n, rng, pure_fraction=0.1, low=0.3, high=1.2):
    """Concentrations with ``pure_fraction`` of rows single-stain for each stain."""
    c = rng.uniform(low, high, size=(n, 2))
    n_pure = int(pure_fraction * n)
    c[:n_pure, 1] = 0.0
    c[n_pure:2 * n_pure, 0] = 0.0
    return c


def render_od(conc, stains, shape):
    """Unrounded RGB intensities for OD = conc @ stains.T."""
    return od_to_rgb(conc @ stains.T).reshape(shape + (3,))


def he_like_tile(rng, size=64, background=True):
    """Smooth pink/purple tissue-like tile, optionally with a white background strip."""
    stains = np.array([[0.65, 0.07], [0.70, 0.99], [0.29, 0.11]])
    stains = stains / np.linalg.norm(stains, axis=0)
    yy, xx = np.mgrid[0:size, 0:size] / size
    c1 = 0.6 + 0.4 * np.sin(6 * xx + rng.uniform(0, 6)) * np.cos(4 * yy)
    c2 = 0.5 + 0.3 * np.cos(5 * yy + rng.uniform(0, 6))
    conc = np.stack([c1.ravel(), c2.ravel()], axis=1).clip(0)
    conc *= rng.uniform(0.8, 1.2, size=conc.shape)
    if background:
        conc[: size * size // 8] = 0.0
    rgb = render_od(conc, stains, (size, size))
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
