import numpy as np
import pytest

from csnt.fields import Grid, ScalarField, VectorField, _irfft


def band_limited_scalar(grid: Grid, seed: int, kmax: int = 5,
                        amplitude: float = 1.0) -> ScalarField:
    """Random real field supported on modes |k| <= kmax (mean zero)."""
    rng = np.random.default_rng(seed)
    shape = grid.shape[:-1] + (grid.n // 2 + 1,)
    spec = np.zeros(shape, dtype=complex)
    sl = (slice(1, kmax + 1),) * grid.dim
    spec[sl] = rng.standard_normal(spec[sl].shape) + 1j * rng.standard_normal(spec[sl].shape)
    vals = _irfft(spec, grid)
    peak = np.max(np.abs(vals))
    if peak > 0:
        vals *= amplitude / peak
    return ScalarField(grid, vals)


def band_limited_vector(grid: Grid, seed: int, kmax: int = 5,
                        amplitude: float = 1.0) -> VectorField:
    """Random mean-zero velocity supported on modes |k| <= kmax."""
    rng = np.random.default_rng(seed)
    shape = (grid.dim,) + grid.shape[:-1] + (grid.n // 2 + 1,)
    spec = np.zeros(shape, dtype=complex)
    sl = (slice(None),) + (slice(1, kmax + 1),) * grid.dim
    spec[sl] = rng.standard_normal(spec[sl].shape) + 1j * rng.standard_normal(spec[sl].shape)
    vals = _irfft(spec, grid)
    vals -= vals.mean(axis=tuple(range(1, vals.ndim)), keepdims=True)
    peak = np.max(np.abs(vals))
    if peak > 0:
        vals *= amplitude / peak
    return VectorField(grid, vals)


@pytest.fixture(scope="session")
def grid32():
    return Grid(2, 32)


@pytest.fixture(scope="session")
def grid64():
    return Grid(2, 64)
