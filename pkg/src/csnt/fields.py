"""Periodic fields on the 2*pi torus and their spectral calculus.

Fields are real float64 samples on the uniform tensor grid of [0, 2*pi)^d,
stored in physical space; Fourier space is transient (real FFTs).  Component
axes come first: scalars have shape (n,)*d, vectors (d, n, ..., n), tensors
(d, d, n, ..., n).

Conventions baked into the operators:

* derivative multipliers i*k zero the Nyquist mode, so every d/dx_j is an
  exactly skew-adjoint matrix on grid functions,
* laplacian_power and inverse_laplacian_zero_mean use the full |k|^2
  including the Nyquist contribution,
* nonlinear products formed pointwise must go through dealias() (2/3 rule)
  before they are differentiated spectrally.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, SnapshotFormatError

TORUS_SIDE = 2.0 * np.pi

SNAPSHOT_MAGIC = b"CSNT1\x00"


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid: `n` points per axis on the d-torus of side 2*pi."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.n < 8 or not _is_power_of_two(self.n):
            raise ValueError(f"n must be a power of two >= 8, got {self.n}")
        if self.n ** self.dim > 2 ** 40:
            raise ValueError("grid too large for in-memory fields")

    @property
    def spacing(self) -> float:
        return TORUS_SIDE / self.n

    @property
    def volume(self) -> float:
        return TORUS_SIDE ** self.dim

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    def axis_coords(self) -> np.ndarray:
        return np.arange(self.n) * self.spacing

    def meshes(self) -> list:
        """Broadcast coordinate arrays x1..xd (indexing='ij')."""
        return list(np.meshgrid(*[self.axis_coords()] * self.dim, indexing="ij"))


@functools.lru_cache(maxsize=None)
def _wavenumbers(dim: int, n: int):
    """Per-axis wavenumber arrays in rfft layout, broadcastable over the grid.

    Returns (k_deriv, k_full): k_deriv has the Nyquist entry zeroed, k_full
    keeps it.  The last spatial axis is the half-spectrum rfft axis.
    """
    k_deriv, k_full = [], []
    for axis in range(dim):
        if axis == dim - 1:
            k = np.fft.rfftfreq(n, d=1.0 / n)  # 0 .. n/2
        else:
            k = np.fft.fftfreq(n, d=1.0 / n)  # 0 .. n/2-1, -n/2 .. -1
        kd = k.copy()
        kd[np.abs(kd) == n // 2] = 0.0
        shape = [1] * dim
        shape[axis] = k.size
        k_full.append(k.reshape(shape))
        k_deriv.append(kd.reshape(shape))
    for arr in (*k_deriv, *k_full):
        arr.flags.writeable = False
    return tuple(k_deriv), tuple(k_full)


@functools.lru_cache(maxsize=None)
def _k_squared(dim: int, n: int) -> np.ndarray:
    _, k_full = _wavenumbers(dim, n)
    ksq = sum(k * k for k in k_full)
    ksq.flags.writeable = False
    return ksq


@functools.lru_cache(maxsize=None)
def _inv_k_squared(dim: int, n: int) -> np.ndarray:
    ksq = _k_squared(dim, n)
    inv = np.zeros_like(ksq)
    np.divide(1.0, ksq, out=inv, where=ksq > 0)
    inv.flags.writeable = False
    return inv


@functools.lru_cache(maxsize=None)
def _dealias_mask(dim: int, n: int) -> np.ndarray:
    """2/3-rule mask: keep modes with |k_j| <= n//3 on every axis."""
    _, k_full = _wavenumbers(dim, n)
    cutoff = n // 3
    mask = np.ones((1,) * dim, dtype=bool)
    for k in k_full:
        mask = mask & (np.abs(k) <= cutoff)
    mask.flags.writeable = False
    return mask


def _spatial_axes(values: np.ndarray, grid: Grid) -> tuple:
    return tuple(range(values.ndim - grid.dim, values.ndim))


def _rfft(values: np.ndarray, grid: Grid) -> np.ndarray:
    return np.fft.rfftn(values, axes=_spatial_axes(values, grid))


def _irfft(spec: np.ndarray, grid: Grid) -> np.ndarray:
    axes = tuple(range(spec.ndim - grid.dim, spec.ndim))
    return np.fft.irfftn(spec, s=grid.shape, axes=axes)


def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        bad = int(np.count_nonzero(~np.isfinite(values)))
        raise NonFiniteError(f"{what}: {bad} non-finite values")


class _Field:
    kind = "field"
    _lead_shape: tuple = ()

    def __init__(self, grid: Grid, values):
        values = np.asarray(values, dtype=np.float64)
        lead = tuple(n if n > 0 else grid.dim for n in self._lead_shape)
        expected = lead + grid.shape
        if values.shape != expected:
            raise ValueError(
                f"{self.kind} values must have shape {expected}, got {values.shape}"
            )
        _check_finite(values, self.kind)
        self.grid = grid
        self.values = values

    def copy(self):
        return type(self)(self.grid, self.values.copy())

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.grid.dim}, n={self.grid.n})"


class ScalarField(_Field):
    kind = "scalar"
    _lead_shape = ()


class VectorField(_Field):
    kind = "vector"
    _lead_shape = (-1,)


class TensorField(_Field):
    kind = "tensor"
    _lead_shape = (-1, -1)


def constant_field(grid: Grid, value: float) -> ScalarField:
    return ScalarField(grid, np.full(grid.shape, float(value)))


def zero_vector_field(grid: Grid) -> VectorField:
    return VectorField(grid, np.zeros((grid.dim,) + grid.shape))


def magnitude(field) -> np.ndarray:
    """Pointwise |f|: absolute value, Euclidean norm or Frobenius norm."""
    if isinstance(field, ScalarField):
        return np.abs(field.values)
    lead = field.values.ndim - field.grid.dim
    sq = np.sum(field.values ** 2, axis=tuple(range(lead)))
    return np.sqrt(sq)


def mean(f: ScalarField) -> float:
    """{f}: the average of f over the torus."""
    return float(np.mean(f.values))


def integral(f: ScalarField) -> float:
    """Integral of f over the torus (grid-average quadrature)."""
    return float(np.mean(f.values)) * f.grid.volume


def inner(a, b) -> float:
    """L^2 pairing of two same-shaped fields over the torus."""
    if a.grid != b.grid or a.values.shape != b.values.shape:
        raise ValueError("inner product needs fields on one grid, same rank")
    return float(np.mean(a.values * b.values)) * a.grid.volume * _lead_size(a)


def _lead_size(field) -> int:
    lead = field.values.ndim - field.grid.dim
    return int(np.prod(field.values.shape[:lead], dtype=np.int64)) if lead else 1


def lp_norm(field, p) -> float:
    """L^p norm of a field, p >= 1 or inf; vectors/tensors use |.| pointwise."""
    mag = magnitude(field)
    if p == np.inf or p == "inf":
        return float(np.max(mag))
    p = float(p)
    if p < 1.0:
        raise ValueError(f"lp_norm needs p >= 1, got {p}")
    return float((np.mean(mag ** p) * field.grid.volume) ** (1.0 / p))


def project_zero_mean(u: VectorField) -> VectorField:
    """Subtract the componentwise means."""
    axes = _spatial_axes(u.values, u.grid)
    return VectorField(u.grid, u.values - u.values.mean(axis=axes, keepdims=True))


def component_means(u: VectorField) -> np.ndarray:
    return u.values.mean(axis=_spatial_axes(u.values, u.grid))


def gradient(f: ScalarField) -> VectorField:
    g = f.grid
    kd, _ = _wavenumbers(g.dim, g.n)
    spec = _rfft(f.values, g)
    comps = [_irfft(1j * kd[j] * spec, g) for j in range(g.dim)]
    return VectorField(g, np.stack(comps))


def jacobian(u: VectorField) -> TensorField:
    """J_ij = d u_i / d x_j, spectral."""
    g = u.grid
    kd, _ = _wavenumbers(g.dim, g.n)
    spec = _rfft(u.values, g)
    rows = [
        [_irfft(1j * kd[j] * spec[i], g) for j in range(g.dim)]
        for i in range(g.dim)
    ]
    return TensorField(g, np.array(rows))


def symmetric_gradient(u: VectorField) -> TensorField:
    J = jacobian(u).values
    lead = (0, 1)
    return TensorField(u.grid, 0.5 * (J + np.swapaxes(J, *lead)))


def divergence(u: VectorField) -> ScalarField:
    g = u.grid
    kd, _ = _wavenumbers(g.dim, g.n)
    spec = _rfft(u.values, g)
    acc = sum(1j * kd[j] * spec[j] for j in range(g.dim))
    return ScalarField(g, _irfft(acc, g))


def divergence_tensor(S: TensorField) -> VectorField:
    """Row-wise divergence: (div S)_i = sum_j d S_ij / d x_j."""
    g = S.grid
    kd, _ = _wavenumbers(g.dim, g.n)
    spec = _rfft(S.values, g)
    comps = [
        _irfft(sum(1j * kd[j] * spec[i, j] for j in range(g.dim)), g)
        for i in range(g.dim)
    ]
    return VectorField(g, np.stack(comps))


def laplacian_power(field, k: int):
    """(Delta^k f) as the Fourier multiplier (-|xi|^2)^k; mean mode -> 0."""
    if int(k) != k or k < 1:
        raise ValueError(f"laplacian_power needs integer k >= 1, got {k}")
    g = field.grid
    mult = (-_k_squared(g.dim, g.n)) ** int(k)
    return type(field)(g, _irfft(mult * _rfft(field.values, g), g))


def inverse_laplacian_zero_mean(f: ScalarField) -> ScalarField:
    """psi with Delta psi = f - {f} and {psi} = 0."""
    g = f.grid
    inv = _inv_k_squared(g.dim, g.n)
    return ScalarField(g, _irfft(-inv * _rfft(f.values, g), g))


def dealias(field):
    """Project away modes above the 2/3 cutoff (applied on every axis)."""
    g = field.grid
    mask = _dealias_mask(g.dim, g.n)
    return type(field)(g, _irfft(mask * _rfft(field.values, g), g))


def dealias_values(values: np.ndarray, grid: Grid) -> np.ndarray:
    mask = _dealias_mask(grid.dim, grid.n)
    return _irfft(mask * _rfft(values, grid), grid)


def w1inf_norm(u: VectorField) -> float:
    """||u||_inf + ||grad u||_inf with pointwise Euclidean/Frobenius magnitudes."""
    return lp_norm(u, np.inf) + lp_norm(jacobian(u), np.inf)


# ---------------------------------------------------------------------------
# binary snapshots and scalar series
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<6sIId")


def write_snapshot(path, field, time: float):
    """Write a field in the CSNT1 binary snapshot format.

    Header: magic "CSNT1\\0", little-endian u32 dim, u32 n, f64 time.
    Payload: row-major f64 samples, components interleaved per point.
    """
    g = field.grid
    lead = field.values.ndim - g.dim
    if lead:
        payload = np.moveaxis(
            field.values.reshape((-1,) + g.shape), 0, -1
        )
    else:
        payload = field.values
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SNAPSHOT_MAGIC, g.dim, g.n, float(time)))
        fh.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())


def read_snapshot(path):
    """Read a CSNT1 snapshot; returns (field, time).

    The field rank is inferred from the payload size: 1 component -> scalar,
    d -> vector, d*d -> tensor (for d = 1 the scalar reading is returned).
    """
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise SnapshotFormatError(f"{path}: truncated header")
        magic, dim, n, time = _HEADER.unpack(head)
        if magic != SNAPSHOT_MAGIC:
            raise SnapshotFormatError(f"{path}: bad magic bytes {magic!r}")
        raw = fh.read()
    try:
        grid = Grid(int(dim), int(n))
    except ValueError as exc:
        raise SnapshotFormatError(f"{path}: {exc}") from exc
    npoints = grid.n ** grid.dim
    count = len(raw) // 8
    if len(raw) % 8 or count % npoints:
        raise SnapshotFormatError(f"{path}: payload size {len(raw)} not a field")
    ncomp = count // npoints
    data = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if ncomp == 1:
        field = ScalarField(grid, data.reshape(grid.shape))
    elif ncomp == grid.dim:
        vals = np.moveaxis(data.reshape(grid.shape + (ncomp,)), -1, 0)
        field = VectorField(grid, np.ascontiguousarray(vals))
    elif ncomp == grid.dim ** 2:
        vals = np.moveaxis(data.reshape(grid.shape + (ncomp,)), -1, 0)
        vals = vals.reshape((grid.dim, grid.dim) + grid.shape)
        field = TensorField(grid, np.ascontiguousarray(vals))
    else:
        raise SnapshotFormatError(
            f"{path}: {ncomp} components match no scalar/vector/tensor on d={grid.dim}"
        )
    return field, float(time)


def write_scalar_series(path, times, values, header=("t", "value")):
    """CSV export of a scalar time series, 17 significant digits."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.shape != values.shape:
        raise ValueError("times and values must have equal length")
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for t, v in zip(times, values):
            fh.write(f"{t:.17g},{v:.17g}\n")
