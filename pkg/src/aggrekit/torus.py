"""Periodic grids, spectral transforms and differential operators on the torus.

Fourier coefficients use the continuous normalization

    c(xi) = int_T f(x) exp(-i xi.x) dx  ~  cell_volume * FFT(f),

so the inverse is f = (1/volume) sum_xi c(xi) exp(i xi.x), periodic
convolution is a plain coefficient product, and a constant field f = 1 has
c(0) = volume. All transforms act on the trailing ``ndim`` axes, so leading
batch axes (species, probes) pass through untouched.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.fft as sfft

from .errors import GridError

_WORKERS = 1


def set_workers(n: int) -> None:
    """Thread count used by the FFT backend (results do not depend on it)."""
    global _WORKERS
    _WORKERS = max(1, int(n))


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid with nodes x_j = j * period / points."""

    shape: tuple
    period: tuple = None

    def __post_init__(self):
        shape = tuple(int(n) for n in np.atleast_1d(self.shape))
        if len(shape) not in (1, 2):
            raise GridError(f"ndim must be 1 or 2, got {len(shape)}")
        for n in shape:
            if not _is_pow2(n):
                raise GridError(f"points per axis must be powers of two, got {n}")
        period = self.period
        if period is None:
            period = (1.0,) * len(shape)
        period = tuple(float(p) for p in np.atleast_1d(period))
        if len(period) == 1 and len(shape) > 1:
            period = period * len(shape)
        if len(period) != len(shape):
            raise GridError("period and shape have different lengths")
        if any(not np.isfinite(p) or p <= 0 for p in period):
            raise GridError(f"periods must be positive, got {period}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "period", period)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> tuple:
        return tuple(p / n for p, n in zip(self.period, self.shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.period))

    @property
    def axes_index(self) -> tuple:
        return tuple(range(-self.ndim, 0))

    def axis_nodes(self, axis: int) -> np.ndarray:
        return np.arange(self.shape[axis]) * self.spacing[axis]

    def coords(self) -> tuple:
        """Node coordinates, one array of ``shape`` per axis."""
        return tuple(np.meshgrid(*[self.axis_nodes(a) for a in range(self.ndim)], indexing="ij"))

    def displacement(self) -> tuple:
        """Node coordinates wrapped to [-period/2, period/2); node 0 is the origin."""
        out = []
        for a in range(self.ndim):
            n, h = self.shape[a], self.spacing[a]
            j = np.arange(n)
            out.append(np.where(j < n // 2, j, j - n) * h)
        return tuple(np.meshgrid(*out, indexing="ij"))

    def _axis_shape(self, a):
        s = [1] * self.ndim
        s[a] = self.shape[a]
        return s

    @cached_property
    def wavenumbers(self) -> tuple:
        """Lattice frequencies 2*pi*m/period per axis, broadcastable to ``shape``."""
        return tuple(
            (2 * np.pi * sfft.fftfreq(n, h)).reshape(self._axis_shape(a))
            for a, (n, h) in enumerate(zip(self.shape, self.spacing))
        )

    @cached_property
    def derivative_symbols(self) -> tuple:
        """i*xi per axis with the Nyquist mode removed (keeps real fields real)."""
        out = []
        for a, k in enumerate(self.wavenumbers):
            k = k.copy()
            n = self.shape[a]
            if n % 2 == 0:
                k.reshape(-1)[n // 2] = 0.0
            out.append(1j * k)
        return tuple(out)

    @cached_property
    def k_squared(self) -> np.ndarray:
        return sum(k ** 2 for k in self.wavenumbers)

    @cached_property
    def laplacian_symbol(self) -> np.ndarray:
        """Symbol of divergence(gradient(.)): -sum xi_j^2 without Nyquist terms."""
        return sum(s ** 2 for s in self.derivative_symbols).real

    def frequency(self, index) -> np.ndarray:
        """Lattice integer index (any sign) -> frequency vector."""
        idx = np.atleast_1d(index)
        return np.array([2 * np.pi * int(m) / p for m, p in zip(idx, self.period)])

    def mode_index(self, index) -> tuple:
        """Lattice integer index -> array index (wrapped modulo the grid)."""
        idx = np.atleast_1d(index)
        if len(idx) != self.ndim:
            raise GridError(f"mode index {tuple(idx)} has wrong length for ndim={self.ndim}")
        return tuple(int(m) % n for m, n in zip(idx, self.shape))

    def signed_index(self, index) -> tuple:
        """Array index -> lattice integer index in [-N/2, N/2)."""
        return tuple(((int(j) + n // 2) % n) - n // 2 for j, n in zip(index, self.shape))

    def check(self, a: np.ndarray) -> None:
        if tuple(a.shape[-self.ndim:]) != self.shape or a.ndim < self.ndim:
            raise GridError(f"array shape {a.shape} does not match grid {self.shape}")

    # array-level spectral helpers
    def fft(self, a: np.ndarray) -> np.ndarray:
        return self.cell_volume * sfft.fftn(a, axes=self.axes_index, workers=_WORKERS)

    def ifft(self, c: np.ndarray, real: bool = False) -> np.ndarray:
        out = sfft.ifftn(c, axes=self.axes_index, workers=_WORKERS) / self.cell_volume
        return out.real.copy() if real else out

    def apply_symbol(self, a: np.ndarray, symbol: np.ndarray) -> np.ndarray:
        real = not np.iscomplexobj(a)
        return self.ifft(self.fft(a) * symbol, real=real)

    def grad(self, a: np.ndarray) -> np.ndarray:
        """Gradient stacked on a new axis placed just before the grid axes."""
        c = self.fft(a)
        real = not np.iscomplexobj(a)
        return np.stack([self.ifft(c * s, real=real) for s in self.derivative_symbols], axis=-self.ndim - 1)

    def div(self, v: np.ndarray) -> np.ndarray:
        """Divergence of a vector field stacked as produced by :meth:`grad`."""
        real = not np.iscomplexobj(v)
        comps = [np.take(v, a, axis=-self.ndim - 1) for a in range(self.ndim)]
        c = sum(self.fft(comp) * s for comp, s in zip(comps, self.derivative_symbols))
        return self.ifft(c, real=real)

    def lap(self, a: np.ndarray) -> np.ndarray:
        return self.apply_symbol(a, self.laplacian_symbol)

    def heat_symbol(self, d: float, t: float) -> np.ndarray:
        return np.exp(-d * self.k_squared * t)


@dataclass(frozen=True, eq=False)
class Field:
    """Scalar field on a grid; ``values`` has the grid's shape."""

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype.kind not in "fc":
            v = v.astype(float)
        if tuple(v.shape) != self.grid.shape:
            raise GridError(f"field of shape {v.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", v)

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.values)

    def real_part(self, tol: float = 1e-12) -> "Field":
        """Drop a negligible imaginary part; raises if it is not negligible."""
        if self.is_real:
            return self
        scale = np.max(np.abs(self.values)) if self.values.size else 0.0
        if np.max(np.abs(self.values.imag), initial=0.0) > tol * max(scale, 1e-300):
            raise GridError("imaginary part is not negligible")
        return Field(self.grid, self.values.real.copy())


@dataclass(frozen=True, eq=False)
class Spectrum:
    grid: TorusGrid
    coefficients: np.ndarray
    from_real: bool = False

    def at(self, index) -> complex:
        """Coefficient at a lattice integer index."""
        return complex(self.coefficients[self.grid.mode_index(index)])


def _same_grid(a: Field, b: Field):
    if a.grid != b.grid:
        raise GridError("fields live on different grids")


def dft_forward(f: Field) -> Spectrum:
    return Spectrum(f.grid, f.grid.fft(f.values), from_real=f.is_real)


def dft_inverse(s: Spectrum) -> Field:
    return Field(s.grid, s.grid.ifft(s.coefficients, real=s.from_real))


def convolve(kernel: Field, u: Field) -> Field:
    """Periodic convolution int kernel(x - y) u(y) dy."""
    _same_grid(kernel, u)
    g = u.grid
    real = kernel.is_real and u.is_real
    return Field(g, g.ifft(g.fft(kernel.values) * g.fft(u.values), real=real))


def gradient(u: Field) -> list:
    return [Field(u.grid, c) for c in u.grid.grad(u.values)]


def divergence(v: Sequence[Field]) -> Field:
    g = v[0].grid
    if len(v) != g.ndim:
        raise GridError(f"vector field has {len(v)} components, grid has ndim={g.ndim}")
    for c in v[1:]:
        _same_grid(v[0], c)
    return Field(g, g.div(np.stack([c.values for c in v])))


def laplacian(u: Field) -> Field:
    return Field(u.grid, u.grid.lap(u.values))


def mass(u: Field) -> float | complex:
    """int u dx as cell_volume * sum(values)."""
    s = np.sum(u.values)
    return u.grid.cell_volume * (s.item() if hasattr(s, "item") else s)


# GRD1 binary format
GRD_MAGIC = b"GRD1"
GRD_VERSION = 1


def encode_grd1(field: Field, timestamp: float = 0.0) -> bytes:
    g = field.grid
    cplx = 0 if field.is_real else 1
    head = GRD_MAGIC + struct.pack("<IBB", GRD_VERSION, g.ndim, cplx)
    head += struct.pack(f"<{g.ndim}I", *g.shape)
    head += struct.pack(f"<{g.ndim}d", *g.period)
    head += struct.pack("<d", float(timestamp))
    if cplx:
        payload = np.ascontiguousarray(field.values, dtype="<c16").view("<f8")
    else:
        payload = np.ascontiguousarray(field.values, dtype="<f8")
    return head + payload.tobytes(order="C")


def decode_grd1(data: bytes) -> tuple:
    """Returns (Field, timestamp)."""
    if data[:4] != GRD_MAGIC:
        raise GridError("not a GRD1 file (bad magic)")
    version, ndim, cplx = struct.unpack_from("<IBB", data, 4)
    if version != GRD_VERSION:
        raise GridError(f"unsupported GRD1 version {version}")
    off = 10
    shape = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    period = struct.unpack_from(f"<{ndim}d", data, off)
    off += 8 * ndim
    (timestamp,) = struct.unpack_from("<d", data, off)
    off += 8
    n = int(np.prod(shape))
    count = 2 * n if cplx else n
    if len(data) != off + 8 * count:
        raise GridError("GRD1 payload length does not match header")
    raw = np.frombuffer(data, dtype="<f8", count=count, offset=off)
    vals = raw.view("<c16") if cplx else raw
    grid = TorusGrid(tuple(shape), tuple(period))
    return Field(grid, vals.reshape(shape).astype(complex if cplx else float)), timestamp


def write_grd1(path, field: Field, timestamp: float = 0.0) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_grd1(field, timestamp))


def read_grd1(path) -> tuple:
    with open(path, "rb") as fh:
        return decode_grd1(fh.read())
