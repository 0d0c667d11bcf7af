"""Divergence-free periodic vector fields and their representations.

A SpectralField stores the truncated Fourier coefficients of a real,
divergence-free velocity field on the torus [0, 2*pi)^dim.  Constant fields
are admissible: the zero mode is carried and passes through the Leray
projection unchanged.
"""

from dataclasses import dataclass
import json
import struct

import numpy as np

from .errors import ConfigurationError
from .modes import ModeBasis, TWO_PI, mode_basis, quadrature_points
from . import rng as rngmod

__all__ = [
    "SpectralField", "PhysicalGrid", "to_physical", "to_spectral",
    "project_leray", "norm", "inner", "random_divergence_free",
    "save_field", "load_field", "field_to_json", "field_from_json",
]


@dataclass(frozen=True)
class SpectralField:
    """Truncated Fourier coefficients of a real solenoidal field.

    coeffs has shape (dim,) + (N+1,)*dim; entry [c, i1, ..] is the component-c
    coefficient of mode k with k_j = i_j - N/2.
    """
    dim: int
    resolution: int
    coeffs: np.ndarray

    def __post_init__(self):
        basis = mode_basis(self.dim, self.resolution)
        expected = (self.dim,) + (self.resolution + 1,) * self.dim
        if self.coeffs.shape != expected:
            raise ConfigurationError(
                f"coefficient shape {self.coeffs.shape}, expected {expected}")
        arr = np.ascontiguousarray(self.coeffs, dtype=np.complex128)
        arr.setflags(write=False)
        object.__setattr__(self, "coeffs", arr)
        object.__setattr__(self, "_basis", basis)

    @property
    def basis(self) -> ModeBasis:
        return self._basis

    def flat_coeffs(self) -> np.ndarray:
        """Coefficients as (n_modes, dim), modes in lexicographic k order."""
        return np.moveaxis(
            self.coeffs.reshape(self.dim, self.basis.n_modes), 0, -1)

    @classmethod
    def from_flat(cls, dim, resolution, flat) -> "SpectralField":
        side = resolution + 1
        cube = np.moveaxis(np.asarray(flat, dtype=np.complex128), -1, 0)
        return cls(dim, resolution, cube.reshape((dim,) + (side,) * dim))

    @classmethod
    def zero(cls, dim, resolution) -> "SpectralField":
        side = resolution + 1
        return cls(dim, resolution,
                   np.zeros((dim,) + (side,) * dim, dtype=np.complex128))

    @classmethod
    def constant(cls, values) -> "SpectralField":
        """Constant field with the given component values (resolution 2)."""
        values = np.asarray(values, dtype=float)
        f = cls.zero(values.size, 2)
        flat = f.flat_coeffs().copy()
        flat[f.basis.zero_index] = values
        return cls.from_flat(values.size, 2, flat)

    @classmethod
    def single_mode(cls, dim, resolution, k, amplitude) -> "SpectralField":
        """Real field with coefficient `amplitude` at mode k (conjugate
        partner added automatically)."""
        basis = mode_basis(dim, resolution)
        kint = np.asarray(k, dtype=int)
        idx = np.ravel_multi_index(tuple(kint + resolution // 2),
                                   (resolution + 1,) * dim)
        flat = np.zeros((basis.n_modes, dim), dtype=np.complex128)
        flat[idx] = np.asarray(amplitude, dtype=np.complex128)
        flat[basis.conj_index[idx]] = np.conj(flat[idx])
        if idx == basis.zero_index:
            flat[idx] = flat[idx].real
        return cls.from_flat(dim, resolution, flat)

    def validate(self, tol=1e-10):
        """Check the reality and solenoidality invariants."""
        flat = self.flat_coeffs()
        scale = max(float(np.max(np.abs(flat))), 1e-300)
        reality = np.max(np.abs(flat - np.conj(flat[self.basis.conj_index])))
        if reality > tol * scale:
            raise ValueError(f"reality violated: {reality:.3e}")
        kdotc = np.einsum("mc,mc->m", self.basis.kvec, flat)
        div = np.max(np.abs(kdotc))
        if div > tol * scale * np.sqrt(max(self.basis.lam.max(), 1.0)):
            raise ValueError(f"solenoidality violated: {div:.3e}")
        return self

    # small arithmetic surface; fields are immutable so each op returns new
    def __add__(self, other):
        self._check_compatible(other)
        return SpectralField(self.dim, self.resolution,
                             self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check_compatible(other)
        return SpectralField(self.dim, self.resolution,
                             self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return SpectralField(self.dim, self.resolution,
                             self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def _check_compatible(self, other):
        if (self.dim, self.resolution) != (other.dim, other.resolution):
            raise ConfigurationError(
                f"incompatible fields: ({self.dim},{self.resolution}) vs "
                f"({other.dim},{other.resolution})")


@dataclass(frozen=True)
class PhysicalGrid:
    """Collocation values on a uniform grid with spacing 2*pi/points."""
    dim: int
    points: int
    values: np.ndarray

    def __post_init__(self):
        expected = (self.dim,) + (self.points,) * self.dim
        if self.values.shape != expected:
            raise ConfigurationError(
                f"grid shape {self.values.shape}, expected {expected}")

    def nodes(self, axis: int) -> np.ndarray:
        return np.arange(self.points) * (TWO_PI / self.points)


def to_physical(field: SpectralField, points=None) -> PhysicalGrid:
    """Evaluate the field on a uniform grid (default: dealiased for p=2)."""
    if points is None:
        points = quadrature_points(field.resolution)
    if points < field.resolution + 1:
        raise ConfigurationError(
            f"{points} points cannot represent resolution {field.resolution}")
    grid = field.basis.to_grid(field.flat_coeffs(), points)
    return PhysicalGrid(field.dim, points, grid)


def to_spectral(grid: PhysicalGrid, resolution: int) -> SpectralField:
    """Truncating inverse of to_physical."""
    basis = mode_basis(grid.dim, resolution)
    if grid.points < resolution + 1:
        raise ConfigurationError(
            f"grid of {grid.points} points cannot recover resolution "
            f"{resolution}")
    return SpectralField.from_flat(grid.dim, resolution,
                                   basis.from_grid(grid.values))


def project_leray(field: SpectralField) -> SpectralField:
    """Helmholtz--Leray projection onto divergence-free fields."""
    flat = field.basis.project(field.flat_coeffs())
    return SpectralField.from_flat(field.dim, field.resolution, flat)


def inner(a: SpectralField, b: SpectralField) -> float:
    """L^2 inner product over the torus."""
    a._check_compatible(b)
    return float(a.basis.inner(a.flat_coeffs(), b.flat_coeffs()))


def norm(field: SpectralField, kind: str = "H", p=None,
         grid_points=None) -> float:
    """Norms of the field: kind in {"H", "grad", "V", "Lp"}.

    H, grad and V are computed spectrally.  Lp is computed by quadrature on a
    dealiased grid (exact for integer p <= 6 at the default grid); pass
    grid_points to pin the quadrature grid.
    """
    basis = field.basis
    flat = field.flat_coeffs()
    if kind == "H":
        return float(basis.norm_h(flat))
    if kind == "grad":
        return float(basis.norm_grad(flat))
    if kind == "V":
        return float(np.hypot(basis.norm_h(flat), basis.norm_grad(flat)))
    if kind == "Lp":
        if p is None or p < 1:
            raise ValueError(f"Lp norm needs p >= 1, got {p}")
        if grid_points is None:
            grid_points = quadrature_points(field.resolution)
        grid = basis.to_grid(flat, grid_points)
        return float(basis.grid_lp_norm(grid, p))
    raise ValueError(f"unknown norm kind {kind!r}")


def random_divergence_free(seed: int, decay: float, amplitude: float,
                           resolution: int, dim: int) -> SpectralField:
    """Deterministic random solenoidal field with |coeff| ~ (1+|k|^2)^(-s/2).

    Sampled directly in the orthonormal solenoidal basis, so the output
    satisfies both invariants by construction.
    """
    if decay <= 0:
        raise ValueError(f"decay exponent must be positive, got {decay}")
    basis = mode_basis(dim, resolution)
    gen = rngmod.generator(seed, rngmod.TAG_FIELD)
    z = gen.standard_normal(basis.n_dof)
    sigma = amplitude * (1.0 + basis.lam_dof) ** (-decay / 2.0)
    flat = basis.unpack(sigma * z)
    return SpectralField.from_flat(dim, resolution, flat)


# ------------------------------------------------------------ snapshot files

_MAGIC = b"CBFF"
_HEADER = struct.Struct("<4sBBI")  # magic, version, dim, resolution


def save_field(field: SpectralField, path):
    """Binary snapshot: header then complex128 coefficients (little endian),
    lexicographic k order with the dim components of each mode adjacent."""
    flat = np.ascontiguousarray(field.flat_coeffs(), dtype="<c16")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, field.dim, field.resolution))
        fh.write(flat.tobytes())


def load_field(path) -> SpectralField:
    with open(path, "rb") as fh:
        magic, version, dim, resolution = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _MAGIC or version != 1:
            raise ConfigurationError(f"not a field snapshot: {path}")
        n_modes = (resolution + 1) ** dim
        data = np.frombuffer(fh.read(), dtype="<c16")
    if data.size != n_modes * dim:
        raise ConfigurationError(f"truncated field snapshot: {path}")
    return SpectralField.from_flat(dim, resolution,
                                   data.reshape(n_modes, dim))


def field_to_json(field: SpectralField) -> str:
    flat = field.flat_coeffs()
    return json.dumps({
        "dim": field.dim,
        "resolution": field.resolution,
        "coeffs": [[[float(c.real), float(c.imag)] for c in row]
                   for row in flat],
    })


def field_from_json(text: str) -> SpectralField:
    obj = json.loads(text)
    flat = np.array([[complex(re, im) for re, im in row]
                     for row in obj["coeffs"]])
    return SpectralField.from_flat(obj["dim"], obj["resolution"], flat)
