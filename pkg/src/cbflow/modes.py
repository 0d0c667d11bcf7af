"""Mode bookkeeping for truncated Fourier representations on the torus.

The period is fixed to 2*pi on every axis, so mode k carries the Stokes
eigenvalue |k|^2 with no further bookkeeping.  A field of resolution N keeps
every integer mode with |k_i| <= N/2 per axis, stored on a dense
(N+1)^dim cube in lexicographic order.

Besides the coefficient cube, this module owns the two representations the
rest of the package is built on:

* physical grids of M points per axis, reached by zero-padded FFTs so that
  polynomial nonlinearities can be evaluated alias-free;
* a packed real vector of the divergence-free degrees of freedom, orthonormal
  with respect to the L^2 inner product of the torus.  In packed coordinates
  the Leray projection is "forget the rest", the Stokes operator is diagonal,
  and white noise is a standard normal vector.
"""

from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .errors import ConfigurationError

TWO_PI = 2.0 * np.pi

# dense synthesis matrices are used below this total size; above it the FFT
# path wins on memory (notably d=3)
DENSE_BUDGET_BYTES = 96 * 2**20


def dealias_points(resolution: int, degree: float) -> int:
    """Physical points per axis for alias-free products of a given degree.

    A product of `degree` fields of resolution N has modes up to degree*N/2;
    quadrature over M points is exact for trigonometric polynomials of degree
    at most M-1, which requires M >= (degree+1)*N/2 + 1.  The result is
    rounded up to an FFT-friendly length.
    """
    half = resolution // 2
    minimum = int(np.ceil((degree + 1.0) * half)) + 1
    return sfft.next_fast_len(max(minimum, resolution + 1))


def quadrature_points(resolution: int) -> int:
    """Canonical grid for Lp norms: exact for products up to degree 5."""
    return dealias_points(resolution, 5)


class DenseTransforms:
    """GEMM-sized synthesis/analysis maps between packed dofs and grids."""

    def __init__(self, points, n_grid, s, sd, st, std):
        self.points = points
        self.n_grid = n_grid
        self.s = s      # (n_dof, dim * n_grid)
        self.sd = sd    # (n_dof, dim * dim * n_grid)
        self.st = st    # (dim * n_grid, n_dof), quadrature-weighted adjoint
        self.std = std  # (dim * dim * n_grid, n_dof)


def _transverse_basis(k: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the plane orthogonal to a nonzero integer mode."""
    d = k.shape[0]
    if d == 2:
        e = np.array([-k[1], k[0]], dtype=float)
        return (e / np.linalg.norm(e))[None, :]
    helper = np.array([0.0, 0.0, 1.0])
    if k[0] == 0 and k[1] == 0:
        helper = np.array([1.0, 0.0, 0.0])
    e1 = np.cross(k, helper)
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.cross(k, e1)
    e2 = e2 / np.linalg.norm(e2)
    return np.stack([e1, e2])


class ModeBasis:
    """Cached index arrays and basis data for one (dim, resolution) pair.

    Coefficient arrays have shape (..., n_modes, dim) with the mode axis in
    lexicographic order of k in {-N/2..N/2}^dim.  Packed arrays have shape
    (..., n_dof) laid out as [constant block | cos block | sin block], the
    cos/sin blocks running over positive modes (major) and transverse
    directions (minor).
    """

    def __init__(self, dim: int, resolution: int):
        if dim not in (2, 3):
            raise ConfigurationError(f"dim must be 2 or 3, got {dim}")
        if resolution < 2 or resolution % 2:
            raise ConfigurationError(
                f"resolution must be a positive even integer, got {resolution}")
        self.dim = dim
        self.resolution = resolution
        self.half = resolution // 2
        axis = np.arange(-self.half, self.half + 1)
        grids = np.meshgrid(*([axis] * dim), indexing="ij")
        self.kvec = np.stack([g.ravel() for g in grids], axis=-1).astype(float)
        self.n_modes = self.kvec.shape[0]
        self.lam = np.sum(self.kvec**2, axis=1)

        side = resolution + 1
        idx = np.round(self.kvec).astype(int) + self.half
        self.conj_index = np.ravel_multi_index(
            tuple((2 * self.half - idx[:, i]) for i in range(dim)),
            (side,) * dim)
        self.zero_index = int(np.ravel_multi_index((self.half,) * dim,
                                                   (side,) * dim))

        # lexicographic positivity: first nonzero component of k positive
        pos = np.zeros(self.n_modes, dtype=bool)
        for m in range(self.n_modes):
            for c in self.kvec[m]:
                if c > 0:
                    pos[m] = True
                    break
                if c < 0:
                    break
        self.pos_index = np.nonzero(pos)[0]
        self.neg_index = self.conj_index[self.pos_index]
        self.n_pos = self.pos_index.size

        self.tangent = np.stack(
            [_transverse_basis(np.round(self.kvec[m]).astype(int))
             for m in self.pos_index])             # (n_pos, dim-1, dim)

        self.n_dir = dim - 1
        self.n_dof = dim + 2 * self.n_pos * self.n_dir
        lam_pos = np.repeat(self.lam[self.pos_index], self.n_dir)
        self.lam_dof = np.concatenate([np.zeros(dim), lam_pos, lam_pos])

        self._const_scale = TWO_PI ** (dim / 2.0)
        self._trig_scale = np.sqrt(2.0 * TWO_PI**dim)
        self._embed_cache = {}
        self._dense_cache = {}

    # ---------------------------------------------------------------- packed

    def pack(self, coeffs: np.ndarray) -> np.ndarray:
        """Project onto the divergence-free subspace and return real dofs."""
        x0 = coeffs[..., self.zero_index, :].real * self._const_scale
        zp = np.einsum("...mc,mjc->...mj", coeffs[..., self.pos_index, :],
                       self.tangent)
        shape = coeffs.shape[:-2] + (self.n_pos * self.n_dir,)
        xc = self._trig_scale * zp.real.reshape(shape)
        xs = -self._trig_scale * zp.imag.reshape(shape)
        return np.concatenate([x0, xc, xs], axis=-1)

    def unpack(self, packed: np.ndarray) -> np.ndarray:
        """Inverse of pack; output satisfies reality and solenoidality."""
        d = self.dim
        nt = self.n_pos * self.n_dir
        x0 = packed[..., :d]
        xc = packed[..., d:d + nt]
        xs = packed[..., d + nt:]
        coeffs = np.zeros(packed.shape[:-1] + (self.n_modes, d),
                          dtype=np.complex128)
        coeffs[..., self.zero_index, :] = x0 / self._const_scale
        z = (xc - 1j * xs).reshape(packed.shape[:-1] + (self.n_pos, self.n_dir))
        z = z / self._trig_scale
        cpos = np.einsum("...mj,mjc->...mc", z, self.tangent)
        coeffs[..., self.pos_index, :] = cpos
        coeffs[..., self.neg_index, :] = np.conj(cpos)
        return coeffs

    def qvals(self, q0: float, s: float) -> np.ndarray:
        """Covariance eigenvalue q0*(1+|k|^2)^(-s) for every packed dof."""
        return q0 * (1.0 + self.lam_dof) ** (-s)

    # ------------------------------------------------------------------ grid

    def _embed_index(self, points: int) -> np.ndarray:
        cached = self._embed_cache.get(points)
        if cached is not None:
            return cached
        if points < self.resolution + 1:
            raise ConfigurationError(
                f"grid of {points} points cannot hold resolution "
                f"{self.resolution}")
        kint = np.round(self.kvec).astype(int)
        flat = np.ravel_multi_index(
            tuple(np.mod(kint[:, i], points) for i in range(self.dim)),
            (points,) * self.dim)
        self._embed_cache[points] = flat
        return flat

    def to_grid(self, coeffs: np.ndarray, points: int) -> np.ndarray:
        """Evaluate sum_k c_k e^{i k.x} on a uniform grid.

        coeffs: (..., n_modes, ncomp) for any component count; the result has
        shape (..., ncomp) + (points,)*dim.
        """
        flat = self._embed_index(points)
        batch = coeffs.shape[:-2]
        ncomp = coeffs.shape[-1]
        buf = np.zeros(batch + (ncomp, points**self.dim), dtype=np.complex128)
        buf[..., flat] = np.moveaxis(coeffs, -1, -2)
        buf = buf.reshape(batch + (ncomp,) + (points,) * self.dim)
        axes = tuple(range(-self.dim, 0))
        return sfft.ifftn(buf, axes=axes).real * float(points**self.dim)

    def from_grid(self, grid: np.ndarray) -> np.ndarray:
        """Truncating transform back to the coefficient cube.

        Hermitian symmetry of the result is enforced exactly so round trips
        preserve the reality invariant.
        """
        points = grid.shape[-1]
        flat = self._embed_index(points)
        axes = tuple(range(-self.dim, 0))
        fhat = sfft.fftn(grid, axes=axes) / float(points**self.dim)
        batch = grid.shape[:-self.dim - 1]
        ncomp = grid.shape[-self.dim - 1]
        fhat = fhat.reshape(batch + (ncomp, points**self.dim))
        coeffs = np.moveaxis(fhat[..., flat], -2, -1)
        return 0.5 * (coeffs + np.conj(coeffs[..., self.conj_index, :]))

    def gradient_coeffs(self, coeffs: np.ndarray) -> np.ndarray:
        """Spectral derivative tensor: (..., n_modes, dim*dim) with the
        derivative direction major, matching DenseTransforms layout."""
        dv = 1j * self.kvec.T[:, :, None] * coeffs[..., None, :, :]
        dvt = np.moveaxis(dv, -3, -2)
        return dvt.reshape(coeffs.shape[:-2] + (self.n_modes, self.dim**2))

    def dense(self, points: int):
        """Dense synthesis/analysis matrices for this grid size, or None.

        S maps packed dofs to flat grid values (components major), Sd to all
        dim*dim derivative values; their scaled transposes St, Std are the
        exact quadrature adjoints, so pack(from_grid(g)) == g @ St and the
        divergence-form adjoint of the derivative map is g @ Std.
        """
        if points in self._dense_cache:
            return self._dense_cache[points]
        n_grid = points**self.dim
        total = self.n_dof * n_grid * (self.dim + self.dim**2) * 8 * 2
        if total > DENSE_BUDGET_BYTES:
            self._dense_cache[points] = None
            return None
        eye = np.eye(self.n_dof)
        coeffs = self.unpack(eye)
        s_mat = np.ascontiguousarray(
            self.to_grid(coeffs, points).reshape(self.n_dof, -1))
        sd_mat = np.ascontiguousarray(
            self.to_grid(self.gradient_coeffs(coeffs),
                         points).reshape(self.n_dof, -1))
        cell = (TWO_PI / points) ** self.dim
        dense = DenseTransforms(
            points=points, n_grid=n_grid, s=s_mat, sd=sd_mat,
            st=np.ascontiguousarray(s_mat.T * cell),
            std=np.ascontiguousarray(sd_mat.T * cell))
        self._dense_cache[points] = dense
        return dense

    def grid_scalar_gradient(self, scalar_grid: np.ndarray) -> np.ndarray:
        """Spectral gradient of a scalar grid function, on the same grid."""
        points = scalar_grid.shape[-1]
        axes = tuple(range(-self.dim, 0))
        fhat = sfft.fftn(scalar_grid, axes=axes)
        freqs = sfft.fftfreq(points, d=1.0 / points)
        comps = []
        for i in range(self.dim):
            shape = [1] * self.dim
            shape[i] = points
            ki = freqs.reshape(shape)
            comps.append(sfft.ifftn(1j * ki * fhat, axes=axes).real)
        return np.stack(comps, axis=-self.dim - 1)

    # ------------------------------------------------------------- operators

    def project(self, coeffs: np.ndarray) -> np.ndarray:
        """Leray projection: c_k -> c_k - k (k.c_k)/|k|^2, identity at k=0."""
        kdotc = np.einsum("...mc,mc->...m", coeffs, self.kvec)
        lam_safe = np.where(self.lam > 0, self.lam, 1.0)
        corr = (kdotc / lam_safe)[..., None] * self.kvec
        corr[..., self.zero_index, :] = 0.0
        return coeffs - corr

    def inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """L^2 inner product of two coefficient arrays."""
        return TWO_PI**self.dim * np.einsum(
            "...mc,...mc->...", a, np.conj(b)).real

    def norm_h(self, coeffs: np.ndarray) -> np.ndarray:
        return np.sqrt(TWO_PI**self.dim *
                       np.sum(np.abs(coeffs) ** 2, axis=(-2, -1)))

    def norm_grad(self, coeffs: np.ndarray) -> np.ndarray:
        w = np.sum(np.abs(coeffs) ** 2, axis=-1) * self.lam
        return np.sqrt(TWO_PI**self.dim * np.sum(w, axis=-1))

    def grid_lp_norm(self, grid: np.ndarray, p: float) -> np.ndarray:
        """Quadrature Lp norm of the pointwise Euclidean magnitude."""
        points = grid.shape[-1]
        mag2 = np.sum(grid**2, axis=-self.dim - 1)
        weight = (TWO_PI / points) ** self.dim
        sum_axes = tuple(range(-self.dim, 0))
        return (np.sum(mag2 ** (p / 2.0), axis=sum_axes) * weight) ** (1.0 / p)


@lru_cache(maxsize=None)
def mode_basis(dim: int, resolution: int) -> ModeBasis:
    return ModeBasis(dim, resolution)
