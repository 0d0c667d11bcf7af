"""Monte Carlo estimation of small-noise Laplace functionals.

The central quantity is (1/n) log E[exp(-n g(Y_n(t)))] for bounded Lipschitz
observables g; its n -> infinity limit is minus the value of the deterministic
control problem solved in control.py.  Plain Monte Carlo concentrates badly
for large n, so the estimator accepts a Girsanov tilt: the dynamics are
shifted by Q^{1/2} u(s) and each sample reweighted by

    exp(-sqrt(n) * int (u, dW) - n/2 * int ||u||^2 ds)

expressed through the sampled white increments, which keeps the tilted
estimator exactly unbiased for the discrete-time expectation.
"""

from dataclasses import dataclass
import json
import math
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .fields import SpectralField
from .modes import mode_basis
from .operators import PhysicalParams, ForcingSpec
from .simulate import NoiseSpec, TimeGrid, _EnsembleRun, DEFAULT_BATCH
from . import rng as rngmod

__all__ = [
    "Observable", "tanh_observable", "saturating_distance_observable",
    "linear_observable", "constant_observable", "LaplaceEstimate",
    "log_mean_exp", "estimate_laplace", "estimate_multi_time",
    "write_ndjson", "read_ndjson",
]


@dataclass(frozen=True)
class Observable:
    """Catalog observable g with analytic gradient, evaluated in packed
    coordinates.

    kinds: "tanh" is c*tanh(<phi,y>/c) (bounded by c, Lipschitz ||phi||);
    "saturating" is c*min(1, ||y-y*||^2); "linear" is <phi,y>, unbounded and
    flagged oracle-only since the theory requires bounded g.
    """
    kind: str
    ref_field: SpectralField
    cap: float = 1.0
    observable_id: str = ""

    def __post_init__(self):
        if self.kind not in ("tanh", "saturating", "linear", "constant"):
            raise ConfigurationError(f"unknown observable kind {self.kind!r}")
        if self.kind in ("tanh", "saturating") and self.cap <= 0:
            raise ValueError("cap must be positive")
        basis = self.ref_field.basis
        packed = basis.pack(self.ref_field.flat_coeffs())
        object.__setattr__(self, "_packed", packed)
        if not self.observable_id:
            object.__setattr__(self, "observable_id", self.kind)

    @property
    def oracle_only(self) -> bool:
        return self.kind == "linear"

    @property
    def bound(self) -> Optional[float]:
        """sup |g|, None for the unbounded linear entry."""
        return None if self.kind == "linear" else abs(self.cap)

    @property
    def lipschitz(self) -> float:
        phi_norm = float(np.linalg.norm(self._packed))
        if self.kind == "saturating":
            return 2.0 * self.cap
        if self.kind == "constant":
            return 0.0
        return phi_norm

    def value_packed(self, p: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.full(p.shape[:-1], self.cap)
        if self.kind == "linear":
            return p @ self._packed
        if self.kind == "tanh":
            return self.cap * np.tanh((p @ self._packed) / self.cap)
        d2 = np.sum((p - self._packed) ** 2, axis=-1)
        return self.cap * np.minimum(1.0, d2)

    def gradient_packed(self, p: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.zeros_like(p)
        if self.kind == "linear":
            return np.broadcast_to(self._packed, p.shape).copy()
        if self.kind == "tanh":
            sech2 = 1.0 - np.tanh((p @ self._packed) / self.cap) ** 2
            return sech2[..., None] * self._packed
        diff = p - self._packed
        inside = np.sum(diff**2, axis=-1) < 1.0
        return 2.0 * self.cap * inside[..., None] * diff

    def value(self, y: SpectralField) -> float:
        basis = y.basis
        return float(self.value_packed(basis.pack(y.flat_coeffs())))

    def gradient(self, y: SpectralField) -> SpectralField:
        basis = y.basis
        g = self.gradient_packed(basis.pack(y.flat_coeffs()))
        return SpectralField.from_flat(y.dim, y.resolution, basis.unpack(g))


def tanh_observable(phi: SpectralField, cap: float = 1.0,
                    observable_id: str = "tanh") -> Observable:
    return Observable("tanh", phi, cap, observable_id)


def saturating_distance_observable(target: SpectralField, cap: float = 1.0,
                                   observable_id: str = "saturating"
                                   ) -> Observable:
    return Observable("saturating", target, cap, observable_id)


def linear_observable(phi: SpectralField,
                      observable_id: str = "linear") -> Observable:
    return Observable("linear", phi, 1.0, observable_id)


def constant_observable(value: float, dim: int = 2, resolution: int = 2,
                        observable_id: str = "constant") -> Observable:
    return Observable("constant", SpectralField.zero(dim, resolution), value,
                      observable_id)


def log_mean_exp(values) -> float:
    """log of the mean of exp(values), max-shifted; exact on constants."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("log_mean_exp of an empty list")
    if not np.all(np.isfinite(arr)):
        raise ValueError("log_mean_exp needs finite entries")
    m = float(arr.max())
    if np.all(arr == m):
        return m
    return m + math.log(float(np.mean(np.exp(arr - m))))


@dataclass
class LaplaceEstimate:
    """Monte Carlo Laplace functional value with bootstrap uncertainty."""
    value: float
    n: float
    samples: int
    ci: float
    ess: float
    t: float
    observable_id: str
    tilted: bool
    seed: int

    def to_record(self, experiment_id: str = "") -> dict:
        return {"experiment_id": experiment_id, "n": self.n,
                "M": self.samples, "t": self.t,
                "observable_id": self.observable_id, "value": self.value,
                "ci": self.ci, "tilted": self.tilted, "seed": self.seed}


def _bootstrap_ci(exponents: np.ndarray, n: float, seed: int,
                  resamples: int) -> float:
    """Percentile bootstrap half-width of (1/n) log mean exp."""
    if np.all(exponents == exponents[0]):
        return 0.0
    gen = rngmod.generator(seed, rngmod.TAG_BOOT)
    m = exponents.max()
    w = np.exp(exponents - m)
    size = exponents.size
    idx = gen.integers(0, size, size=(resamples, size))
    means = np.mean(w[idx], axis=1)
    stats = (m + np.log(means)) / n
    lo, hi = np.percentile(stats, [2.5, 97.5])
    return float(0.5 * (hi - lo))


def estimate_multi_time(y0: SpectralField, pairs, n: float, samples: int,
                        params: PhysicalParams, forcing: Optional[ForcingSpec],
                        noise: NoiseSpec, grid: TimeGrid, seed: int = 0,
                        tilt=None, bootstrap: int = 200) -> LaplaceEstimate:
    """(1/n) log E[exp(-n sum_i g_i(Y_n(t_i)))] over the given time/observable
    pairs, simulated over the full horizon with the running sum per sample."""
    if samples < 2:
        raise ValueError("need at least 2 samples")
    if n < 1:
        raise ValueError(f"LDP scale n must be >= 1, got {n}")
    times = [t for t, _ in pairs]
    if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
        raise ConfigurationError("observation times must be increasing")
    if len(pairs) > 1 and any(g.bound is None for _, g in pairs):
        raise ValueError("multi-time estimation needs bounded observables")
    snap_steps = [grid.node_index(t) for t in times]
    basis = mode_basis(y0.dim, y0.resolution)
    params.validate_for_dim(y0.dim)
    spec_n = noise.with_n(n)

    tilt_packed = None
    if tilt is not None:
        if tilt.grid != grid:
            raise ConfigurationError("tilt control grid does not match")
        if (tilt.dim, tilt.resolution) != (y0.dim, y0.resolution):
            raise ConfigurationError("tilt resolution does not match state")
        tilt_packed = tilt.packed

    p0 = basis.pack(y0.flat_coeffs())
    run = _EnsembleRun(basis, params, forcing, spec_n, grid, seed,
                       tilt_packed=tilt_packed)
    exponents = np.empty(samples)
    for a in range(0, samples, DEFAULT_BATCH):
        b = min(a + DEFAULT_BATCH, samples)
        tile = np.broadcast_to(p0, (b - a, basis.n_dof))
        out = run.run(tile, first_sample=a, snap_steps=set(snap_steps),
                      want_logweight=tilt_packed is not None)
        total = np.zeros(b - a)
        for (t, g), js in zip(pairs, snap_steps):
            total += g.value_packed(out["snaps"][js])
        exponents[a:b] = -n * total + out["logw"]

    value = log_mean_exp(exponents) / n
    ci = _bootstrap_ci(exponents, n, seed, bootstrap)
    shifted = np.exp(exponents - exponents.max())
    ess = float(shifted.sum() ** 2 / np.sum(shifted**2))
    obs_id = "+".join(g.observable_id for _, g in pairs)
    return LaplaceEstimate(value=float(value), n=float(n), samples=samples,
                           ci=ci, ess=ess, t=times[-1], observable_id=obs_id,
                           tilted=tilt_packed is not None, seed=seed)


def estimate_laplace(y0: SpectralField, g: Observable, n: float, samples: int,
                     params: PhysicalParams, forcing: Optional[ForcingSpec],
                     noise: NoiseSpec, grid: TimeGrid, seed: int = 0,
                     tilt=None, bootstrap: int = 200) -> LaplaceEstimate:
    """(1/n) log E[exp(-n g(Y_n(T)))] from grid.t0 to grid.t_end."""
    return estimate_multi_time(y0, [(grid.t_end, g)], n, samples, params,
                               forcing, noise, grid, seed=seed, tilt=tilt,
                               bootstrap=bootstrap)


def write_ndjson(records: Sequence[dict], path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_ndjson(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
