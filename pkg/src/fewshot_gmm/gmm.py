"""Fixed-weight diagonal ("spherical") Gaussian mixtures and their EM.

Component weights never change: ``w_j = j / sum(1..J)``. Only the per-component
mean vectors and per-dimension standard deviations are estimated.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .data import Scaler
from .errors import DataError, FormatError

SIGMA_FLOOR = 1e-3
SPACES = ("scaled", "physical")


def fixed_weights(J: int) -> np.ndarray:
    if J < 1:
        raise ValueError(f"J must be >= 1, got {J}")
    j = np.arange(1, J + 1, dtype=np.float64)
    return j / (J * (J + 1) / 2)


@dataclass
class SphericalGmm:
    means: np.ndarray  # (J, T)
    sigmas: np.ndarray  # (J, T), standard deviations
    space: str = "scaled"

    def __post_init__(self):
        self.means = np.array(self.means, dtype=np.float64, ndmin=2)
        self.sigmas = np.array(self.sigmas, dtype=np.float64, ndmin=2)
        if self.means.shape != self.sigmas.shape:
            raise ValueError(f"means {self.means.shape} and sigmas {self.sigmas.shape} differ in shape")
        if not (np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.sigmas))):
            raise ValueError("GMM parameters must be finite")
        if np.any(self.sigmas <= 0):
            raise ValueError("sigmas must be positive")
        if self.space not in SPACES:
            raise ValueError(f"space must be one of {SPACES}")

    @property
    def J(self) -> int:
        return self.means.shape[0]

    @property
    def T(self) -> int:
        return self.means.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return fixed_weights(self.J)

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)

    def copy(self) -> "SphericalGmm":
        return SphericalGmm(self.means.copy(), self.sigmas.copy(), self.space)

    def mixture_mean(self) -> np.ndarray:
        return self.weights @ self.means


def _as_samples(samples, T: int) -> np.ndarray:
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != T:
        raise ValueError(f"expected samples of dimension {T}, got shape {X.shape}")
    return np.ascontiguousarray(X)


def log_density_batch(gmm: SphericalGmm, samples) -> np.ndarray:
    X = _as_samples(samples, gmm.T)
    logp, _ = kernels.loglik_resp(X, gmm.means, gmm.sigmas, gmm.log_weights)
    return logp


def log_density(gmm: SphericalGmm, x) -> float:
    """``log sum_j w_j N(x | mu_j, diag(sigma_j^2))`` for a single profile."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (gmm.T,):
        raise ValueError(f"expected a vector of length {gmm.T}, got shape {x.shape}")
    return float(log_density_batch(gmm, x)[0])


def nll(gmm: SphericalGmm, samples) -> float:
    X = _as_samples(samples, gmm.T)
    if X.shape[0] == 0:
        raise ValueError("nll of an empty sample set is undefined")
    return float(-log_density_batch(gmm, X).sum())


def e_step(gmm: SphericalGmm, samples) -> np.ndarray:
    """Responsibilities, shape (N, J); rows sum to one."""
    X = _as_samples(samples, gmm.T)
    _, resp = kernels.loglik_resp(X, gmm.means, gmm.sigmas, gmm.log_weights)
    return resp


def m_step(samples, gamma, sigma_floor: float = SIGMA_FLOOR, prev: SphericalGmm | None = None):
    """Weighted means and per-dimension standard deviations.

    Components whose total responsibility is below 1e-12 keep the parameters
    of ``prev`` (required in that case).
    """
    X = np.ascontiguousarray(samples, dtype=np.float64)
    gamma = np.ascontiguousarray(gamma, dtype=np.float64)
    if gamma.shape[0] != X.shape[0]:
        raise ValueError("gamma rows must match the number of samples")
    mass, means, var = kernels.weighted_moments(X, gamma)
    sigmas = np.maximum(np.sqrt(var), sigma_floor)
    starved = mass < 1e-12
    if np.any(starved):
        if prev is None:
            raise DataError("component received no responsibility and no previous parameters were given")
        means[starved] = prev.means[starved]
        sigmas[starved] = prev.sigmas[starved]
    return means, sigmas


def em_step(gmm: SphericalGmm, samples, sigma_floor: float = SIGMA_FLOOR) -> SphericalGmm:
    X = _as_samples(samples, gmm.T)
    means, sigmas = m_step(X, e_step(gmm, X), sigma_floor, prev=gmm)
    return SphericalGmm(means, sigmas, gmm.space)


def z_schedule(n: int, beta: float = 0.015) -> int:
    """Number of EM steps for ``n`` shots: ``int(exp(beta * n))``, at least 1."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return max(1, int(math.exp(beta * n)))


def within_domain_tuning(theta_o: SphericalGmm, shots, z: int,
                         sigma_floor: float = SIGMA_FLOOR) -> SphericalGmm:
    """Exactly ``z`` EM steps from ``theta_o`` on the shots (early-stopped EM)."""
    if z < 1:
        raise ValueError(f"z must be >= 1, got {z}")
    X = _as_samples(getattr(shots, "values", shots), theta_o.T)
    if X.shape[0] == 0:
        raise ValueError("within-domain tuning needs at least one shot")
    theta = theta_o
    for _ in range(z):
        theta = em_step(theta, X, sigma_floor)
    return theta


def run_to_convergence(theta_o: SphericalGmm, samples, tol: float = 1e-6, max_iter: int = 500,
                       sigma_floor: float = SIGMA_FLOOR) -> SphericalGmm:
    """EM until the relative NLL improvement drops below ``tol`` (or ``max_iter``)."""
    X = _as_samples(samples, theta_o.T)
    if X.shape[0] == 0:
        raise ValueError("run_to_convergence needs at least one sample")
    theta = theta_o
    prev = nll(theta, X)
    for _ in range(max_iter):
        theta = em_step(theta, X, sigma_floor)
        cur = nll(theta, X)
        if (prev - cur) / max(abs(prev), 1e-300) < tol:
            break
        prev = cur
    return theta


def init_theta_o(pooled, J: int, seed: int = 0, subsample: int = 50_000, tol: float = 1e-6,
                 max_iter: int = 500, sigma_floor: float = SIGMA_FLOOR) -> SphericalGmm:
    """Shared starting point for every domain.

    Component j starts at the per-dimension ``j/(J+1)`` quantile of the pooled
    profiles with the pooled standard deviation, then EM runs to convergence on
    a seeded subsample.
    """
    X = np.asarray(pooled, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 10 * J:
        raise DataError(f"need at least {10 * J} pooled samples to initialise J={J} components")
    if X.shape[0] > subsample:
        idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], size=subsample, replace=False))
        X = X[idx]
    std = X.std(axis=0)
    if not np.any(std > 0):
        raise DataError("pooled samples have zero variance in every dimension")
    q = np.arange(1, J + 1) / (J + 1)
    means = np.quantile(X, q, axis=0)
    sigmas = np.tile(np.maximum(std, sigma_floor), (J, 1))
    return run_to_convergence(SphericalGmm(means, sigmas), X, tol, max_iter, sigma_floor)


def sample_gmm(gmm: SphericalGmm, m: int, seed: int, clip_nonneg: bool = False) -> np.ndarray:
    """Draw ``m`` profiles: component by weight, then independent normals per dimension."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    comp = rng.choice(gmm.J, size=m, p=gmm.weights)
    out = gmm.means[comp] + gmm.sigmas[comp] * rng.standard_normal((m, gmm.T))
    if clip_nonneg:
        np.maximum(out, 0.0, out=out)
    return out


def to_physical(gmm: SphericalGmm, scaler: Scaler) -> SphericalGmm:
    if gmm.space == "physical":
        return gmm.copy()
    return SphericalGmm(scaler.invert(gmm.means), scaler.invert(gmm.sigmas), "physical")


# parameter file

def gmm_to_dict(gmm: SphericalGmm, scaler: Scaler | None = None) -> dict:
    return {
        "J": gmm.J,
        "T": gmm.T,
        "weights": gmm.weights.tolist(),
        "means": gmm.means.tolist(),
        "sigmas": gmm.sigmas.tolist(),
        "scaler": scaler.to_dict() if scaler is not None else None,
        "space": gmm.space,
    }


def gmm_from_dict(d: dict):
    """Return ``(gmm, scaler_or_None)``."""
    try:
        J, T = int(d["J"]), int(d["T"])
        gmm = SphericalGmm(d["means"], d["sigmas"], d.get("space", "scaled"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad GMM parameter record: {exc}") from exc
    if gmm.J != J or gmm.T != T:
        raise FormatError("J/T fields do not match the parameter arrays")
    w = np.asarray(d.get("weights", gmm.weights), dtype=np.float64)
    if w.shape != (J,) or np.max(np.abs(w - fixed_weights(J))) > 1e-12:
        raise FormatError("weights must equal the fixed weight rule")
    scaler = Scaler.from_dict(d["scaler"]) if d.get("scaler") else None
    return gmm, scaler


def dumps_gmm(gmm: SphericalGmm, scaler: Scaler | None = None) -> str:
    return json.dumps(gmm_to_dict(gmm, scaler), indent=1) + "\n"


def write_gmm_file(path, gmm: SphericalGmm, scaler: Scaler | None = None):
    Path(path).write_text(dumps_gmm(gmm, scaler))


def read_gmm_file(path):
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return gmm_from_dict(d)
