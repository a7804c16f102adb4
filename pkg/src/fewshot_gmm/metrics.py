"""Distances between a generated profile set and a reference set.

All functions take ``(m, T)`` arrays. KS and Wasserstein are averaged over the
T per-time-step marginals; MMD and KL act on the joint T-dimensional points.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist, pdist
from scipy.stats import ks_2samp, wasserstein_distance

from .gmm import SphericalGmm, sample_gmm

DIST_FLOOR = 1e-12
METRICS = ("mmd", "kl", "ks", "wd", "mse_mean")
REPORT_FIELDS = ["domain_id", "n_shots", "method", "mmd", "kl", "ks", "wd", "mse_mean", "seed"]


def _pair(A, B):
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape} vs {B.shape}")
    if len(A) == 0 or len(B) == 0:
        raise ValueError("sample sets must be non-empty")
    return A, B


def median_bandwidth(Z) -> float:
    Z = np.asarray(Z, dtype=np.float64)
    return float(np.median(pdist(Z))) if len(Z) > 1 else 0.0


def mmd(A, B, bandwidth: float | None = None) -> float:
    """Square root of the biased (V-statistic) squared MMD with an RBF kernel.

    ``k(x, y) = exp(-|x - y|^2 / (2 h^2))`` with ``h`` the median pairwise
    distance over the pooled points unless given. Returns 0 when the pooled
    points are all identical.
    """
    A, B = _pair(A, B)
    Z = np.vstack([A, B])
    h = median_bandwidth(Z) if bandwidth is None else float(bandwidth)
    if not h > 0:
        return 0.0
    K = np.exp(-cdist(Z, Z, "sqeuclidean") / (2.0 * h * h))
    m = len(A)
    kxx, kyy, kxy = K[:m, :m].mean(), K[m:, m:].mean(), K[:m, m:].mean()
    return float(np.sqrt(max(kxx + kyy - 2.0 * kxy, 0.0)))


def kl_knn(A, B, k: int = 5) -> float:
    """k-nearest-neighbour estimate of KL(P_A || P_B).

    ``(T/m) sum_i log(nu_k(i) / rho_k(i)) + log(m_B / (m_A - 1))`` with rho the
    distance to the k-th neighbour within A (excluding the point itself) and
    nu the distance to the k-th neighbour in B. Distances are floored at 1e-12.
    """
    A, B = _pair(A, B)
    m, T = A.shape
    if m <= k or len(B) < k:
        raise ValueError(f"kl_knn needs more than k={k} points in each set")
    rho = cKDTree(A).query(A, k=k + 1)[0][:, k]
    nu = cKDTree(B).query(A, k=k)[0]
    nu = nu if nu.ndim == 1 else nu[:, k - 1]
    rho = np.maximum(rho, DIST_FLOOR)
    nu = np.maximum(nu, DIST_FLOOR)
    return float(T / m * np.log(nu / rho).sum() + np.log(len(B) / (m - 1)))


def ks_marginal(A, B) -> float:
    A, B = _pair(A, B)
    return float(np.mean(ks_2samp(A, B, axis=0).statistic))


def wd_marginal(A, B) -> float:
    A, B = _pair(A, B)
    return float(np.mean([wasserstein_distance(A[:, t], B[:, t]) for t in range(A.shape[1])]))


def mse_mean(A, B) -> float:
    A, B = _pair(A, B)
    return float(np.mean((A.mean(axis=0) - B.mean(axis=0)) ** 2))


@dataclass
class MetricReport:
    mmd: float
    kl: float
    ks: float
    wd: float
    mse_mean: float
    m_generated: int
    m_reference: int
    seed: int

    def values(self) -> dict:
        return {k: getattr(self, k) for k in METRICS}

    def to_dict(self) -> dict:
        return asdict(self)


def compare_sets(generated, reference, seed: int = 0, k: int = 5) -> MetricReport:
    """All five metrics; KL is NaN when the generated set has too few points."""
    G, R = _pair(generated, reference)
    kl = kl_knn(G, R, k) if len(G) > k and len(R) >= k else float("nan")
    return MetricReport(mmd(G, R), kl, ks_marginal(G, R), wd_marginal(G, R), mse_mean(G, R),
                        len(G), len(R), seed)


def evaluate_domain(gmm: SphericalGmm, domain, m: int = 250, seed: int = 0,
                    space: str = "scaled") -> MetricReport:
    """Draw ``m`` profiles from ``gmm`` and compare them with the domain's data.

    ``domain`` is a :class:`~fewshot_gmm.data.Domain` or an ``(N, T)`` array whose
    values live in ``space``.
    """
    if gmm.space != space:
        raise ValueError(f"GMM is in {gmm.space} space but the domain data is {space}")
    values = getattr(domain, "values", domain)
    if gmm.T != np.shape(values)[1]:
        raise ValueError("GMM and domain dimensions differ")
    return compare_sets(sample_gmm(gmm, m, seed), values, seed)


def split_half_null(values, reps: int = 100, seed: int = 0) -> np.ndarray:
    """MMDs between random halves of one domain (self-distance reference)."""
    X = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    half = len(X) // 2
    out = np.empty(reps)
    for r in range(reps):
        perm = rng.permutation(len(X))
        out[r] = mmd(X[perm[:half]], X[perm[half:2 * half]])
    return out


def _gauss_kernel_mean(m1, s1, m2, s2, h):
    """E k(x, y) for x ~ N(m1, diag s1^2), y ~ N(m2, diag s2^2), all pairs of components."""
    var = h * h + s1[:, None, :] ** 2 + s2[None, :, :] ** 2
    d2 = (m1[:, None, :] - m2[None, :, :]) ** 2
    return np.exp((0.5 * np.log(h * h / var) - 0.5 * d2 / var).sum(axis=2))


def gmm_mmd(a: SphericalGmm, b: SphericalGmm, bandwidth: float) -> float:
    """Exact RBF-kernel MMD between two diagonal Gaussian mixtures."""
    if a.T != b.T:
        raise ValueError("mixtures differ in dimension")
    wa, wb = a.weights, b.weights
    kaa = wa @ _gauss_kernel_mean(a.means, a.sigmas, a.means, a.sigmas, bandwidth) @ wa
    kbb = wb @ _gauss_kernel_mean(b.means, b.sigmas, b.means, b.sigmas, bandwidth) @ wb
    kab = wa @ _gauss_kernel_mean(a.means, a.sigmas, b.means, b.sigmas, bandwidth) @ wb
    return float(np.sqrt(max(kaa + kbb - 2.0 * kab, 0.0)))


def gmm_sample_mmd(gmm: SphericalGmm, X, bandwidth: float) -> float:
    """Exact RBF-kernel MMD between a diagonal Gaussian mixture and a point set."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    w = gmm.weights
    kgg = w @ _gauss_kernel_mean(gmm.means, gmm.sigmas, gmm.means, gmm.sigmas, bandwidth) @ w
    kxx = np.exp(-cdist(X, X, "sqeuclidean") / (2.0 * bandwidth * bandwidth)).mean()
    kgx = (_gauss_kernel_mean(gmm.means, gmm.sigmas, X, np.zeros_like(X), bandwidth).mean(axis=1) @ w)
    return float(np.sqrt(max(kgg + kxx - 2.0 * kgx, 0.0)))


def write_report_csv(path, rows):
    """Rows are dicts with the :data:`REPORT_FIELDS` keys."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
