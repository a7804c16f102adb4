"""Synthetic households with known mixture distributions, and the baseline benchmark.

Each synthetic domain has a ground-truth spherical GMM whose component means
are smooth positive daily curves: a level with a couple of slow harmonics plus
a morning and an evening peak. Components differ in overall scale and in peak
timing and height, so the mixture is multimodal and right-skewed like real
household load. Profiles are drawn from the truth and clipped at zero.
"""
from __future__ import annotations

import csv
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import Domain, DomainCollection, sample_shots
from .gmm import SphericalGmm, init_theta_o, nll, run_to_convergence, sample_gmm
from .metrics import METRICS, compare_sets, gmm_mmd, gmm_sample_mmd, median_bandwidth

METHODS = ("sampled", "theta_p", "ours")
LONG_FIELDS = ["domain_id", "n_shots", "method", "metric", "value", "seed"]
AGG_FIELDS = ["n_shots", "method", "mean_mmd", "std_mmd"]


@dataclass
class SynthConfig:
    """Generator settings; every ``*_range`` is a ``(lo, hi)`` uniform range.

    Amplitudes are relative to the household level (kWh per reading), hours
    are clock hours and widths are standard deviations in hours.
    """
    n_domains: int = 100
    T: int = 24
    J_true: int = 4
    samples_per_domain: int = 250
    level_range: tuple = (0.15, 0.6)
    n_harmonics: int = 2
    harmonic_amp_range: tuple = (0.0, 0.3)
    morning_hour_range: tuple = (6.0, 9.0)
    evening_hour_range: tuple = (17.0, 21.5)
    morning_amp_range: tuple = (0.5, 3.0)
    evening_amp_range: tuple = (1.0, 5.0)
    morning_width_range: tuple = (0.8, 2.0)
    evening_width_range: tuple = (1.2, 3.0)
    spread_range: tuple = (0.2, 0.6)
    peak_jitter_hours: float = 1.0
    sigma_frac_range: tuple = (0.1, 0.3)
    sigma_abs: float = 0.01
    master_seed: int = 0
    id_prefix: str = "syn"

    def __post_init__(self):
        if self.n_domains < 0 or self.T < 1 or self.J_true < 1 or self.samples_per_domain < 1:
            raise ValueError("counts must be positive")
        for f in fields(self):
            if f.name.endswith("_range"):
                lo, hi = getattr(self, f.name)
                if not lo <= hi:
                    raise ValueError(f"{f.name} must satisfy lo <= hi")
                setattr(self, f.name, (float(lo), float(hi)))
        if self.level_range[0] <= 0 or self.sigma_abs <= 0:
            raise ValueError("level and sigma_abs must be positive")
        if self.harmonic_amp_range[1] * self.n_harmonics >= 1:
            raise ValueError("harmonics could make the base curve negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names})


def _bump(hours, centre, width):
    # circular distance on the 24 h clock
    d = np.abs(hours - centre) % 24.0
    d = np.minimum(d, 24.0 - d)
    return np.exp(-0.5 * (d / width) ** 2)


def draw_truth(rng: np.random.Generator, cfg: SynthConfig) -> SphericalGmm:
    """One household's ground-truth mixture in physical units."""
    u = lambda r: rng.uniform(*r)  # noqa: E731
    hours = (np.arange(cfg.T) + 0.5) * 24.0 / cfg.T
    level = float(np.exp(rng.uniform(np.log(cfg.level_range[0]), np.log(cfg.level_range[1]))))
    base = np.ones(cfg.T)
    for h in range(1, cfg.n_harmonics + 1):
        base += u(cfg.harmonic_amp_range) * np.cos(2 * np.pi * h * hours / 24.0 + rng.uniform(0, 2 * np.pi))
    m_hour, e_hour = u(cfg.morning_hour_range), u(cfg.evening_hour_range)
    m_amp, e_amp = u(cfg.morning_amp_range), u(cfg.evening_amp_range)
    m_w, e_w = u(cfg.morning_width_range), u(cfg.evening_width_range)
    spread = u(cfg.spread_range)
    frac = u(cfg.sigma_frac_range)
    J = cfg.J_true
    scales = np.linspace(1.0 - spread, 1.0 + spread, J) if J > 1 else np.ones(1)
    jit = cfg.peak_jitter_hours
    means = np.empty((J, cfg.T))
    for j in range(J):
        curve = scales[j] * base
        curve = curve + m_amp * rng.uniform(0.5, 1.5) * _bump(hours, m_hour + rng.uniform(-jit, jit), m_w)
        curve = curve + e_amp * scales[j] * rng.uniform(0.5, 1.5) * _bump(hours, e_hour + rng.uniform(-jit, jit), e_w)
        means[j] = level * curve
    sigmas = frac * means + cfg.sigma_abs
    return SphericalGmm(means, sigmas, space="physical")


def gen_collection(cfg: SynthConfig, role_tag: str = "source", offset: int = 0):
    """Generate ``cfg.n_domains`` domains; returns ``(DomainCollection, truths)``.

    Domain ``k`` depends only on ``(master_seed, offset + k)``. ``truths`` maps
    domain ids to physical-unit mixtures.
    """
    domains, truths = [], {}
    for k in range(offset, offset + cfg.n_domains):
        rng = np.random.default_rng([cfg.master_seed, k])
        truth = draw_truth(rng, cfg)
        values = sample_gmm(truth, cfg.samples_per_domain, int(rng.integers(2**63)), clip_nonneg=True)
        start = int(rng.integers(0, 365))
        days = (start + np.arange(cfg.samples_per_domain)) % 365 + 1
        hid = f"{cfg.id_prefix}{k:05d}"
        dom = Domain(f"{hid}#0", values, days.astype(np.int64), hid)
        domains.append(dom)
        truths[dom.domain_id] = truth
    return DomainCollection(domains, role_tag), truths


def gen_splits(cfg: SynthConfig, n_source: int, n_target: int, n_validation: int):
    """Source, target and validation collections from one generator stream.

    Returns ``(splits, truths)`` with ``splits`` keyed ``source``/``test``/``validation``
    (the dataset artifact's split names).
    """
    splits, truths = {}, {}
    offset = 0
    for name, role, count in (("source", "source", n_source), ("test", "target", n_target),
                              ("validation", "validation", n_validation)):
        c = SynthConfig.from_dict({**cfg.to_dict(), "n_domains": count})
        coll, tr = gen_collection(c, role, offset)
        splits[name] = coll
        truths.update(tr)
        offset += count
    return splits, truths


def oracle_param_error(estimated: SphericalGmm, truth: SphericalGmm, m: int = 2000,
                       seed: int = 0) -> float:
    """Distribution-level error between two mixtures of possibly different J.

    RBF-kernel MMD with the median-heuristic bandwidth taken from ``m`` draws
    of each mixture. The kernel expectations are evaluated in closed form, so
    identical mixtures give exactly 0 and there is no sampling noise beyond the
    bandwidth choice.
    """
    if estimated.T != truth.T:
        raise ValueError("mixtures differ in dimension")
    Z = np.vstack([sample_gmm(estimated, m, [seed, 0]), sample_gmm(truth, m, [seed, 1])])
    h = median_bandwidth(Z[np.random.default_rng(seed).choice(len(Z), min(len(Z), 2000), replace=False)])
    return gmm_mmd(estimated, truth, h)


def self_distance_null(truth: SphericalGmm, n_samples: int = 250, reps: int = 50,
                       m: int = 2000, seed: int = 0) -> np.ndarray:
    """Distance between ``truth`` and the empirical law of fresh ``n_samples``-draws.

    Uses the same kernel and bandwidth rule as :func:`oracle_param_error`. A
    fitted mixture whose error is below this null is at least as close to the
    truth as the raw data it was fitted on.
    """
    Z = np.vstack([sample_gmm(truth, m, [seed, 0]), sample_gmm(truth, m, [seed, 1])])
    h = median_bandwidth(Z[np.random.default_rng(seed).choice(len(Z), min(len(Z), 2000), replace=False)])
    return np.array([gmm_sample_mmd(truth, sample_gmm(truth, n_samples, [seed, 2, r], clip_nonneg=True), h)
                     for r in range(reps)])


def fit_full_domain(values, J: int, seed: int = 0, restarts: int = 10) -> SphericalGmm:
    """Best-likelihood EM fit on one domain.

    Candidates are the quantile-spread start plus ``restarts`` starts at random
    data points (random component order, pooled spread), each run to
    convergence.
    """
    X = np.asarray(values, dtype=np.float64)
    best = init_theta_o(X, J, seed)
    best_nll = nll(best, X)
    rng = np.random.default_rng([seed, 1])
    std = np.maximum(X.std(axis=0), 1e-3)
    for _ in range(restarts):
        start = SphericalGmm(X[rng.choice(len(X), J, replace=False)], np.tile(std, (J, 1)))
        cand = run_to_convergence(start, X)
        c_nll = nll(cand, X)
        if c_nll < best_nll:
            best, best_nll = cand, c_nll
    if J <= 6:
        best = _best_weight_assignment(best, X)
    return best


def _best_weight_assignment(gmm: SphericalGmm, X) -> SphericalGmm:
    """Try every ordering of components against the fixed weights, refit from the best.

    EM cannot move a component to a different weight slot, so a fit with the
    right shapes in the wrong slots is a stable local optimum.
    """
    from itertools import permutations

    from scipy.special import logsumexp

    from .kernels import component_logpdf

    while True:
        comp = component_logpdf(X, gmm.means, gmm.sigmas, np.zeros(gmm.J))
        lw = gmm.log_weights
        scores = {p: -logsumexp(comp[:, p] + lw, axis=1).sum() for p in permutations(range(gmm.J))}
        perm = min(scores, key=scores.get)
        if list(perm) == list(range(gmm.J)):
            return gmm
        cand = run_to_convergence(SphericalGmm(gmm.means[list(perm)], gmm.sigmas[list(perm)], gmm.space), X)
        if nll(cand, X) >= nll(gmm, X):
            return gmm
        gmm = cand


# benchmark

def _seed(seed: int, n: int, method: str, domain_id: str) -> list:
    return [seed, n, METHODS.index(method), zlib.crc32(domain_id.encode())]


def _domain_rows(args):
    dom_id, values, n, seed, sets, m = args
    rows = []
    for method, generated in sets:
        rep = compare_sets(generated, values, seed)
        for metric in METRICS:
            rows.append({"domain_id": dom_id, "n_shots": n, "method": method, "metric": metric,
                         "value": rep.values()[metric], "seed": seed})
    return rows


def run_benchmark(estimator, targets: DomainCollection, shot_counts=range(1, 25), seeds=(0,),
                  m: int = 250, workers: int = 1):
    """Compare sampled shots, θ_p and the trained estimator on scaled ``targets``.

    Returns ``(long_rows, aggregate_rows)``: one long row per domain, n, method,
    metric and seed, and per-(n, method) mean and standard deviation of MMD.
    """
    if len(targets) and targets[0].T != estimator.config.T:
        raise ValueError("targets and checkpoint differ in T")
    jobs = []
    for seed in seeds:
        for n in shot_counts:
            shots = [sample_shots(d, n, seed) for d in targets]
            if n <= estimator.config.n_max:
                ours = estimator.predict([(s.values, s.days) for s in shots])
            else:
                ours = [None] * len(shots)
            for d, s, g in zip(targets, shots, ours):
                sets = [("sampled", s.values)]
                tp = run_to_convergence(estimator.theta_o, s.values)
                sets.append(("theta_p", sample_gmm(tp, m, _seed(seed, n, "theta_p", d.domain_id))))
                if g is not None:
                    sets.append(("ours", sample_gmm(g, m, _seed(seed, n, "ours", d.domain_id))))
                jobs.append((d.domain_id, d.values, n, seed, sets, m))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_domain_rows, jobs, chunksize=8))
    else:
        parts = [_domain_rows(j) for j in jobs]
    rows = [r for part in parts for r in part]
    return rows, aggregate(rows)


def aggregate(rows) -> list[dict]:
    """Per (n, method) MMD mean, population std, standard error and domain count."""
    groups = {}
    for r in rows:
        if r["metric"] == "mmd":
            groups.setdefault((r["n_shots"], r["method"]), []).append(r["value"])
    out = []
    for (n, method) in sorted(groups, key=lambda k: (k[0], METHODS.index(k[1]))):
        v = np.asarray(groups[(n, method)])
        out.append({"n_shots": n, "method": method, "mean_mmd": float(v.mean()),
                    "std_mmd": float(v.std()), "sem_mmd": float(v.std(ddof=1) / np.sqrt(len(v)))
                    if len(v) > 1 else float("nan"), "count": len(v)})
    return out


def _write(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_long_csv(path, rows):
    _write(path, LONG_FIELDS, rows)


def write_aggregate_csv(path, agg):
    _write(path, AGG_FIELDS, agg)
