"""Daily consumption profiles, per-household domains, splits, shots and scaling.

A domain is the set of daily profiles of one household (or one replica drawn
from a long household history). Values are kept as ``(N, T)`` arrays with a
parallel array of day-of-year labels; :class:`EcpSample` is the per-day view.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

DATASET_FORMAT = "fewshot-gmm-dataset"
DATASET_VERSION = 1
ROLE_TAGS = ("source", "target", "validation")


@dataclass(frozen=True)
class EcpSample:
    values: np.ndarray
    day_of_year: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("sample values must be a vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("sample values must be finite")
        if not 1 <= int(self.day_of_year) <= 366:
            raise ValueError(f"day_of_year out of range: {self.day_of_year}")
        object.__setattr__(self, "values", v)


@dataclass
class HouseholdSeries:
    """Chronological daily profiles of one household as read from disk."""

    household_id: str
    dates: list[_dt.date]
    values: np.ndarray  # (days, T), physical units

    @property
    def days(self) -> np.ndarray:
        return np.array([day_of_year(d) for d in self.dates], dtype=np.int64)

    def __len__(self):
        return len(self.dates)


@dataclass
class Domain:
    domain_id: str
    values: np.ndarray  # (N, T)
    days: np.ndarray  # (N,) day of year, 1..366
    source_household_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.days = np.asarray(self.days, dtype=np.int64)
        if self.values.ndim != 2 or self.days.shape != (self.values.shape[0],):
            raise ValueError("domain values must be (N, T) with one day label per row")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def samples(self) -> list[EcpSample]:
        return [EcpSample(v, int(d)) for v, d in zip(self.values, self.days)]

    def with_values(self, values: np.ndarray) -> "Domain":
        return Domain(self.domain_id, values, self.days.copy(), self.source_household_id)


@dataclass
class DomainCollection:
    domains: list[Domain]
    role_tag: str = "source"

    def __post_init__(self):
        if self.role_tag not in ROLE_TAGS:
            raise ValueError(f"role_tag must be one of {ROLE_TAGS}")
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError("domain ids must be unique within a collection")

    def __len__(self):
        return len(self.domains)

    def __iter__(self):
        return iter(self.domains)

    def __getitem__(self, i):
        return self.domains[i]

    @property
    def household_ids(self) -> set[str]:
        return {d.source_household_id for d in self.domains}

    def stacked(self) -> np.ndarray:
        """All domain values as one ``(D, N, T)`` array (domains must share N)."""
        return np.stack([d.values for d in self.domains])


@dataclass
class ShotSet:
    domain_id: str
    values: np.ndarray  # (n, T)
    days: np.ndarray  # (n,)
    seed: int
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def shots(self) -> list[EcpSample]:
        return [EcpSample(v, int(d)) for v, d in zip(self.values, self.days)]


@dataclass(frozen=True)
class Scaler:
    scale: float
    clip_hi: float = 3.0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise DataError(f"scale must be positive and finite, got {self.scale}")
        if not self.clip_hi > 0:
            raise ValueError("clip_hi must be positive")

    def apply(self, x):
        return np.clip(np.asarray(x, dtype=np.float64) / self.scale, 0.0, self.clip_hi)

    def invert(self, x):
        return np.asarray(x, dtype=np.float64) * self.scale

    def to_dict(self) -> dict:
        return {"scale": self.scale, "clip_hi": self.clip_hi}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(float(d["scale"]), float(d["clip_hi"]))


def day_of_year(d: _dt.date) -> int:
    return d.timetuple().tm_yday


@dataclass
class ParseStats:
    rows: int = 0
    dropped: int = 0
    reasons: dict = field(default_factory=dict)

    def drop(self, reason: str):
        self.dropped += 1
        self.reasons[reason] = self.reasons.get(reason, 0) + 1


def expected_header(T: int) -> list[str]:
    return ["domain_or_household_id", "date"] + [f"h{t:02d}" for t in range(T)]


def parse_dataset(path, T: int = 24, stats: ParseStats | None = None) -> list[HouseholdSeries]:
    """Read the dataset CSV into per-household chronological series.

    Rows with the wrong number of readings, unparseable dates, or
    missing/negative/non-finite readings are dropped whole and counted in
    ``stats``. Duplicate (household, date) rows keep the first occurrence.
    """
    stats = stats if stats is not None else ParseStats()
    by_house: dict[str, dict[_dt.date, np.ndarray]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: missing header")
        header = [h.strip() for h in header]
        if len(header) != T + 2:
            raise FormatError(f"{path}: header has {len(header) - 2} reading columns, expected T={T}")
        if header[2:] != expected_header(T)[2:]:
            raise FormatError(f"{path}: malformed header {header!r}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            stats.rows += 1
            if len(row) != T + 2:
                stats.drop("column_count")
                continue
            hid = row[0].strip()
            try:
                date = _dt.date.fromisoformat(row[1].strip())
            except ValueError:
                stats.drop("date")
                continue
            try:
                vals = np.array([float(c) if c.strip() else np.nan for c in row[2:]])
            except ValueError:
                stats.drop("reading")
                continue
            if not np.all(np.isfinite(vals)) or np.any(vals < 0):
                stats.drop("reading")
                continue
            days = by_house.setdefault(hid, {})
            if date in days:
                stats.drop("duplicate")
                continue
            days[date] = vals
    out = []
    for hid in sorted(by_house):
        dates = sorted(by_house[hid])
        out.append(HouseholdSeries(hid, dates, np.stack([by_house[hid][d] for d in dates])))
    return out


def _stable_seed(seed: int, key: str) -> list[int]:
    return [int(seed), zlib.crc32(key.encode("utf-8"))]


def build_domains(series, window: int = 250, seed: int = 0, role_tag: str = "source",
                  excluded: list | None = None) -> DomainCollection:
    """Cut household series into fixed-size domains.

    A household with ``days`` usable days yields ``floor(days / window)``
    domains made of disjoint random day subsets; shorter households are
    skipped and their ids appended to ``excluded``.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    domains = []
    for hs in series:
        n_days = len(hs)
        if n_days < window:
            if excluded is not None:
                excluded.append(hs.household_id)
            continue
        rng = np.random.default_rng(_stable_seed(seed, hs.household_id))
        perm = rng.permutation(n_days)
        days = hs.days
        for r in range(n_days // window):
            idx = np.sort(perm[r * window:(r + 1) * window])
            domains.append(Domain(f"{hs.household_id}#{r}", hs.values[idx], days[idx], hs.household_id))
    return DomainCollection(domains, role_tag)


def split_collection(collection: DomainCollection, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Split at household level into (source, test, validation) collections.

    All replica domains of a household land in the same split.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    houses = sorted(collection.household_ids)
    H = len(houses)
    if H < 3:
        raise DataError(f"need at least 3 households to split, got {H}")
    order = np.random.default_rng(seed).permutation(H)
    n_test = max(1, int(round(ratios[1] * H))) if ratios[1] > 0 else 0
    n_val = max(1, int(round(ratios[2] * H))) if ratios[2] > 0 else 0
    n_src = H - n_test - n_val
    assign = {}
    for rank, i in enumerate(order):
        assign[houses[i]] = 0 if rank < n_src else (1 if rank < n_src + n_test else 2)
    parts = ([], [], [])
    for d in collection:
        parts[assign[d.source_household_id]].append(d)
    return (DomainCollection(parts[0], "source"),
            DomainCollection(parts[1], "target"),
            DomainCollection(parts[2], "validation"))


def _canonical_order(domain: Domain) -> np.ndarray:
    keys = [domain.values[:, t] for t in range(domain.T - 1, -1, -1)] + [domain.days]
    return np.lexsort(keys)


def sample_shots(domain: Domain, n: int, seed: int) -> ShotSet:
    """Draw ``n`` distinct profiles uniformly without replacement.

    Draws are made over a canonical ordering of the domain, so the result
    depends on the set of samples and not on how they are stored.
    """
    N = domain.n_samples
    if not 1 <= n <= N:
        raise DataError(f"cannot draw {n} shots from a domain of {N} samples")
    order = _canonical_order(domain)
    pick = order[np.random.default_rng(_stable_seed(seed, domain.domain_id)).choice(N, size=n, replace=False)]
    return ShotSet(domain.domain_id, domain.values[pick], domain.days[pick], seed, pick)


def fit_scaler(source: DomainCollection, percentile: float = 99.0, clip_hi: float = 3.0) -> Scaler:
    """Global divisor = the given percentile of all pooled source readings."""
    if len(source) == 0:
        raise DataError("cannot fit a scaler on an empty collection")
    pooled = np.concatenate([d.values.ravel() for d in source])
    scale = float(np.percentile(pooled, percentile))
    if not scale > 0:
        raise DataError("degenerate scale: the requested percentile of the pooled readings is zero")
    return Scaler(scale, clip_hi)


def scale_collection(collection: DomainCollection, scaler: Scaler) -> DomainCollection:
    return DomainCollection([d.with_values(scaler.apply(d.values)) for d in collection],
                            collection.role_tag)


# prepared-dataset artifact

SPLIT_ROLES = {"source": "source", "test": "target", "validation": "validation"}


def save_collection(path, collection: DomainCollection):
    ids = [d.domain_id for d in collection]
    if len(collection):
        values = collection.stacked()
        days = np.stack([d.days for d in collection]).astype(np.int16)
    else:
        values = np.zeros((0, 0, 0))
        days = np.zeros((0, 0), dtype=np.int16)
    np.savez(path, values=values, days=days,
             domain_ids=np.array(ids, dtype=str),
             household_ids=np.array([d.source_household_id for d in collection], dtype=str))


def load_collection(path, role_tag: str) -> DomainCollection:
    with np.load(path) as z:
        values, days = z["values"], z["days"]
        ids, houses = z["domain_ids"].tolist(), z["household_ids"].tolist()
    return DomainCollection([Domain(i, v, d, h) for i, v, d, h in zip(ids, values, days, houses)],
                            role_tag)


def save_prepared(out_dir, splits: dict, scaler: Scaler, *, T: int, window: int,
                  split_seed: int, extra: dict | None = None) -> dict:
    """Write ``manifest.json`` plus one ``<split>.npz`` per split (physical units)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, coll in splits.items():
        fname = f"{name}.npz"
        save_collection(out / fname, coll)
        files[name] = fname
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "T": T,
        "window": window,
        "split_seed": split_seed,
        "counts": {name: {"domains": len(c), "households": len(c.household_ids)}
                   for name, c in splits.items()},
        "scaler": scaler.to_dict() if scaler is not None else None,
        "files": files,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FormatError(f"{data_dir}: no manifest.json (not a prepared dataset)")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset format/version")
    return manifest


def load_prepared(data_dir):
    """Return ``(manifest, {split: DomainCollection}, scaler)``; values in physical units."""
    manifest = load_manifest(data_dir)
    splits = {name: load_collection(Path(data_dir) / fname, SPLIT_ROLES.get(name, "source"))
              for name, fname in manifest["files"].items()}
    scaler = Scaler.from_dict(manifest["scaler"]) if manifest.get("scaler") else None
    return manifest, splits, scaler
