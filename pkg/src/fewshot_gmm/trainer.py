"""Episodic meta-training of the shift encoder and the few-shot estimator.

One training step draws a batch of source domains, picks ``n`` shots from each,
tunes the shared starting GMM on the shots for ``z_schedule(n)`` EM steps,
predicts a shift with the encoder and scores the shifted GMM by its NLL on the
whole domain.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffable as D
from .data import DomainCollection, Scaler, _canonical_order, sample_shots
from .encoder import (EncoderConfig, EncoderModel, ShiftVector, apply_shift, encode,
                      encode_graph, init_model, read_checkpoint, shift_arrays, stack_tokens,
                      tokenize, write_checkpoint)
from .errors import DataError, FormatError, NumericError
from .gmm import (SphericalGmm, gmm_from_dict, gmm_to_dict, sample_gmm, within_domain_tuning,
                  z_schedule)
from .metrics import mmd

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "lr", "train_loss", "val_mmd"]


@dataclass
class TrainConfig:
    total_steps: int = 5000
    batch_size: int = 128
    n_min: int = 4
    n_max: int = 25
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    cycle_length: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    z_beta: float = 0.015
    master_seed: int = 0
    eval_every: int = 500
    val_domains: int = 20
    val_shots: int = 4
    val_m: int = 250
    checkpoint_every: int = 500

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")
        if self.batch_size < 1 or self.total_steps < 0 or self.cycle_length < 2:
            raise ValueError("invalid batch size, step count or cycle length")
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def cyclical_lr(step: int, cfg: TrainConfig) -> float:
    """Triangular schedule: lr_min at the start of each cycle, lr_max half way."""
    half = cfg.cycle_length / 2.0
    pos = step % cfg.cycle_length
    frac = pos / half if pos <= half else (cfg.cycle_length - pos) / half
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac


@dataclass
class Episode:
    domain_id: str
    shot_values: np.ndarray  # (n, T) scaled
    shot_days: np.ndarray
    theta_e: SphericalGmm
    full_domain: np.ndarray  # (N, T) scaled


class EpisodeSampler:
    """Draws training batches from a scaled source collection.

    The batch for ``step`` depends only on ``(master_seed, step)``, which is
    what makes resumed runs replay the same data.
    """

    def __init__(self, source: DomainCollection, theta_o: SphericalGmm, cfg: TrainConfig,
                 n_slots: int):
        if len(source) == 0:
            raise DataError("source collection is empty")
        if cfg.batch_size > len(source):
            raise DataError(f"batch size {cfg.batch_size} exceeds {len(source)} source domains")
        if cfg.n_max > n_slots:
            raise ValueError(f"n_max={cfg.n_max} exceeds the encoder's {n_slots} shot slots")
        sizes = {d.n_samples for d in source}
        if len(sizes) != 1:
            raise DataError("source domains must share a size")
        if min(sizes) < cfg.n_max:
            raise DataError("source domains are smaller than n_max")
        self.cfg = cfg
        self.theta_o = theta_o
        self.ids = [d.domain_id for d in source]
        self.values = np.stack([d.values for d in source])
        self.days = np.stack([d.days for d in source])
        self.order = np.stack([_canonical_order(d) for d in source])

    def episodes(self, step: int) -> list[Episode]:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.master_seed, step])
        picks = rng.choice(len(self.ids), size=cfg.batch_size, replace=False)
        ns = rng.integers(cfg.n_min, cfg.n_max + 1, size=cfg.batch_size)
        out = []
        N = self.values.shape[1]
        for k, n in zip(picks, ns):
            idx = self.order[k][rng.choice(N, size=int(n), replace=False)]
            shots = self.values[k][idx]
            theta_e = within_domain_tuning(self.theta_o, shots, z_schedule(int(n), cfg.z_beta))
            out.append(Episode(self.ids[k], shots, self.days[k][idx], theta_e, self.values[k]))
        return out


def episode_tokens(episodes, config: EncoderConfig):
    return stack_tokens(tokenize(e.shot_values, e.theta_e, config, days=e.shot_days)
                        for e in episodes)


def episode_loss(model: EncoderModel, episodes) -> D.Array:
    """Mean over episodes of the shifted GMM's NLL on the full domain, per sample."""
    cfg = model.config
    tokens = episode_tokens(episodes, cfg)
    d_mu, d_sg = encode_graph(model, tokens)
    means = np.stack([e.theta_e.means for e in episodes])
    sigmas = np.stack([e.theta_e.sigmas for e in episodes])
    mu_hat, sg_hat = shift_arrays(means, sigmas, d_mu, d_sg, cfg)
    X = np.stack([e.full_domain for e in episodes])
    nll = D.gmm_nll(X, mu_hat, sg_hat, episodes[0].theta_e.log_weights)
    return D.scale(D.reduce_mean(nll), 1.0 / X.shape[1])


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, model: EncoderModel) -> "AdamState":
        return cls({k: np.zeros(p.shape, np.float32) for k, p in model.params.items()},
                   {k: np.zeros(p.shape, np.float32) for k, p in model.params.items()})

    def blocks(self) -> dict:
        out = {}
        for k in self.m:
            out["adam.m." + k] = self.m[k]
            out["adam.v." + k] = self.v[k]
        return out

    @classmethod
    def from_blocks(cls, model: EncoderModel, blocks: dict, t: int) -> "AdamState":
        try:
            m = {k: np.array(blocks["adam.m." + k], np.float32) for k in model.params}
            v = {k: np.array(blocks["adam.v." + k], np.float32) for k in model.params}
        except KeyError as e:
            raise FormatError(f"checkpoint lacks optimizer state {e}") from None
        return cls(m, v, t)


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel()))
                             for g in grads.values())))
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm > max_norm:
        s = np.float32(max_norm / norm)
        for g in grads.values():
            g *= s
    return norm


def adam_update(model: EncoderModel, grads: dict, state: AdamState, lr: float, cfg: TrainConfig):
    state.t += 1
    b1, b2 = np.float32(cfg.beta1), np.float32(cfg.beta2)
    c1 = 1.0 - cfg.beta1 ** state.t
    c2 = 1.0 - cfg.beta2 ** state.t
    step = np.float32(lr * np.sqrt(c2) / c1)
    eps = np.float32(cfg.adam_eps * np.sqrt(c2))
    for k, p in model.params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= step * m / (np.sqrt(v) + eps)


def train_step(model: EncoderModel, episodes, state: AdamState, lr: float, cfg: TrainConfig) -> float:
    """One optimizer step; returns the pre-update loss.

    Per-op finite checks are off here; the loss and gradient norm are checked
    instead and a non-finite value raises :class:`NumericError` before any
    parameter changes.
    """
    with D.finite_checks(False):
        loss = episode_loss(model, episodes)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite training loss {value}")
        names = model.names()
        grads = dict(zip(names, D.gradients(loss, model.parameters())))
    grads = {k: np.array(g, dtype=np.float32) for k, g in grads.items()}
    clip_by_global_norm(grads, cfg.grad_clip)
    adam_update(model, grads, state, lr, cfg)
    return value


# few-shot estimation

class Estimator:
    """Trained encoder plus the shared starting GMM and the data scaler."""

    def __init__(self, model: EncoderModel, theta_o: SphericalGmm, scaler: Scaler,
                 z_beta: float = 0.015):
        if theta_o.J != model.config.J or theta_o.T != model.config.T:
            raise ValueError("theta_o does not match the encoder config")
        self.model = model
        self.theta_o = theta_o
        self.scaler = scaler
        self.z_beta = z_beta

    @property
    def config(self) -> EncoderConfig:
        return self.model.config

    @classmethod
    def from_checkpoint(cls, path) -> "Estimator":
        model, header, _ = read_checkpoint(path)
        try:
            theta_o, _ = gmm_from_dict(header["theta_o"])
            scaler = Scaler.from_dict(header["scaler"])
            z_beta = float(header.get("train_config", {}).get("z_beta", 0.015))
        except KeyError as e:
            raise FormatError(f"{path}: checkpoint header lacks {e}") from None
        return cls(model, theta_o, scaler, z_beta)

    def theta_e(self, shots) -> SphericalGmm:
        n = len(shots)
        return within_domain_tuning(self.theta_o, shots, z_schedule(n, self.z_beta))

    def predict(self, shot_sets, batch_size: int = 128) -> list[SphericalGmm]:
        """``shot_sets`` holds ``(values, days)`` pairs of scaled shots."""
        shot_sets = list(shot_sets)
        out = []
        for lo in range(0, len(shot_sets), batch_size):
            chunk = shot_sets[lo:lo + batch_size]
            thetas = [self.theta_e(np.asarray(v, np.float64)) for v, _ in chunk]
            tokens = stack_tokens(tokenize(np.asarray(v, np.float64), th, self.config, days=d)
                                  for (v, d), th in zip(chunk, thetas))
            er = encode(self.model, tokens)
            for b, th in enumerate(thetas):
                g = apply_shift(th, ShiftVector(er.d_mu[b], er.d_sigma[b]), self.config)
                if not (np.all(np.isfinite(g.means)) and np.all(np.isfinite(g.sigmas))):
                    raise NumericError("non-finite estimate")
                out.append(g)
        return out

    def estimate(self, shots_physical, days) -> SphericalGmm:
        """Scaled-space estimate from shots given in physical units."""
        shots = np.atleast_2d(np.asarray(shots_physical, dtype=np.float64))
        if shots.shape[1] != self.config.T:
            raise DataError(f"shots have {shots.shape[1]} readings, model expects {self.config.T}")
        if not 1 <= len(shots) <= self.config.n_max:
            raise DataError(f"need between 1 and {self.config.n_max} shots, got {len(shots)}")
        return self.predict([(self.scaler.apply(shots), np.asarray(days))])[0]


def validation_mmd(est: Estimator, validation: DomainCollection, cfg: TrainConfig) -> float:
    """Mean MMD over the first ``val_domains`` validation domains at ``val_shots`` shots."""
    doms = list(validation)[:cfg.val_domains]
    if not doms:
        return float("nan")
    shots = [sample_shots(d, cfg.val_shots, cfg.master_seed) for d in doms]
    gmms = est.predict([(s.values, s.days) for s in shots])
    scores = [mmd(sample_gmm(g, cfg.val_m, [cfg.master_seed, i]), d.values)
              for i, (g, d) in enumerate(zip(gmms, doms))]
    return float(np.mean(scores))


# training loop

@dataclass
class TrainResult:
    steps: int
    last_checkpoint: Path
    best_checkpoint: Path | None
    best_val_mmd: float
    log_path: Path
    numeric_events: list = field(default_factory=list)


def _header(cfg: TrainConfig, theta_o, scaler, step, adam_t, best, lr_scale, extra=None):
    h = {"format": "fewshot-gmm-checkpoint", "step": step, "adam_t": adam_t,
         "best_val_mmd": best, "lr_scale": lr_scale, "train_config": cfg.to_dict(),
         "theta_o": gmm_to_dict(theta_o), "scaler": scaler.to_dict()}
    h.update(extra or {})
    return h


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _rewrite_log(path: Path, upto: int):
    """Keep the header and the rows with ``step < upto``."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["step"]) < upto]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        w.writerows(rows)


def train(source: DomainCollection, validation: DomainCollection, theta_o: SphericalGmm,
          scaler: Scaler, enc_cfg: EncoderConfig, cfg: TrainConfig, out_dir,
          resume: str | Path | None = None, extra_header: dict | None = None) -> TrainResult:
    """Meta-train the encoder on scaled ``source`` domains.

    Writes ``train_log.csv`` (step, lr, train_loss, val_mmd), ``last.ckpt``
    every ``checkpoint_every`` steps and at the end, and ``best.ckpt`` whenever
    the validation MMD improves. With ``resume`` the run continues from the
    checkpoint's step and replays exactly what the uninterrupted run would do.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    last_path, best_path = out / "last.ckpt", out / "best.ckpt"

    if resume is not None:
        model, header, blocks = read_checkpoint(resume)
        if model.config != enc_cfg:
            raise FormatError("resume checkpoint has a different encoder config")
        start = int(header["step"])
        state = AdamState.from_blocks(model, blocks, int(header["adam_t"]))
        best = header.get("best_val_mmd")
        lr_scale = float(header.get("lr_scale", 1.0))
        _rewrite_log(log_path, start)
    else:
        model = init_model(enc_cfg, cfg.master_seed)
        start, best, lr_scale = 0, None, 1.0
        state = AdamState.zeros(model)
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_FIELDS)

    def save(path, step):
        write_checkpoint(path, model, _header(cfg, theta_o, scaler, step, state.t, best,
                                              lr_scale, extra_header), state.blocks())

    events = []
    if cfg.total_steps == 0 or start >= cfg.total_steps:
        save(last_path, start)
        return TrainResult(start, last_path, best_path if best_path.exists() else None,
                           float("nan") if best is None else best, log_path, events)

    sampler = EpisodeSampler(source, theta_o, cfg, enc_cfg.n_max)
    est = Estimator(model, theta_o, scaler, cfg.z_beta)
    with open(log_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        for step in range(start, cfg.total_steps):
            lr = cyclical_lr(step, cfg) * lr_scale
            try:
                loss = train_step(model, sampler.episodes(step), state, lr, cfg)
            except NumericError as e:
                # step skipped, learning rate halved for the rest of the run
                lr_scale *= 0.5
                events.append({"step": step, "error": str(e), "lr_scale": lr_scale})
                log.warning("step %d: %s; lr scale now %g", step, e, lr_scale)
                loss = float("nan")
            done = step + 1
            val = None
            if done % cfg.eval_every == 0 or done == cfg.total_steps:
                val = validation_mmd(est, validation, cfg)
                if np.isfinite(val) and (best is None or val < best):
                    best = val
                    save(best_path, done)
            writer.writerow([step, repr(lr), repr(loss), _fmt(val)])
            if done % cfg.checkpoint_every == 0 or done == cfg.total_steps:
                fh.flush()
                save(last_path, done)
    if events:
        (out / "numeric_events.json").write_text(json.dumps(events, indent=1) + "\n")
    return TrainResult(cfg.total_steps, last_path, best_path if best_path.exists() else None,
                       float("nan") if best is None else best, log_path, events)
