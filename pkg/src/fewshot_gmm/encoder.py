"""Set-input transformer that predicts a parameter shift for an early-stopped GMM.

Input tokens are the daily profiles (shots) plus one token per component mean
and one per component sigma, each a length-T vector. Shots carry a learned
day-of-year embedding, parameter tokens a learned component embedding, and
every token a learned kind embedding (sample / mu / sigma / pad). There is no
positional encoding, so the output does not depend on the order of the shots.
Unused shot slots hold the pad embedding and are masked out of attention.
"""
from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffable as D
from .diffable import Array
from .errors import FormatError
from .gmm import SIGMA_FLOOR, SphericalGmm

KIND_SAMPLE, KIND_MU, KIND_SIGMA, KIND_PAD = 0, 1, 2, 3
N_DAYS = 366
SHIFT_SPACES = ("additive_floored", "log_additive")


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    T: int = 24
    J: int = 6
    n_max: int = 25
    sigma_floor: float = SIGMA_FLOOR
    sigma_shift_space: str = "additive_floored"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_max < 1 or self.n_layers < 0 or self.J < 1 or self.T < 1:
            raise ValueError(f"invalid encoder config {self}")
        if self.sigma_shift_space not in SHIFT_SPACES:
            raise ValueError(f"sigma_shift_space must be one of {SHIFT_SPACES}")

    @property
    def seq_len(self) -> int:
        return self.n_max + 2 * self.J

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def param_count(config: EncoderConfig) -> int:
    """Closed-form number of scalar parameters.

    3 input projections (T*d + d each), day table 366*d, component table J*d,
    kind table 4*d; per layer two RMSNorm gains (2d), four attention matrices
    (4d^2, no biases), feed-forward (d*ff + ff + ff*d + d); final RMSNorm gain d;
    two heads (d*T + T each).
    """
    d, T, J, ff, L = config.d_model, config.T, config.J, config.d_ff, config.n_layers
    per_layer = 2 * d + 4 * d * d + d * ff + ff + ff * d + d
    return 3 * (T * d + d) + N_DAYS * d + J * d + 4 * d + L * per_layer + d + 2 * (d * T + T)


@dataclass
class TokenSequence:
    """Raw tokens for one episode, or a batch when arrays carry a leading axis.

    Layout: ``n_slots`` shot slots (used ones first, then pads), J mean tokens,
    J sigma tokens. ``values`` holds the length-T vector of every token (zeros
    in pad slots); ``attn_mask`` is True for tokens that may be attended to.
    """

    values: np.ndarray  # (S, T)
    kind: np.ndarray  # (S,)
    attn_mask: np.ndarray  # (S,) bool
    date_ids: np.ndarray  # (S,) 1..366 on shot tokens, 0 elsewhere
    component_ids: np.ndarray  # (S,) 1..J on parameter tokens, 0 elsewhere
    J: int

    @property
    def batched(self) -> bool:
        return self.values.ndim == 3

    @property
    def seq_len(self) -> int:
        return self.values.shape[-2]

    @property
    def n_slots(self) -> int:
        return self.seq_len - 2 * self.J


def tokenize(shots, theta_e: SphericalGmm, config: EncoderConfig, days=None) -> TokenSequence:
    """Build the token sequence for one episode.

    ``shots`` is a :class:`~fewshot_gmm.data.ShotSet` (scaled values) or an
    ``(n, T)`` array together with ``days``.
    """
    if days is None:
        values, days = shots.values, shots.days
    else:
        values = shots
    values = np.asarray(values, dtype=np.float64)
    days = np.asarray(days, dtype=np.int64)
    n = values.shape[0]
    if n > config.n_max:
        raise ValueError(f"{n} shots exceed n_max={config.n_max}")
    if n < 1:
        raise ValueError("need at least one shot")
    if theta_e.T != config.T or theta_e.J != config.J or values.shape[1] != config.T:
        raise ValueError("shots / theta_e dimensions do not match the encoder config")
    J, ns = config.J, config.n_max
    S = ns + 2 * J
    tok = np.zeros((S, config.T))
    tok[:n] = values
    tok[ns:ns + J] = theta_e.means
    tok[ns + J:] = theta_e.sigmas
    kind = np.full(S, KIND_PAD, dtype=np.int64)
    kind[:n] = KIND_SAMPLE
    kind[ns:ns + J] = KIND_MU
    kind[ns + J:] = KIND_SIGMA
    date_ids = np.zeros(S, dtype=np.int64)
    date_ids[:n] = days
    comp = np.zeros(S, dtype=np.int64)
    comp[ns:ns + J] = np.arange(1, J + 1)
    comp[ns + J:] = np.arange(1, J + 1)
    return TokenSequence(tok, kind, kind != KIND_PAD, date_ids, comp, J)


def stack_tokens(seqs) -> TokenSequence:
    seqs = list(seqs)
    return TokenSequence(
        np.stack([s.values for s in seqs]),
        np.stack([s.kind for s in seqs]),
        np.stack([s.attn_mask for s in seqs]),
        np.stack([s.date_ids for s in seqs]),
        np.stack([s.component_ids for s in seqs]),
        seqs[0].J,
    )


@dataclass
class ShiftVector:
    d_mu: np.ndarray  # (J, T) or (B, J, T)
    d_sigma: np.ndarray


class EncoderModel:
    def __init__(self, config: EncoderConfig, params: "OrderedDict[str, Array]"):
        self.config = config
        self.params = params

    def __getitem__(self, name) -> Array:
        return self.params[name]

    def parameters(self) -> list[Array]:
        return list(self.params.values())

    def names(self) -> list[str]:
        return list(self.params)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "EncoderModel":
        return EncoderModel(self.config, OrderedDict(
            (k, Array(v.data.astype(dtype), requires_grad=True)) for k, v in self.params.items()))

    def copy(self) -> "EncoderModel":
        return self.astype(self.dtype)


def init_model(config: EncoderConfig, seed: int = 0, dtype=np.float32) -> EncoderModel:
    """Uniform(+-1/sqrt(fan_in)) weights, N(0, 0.02) embeddings, unit norm gains, zero heads."""
    rng = np.random.default_rng(seed)
    d, T, J, ff = config.d_model, config.T, config.J, config.d_ff
    p: OrderedDict[str, np.ndarray] = OrderedDict()

    def dense(fan_in, fan_out):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    for kind in ("sample", "mu", "sigma"):
        p[f"proj_{kind}.w"] = dense(T, d)
        p[f"proj_{kind}.b"] = np.zeros(d)
    p["date_emb"] = rng.normal(0.0, 0.02, size=(N_DAYS, d))
    p["comp_emb"] = rng.normal(0.0, 0.02, size=(J, d))
    p["kind_emb"] = rng.normal(0.0, 0.02, size=(4, d))
    for layer in range(config.n_layers):
        pre = f"layers.{layer}."
        p[pre + "norm1"] = np.ones(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = dense(d, d)
        p[pre + "norm2"] = np.ones(d)
        p[pre + "w1"] = dense(d, ff)
        p[pre + "b1"] = np.zeros(ff)
        p[pre + "w2"] = dense(ff, d)
        p[pre + "b2"] = np.zeros(d)
    p["norm_f"] = np.ones(d)
    for head in ("head_mu", "head_sigma"):
        p[f"{head}.w"] = np.zeros((d, T))
        p[f"{head}.b"] = np.zeros(T)
    return EncoderModel(config, OrderedDict(
        (k, Array(v.astype(dtype), requires_grad=True)) for k, v in p.items()))


def _attention_mask(tokens: TokenSequence, dtype) -> np.ndarray:
    keep = tokens.attn_mask
    mask = np.where(keep, 0.0, -np.inf).astype(dtype)
    return mask[:, None, None, :]


def encode_graph(model: EncoderModel, tokens: TokenSequence):
    """Differentiable forward pass; returns ``(d_mu, d_sigma)`` Arrays of shape (B, J, T)."""
    if not tokens.batched:
        tokens = stack_tokens([tokens])
    cfg = model.config
    P = model.params
    dtype = model.dtype
    J, H, d = cfg.J, cfg.n_heads, cfg.d_model
    dh = d // H
    B, S, T = tokens.values.shape
    ns = S - 2 * J
    if T != cfg.T or tokens.J != J or ns < 1:
        raise ValueError("token batch does not match the encoder config")

    vals = tokens.values.astype(dtype)
    keep = tokens.attn_mask[:, :ns, None].astype(dtype)
    shots = Array(vals[:, :ns])
    e_s = D.add(D.add(D.matmul(shots, P["proj_sample.w"]), P["proj_sample.b"]),
                D.embedding(P["date_emb"], np.clip(tokens.date_ids[:, :ns] - 1, 0, N_DAYS - 1)))
    e_s = D.add(e_s, D.take(P["kind_emb"], slice(KIND_SAMPLE, KIND_SAMPLE + 1)))
    pad = D.take(P["kind_emb"], slice(KIND_PAD, KIND_PAD + 1))
    e_s = D.add(D.mul(e_s, keep), D.mul(D.broadcast_to(pad, (B, ns, d)), 1.0 - keep))

    comp = D.embedding(P["comp_emb"], tokens.component_ids[0, ns:ns + J] - 1)
    e_mu = D.add(D.add(D.matmul(Array(vals[:, ns:ns + J]), P["proj_mu.w"]), P["proj_mu.b"]),
                 D.add(comp, D.take(P["kind_emb"], slice(KIND_MU, KIND_MU + 1))))
    e_sg = D.add(D.add(D.matmul(Array(vals[:, ns + J:]), P["proj_sigma.w"]), P["proj_sigma.b"]),
                 D.add(comp, D.take(P["kind_emb"], slice(KIND_SIGMA, KIND_SIGMA + 1))))
    h = D.concat([e_s, e_mu, e_sg], axis=1)

    mask = _attention_mask(tokens, dtype)
    inv_sqrt = 1.0 / np.sqrt(dh)
    for layer in range(cfg.n_layers):
        pre = f"layers.{layer}."
        a = D.rms_norm(h, P[pre + "norm1"])

        def heads(w):
            return D.transpose(D.reshape(D.matmul(a, P[pre + w]), (B, S, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        scores = D.scale(D.matmul(q, D.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        att = D.matmul(D.softmax_masked(scores, mask), v)
        att = D.reshape(D.transpose(att, (0, 2, 1, 3)), (B, S, d))
        h = D.add(h, D.matmul(att, P[pre + "wo"]))
        f = D.rms_norm(h, P[pre + "norm2"])
        f = D.gelu(D.add(D.matmul(f, P[pre + "w1"]), P[pre + "b1"]))
        h = D.add(h, D.add(D.matmul(f, P[pre + "w2"]), P[pre + "b2"]))

    h = D.rms_norm(h, P["norm_f"])
    d_mu = D.add(D.matmul(D.slice_axis(h, 1, ns, ns + J), P["head_mu.w"]), P["head_mu.b"])
    d_sg = D.add(D.matmul(D.slice_axis(h, 1, ns + J, S), P["head_sigma.w"]), P["head_sigma.b"])
    return d_mu, d_sg


def encode(model: EncoderModel, tokens: TokenSequence) -> ShiftVector:
    """Inference-only forward pass; output shapes follow the input (batched or not)."""
    with D.no_grad():
        d_mu, d_sg = encode_graph(model, tokens)
    if tokens.batched:
        return ShiftVector(d_mu.data.astype(np.float64), d_sg.data.astype(np.float64))
    return ShiftVector(d_mu.data[0].astype(np.float64), d_sg.data[0].astype(np.float64))


def shift_arrays(means, sigmas, d_mu: Array, d_sigma: Array, config: EncoderConfig):
    """Differentiable shift of (B, J, T) parameter arrays; returns ``(means_hat, sigmas_hat)``."""
    mu_hat = D.add(Array(np.asarray(means, dtype=d_mu.dtype)), d_mu)
    sig = np.asarray(sigmas, dtype=d_sigma.dtype)
    if config.sigma_shift_space == "additive_floored":
        sig_hat = D.clip_min(D.add(Array(sig), d_sigma), config.sigma_floor)
    else:
        sig_hat = D.clip_min(D.exp(D.add(Array(np.log(sig)), d_sigma)), config.sigma_floor)
    return mu_hat, sig_hat


def apply_shift(theta_e: SphericalGmm, er: ShiftVector, config: EncoderConfig) -> SphericalGmm:
    """Add the predicted shift to an early-stopped GMM; weights are untouched."""
    d_mu = np.asarray(er.d_mu, dtype=np.float64)
    d_sg = np.asarray(er.d_sigma, dtype=np.float64)
    if d_mu.shape != theta_e.means.shape or d_sg.shape != theta_e.sigmas.shape:
        raise ValueError("shift shape does not match the GMM")
    if config.sigma_shift_space == "additive_floored":
        sig = np.maximum(theta_e.sigmas + d_sg, config.sigma_floor)
    else:
        sig = np.maximum(np.exp(np.log(theta_e.sigmas) + d_sg), config.sigma_floor)
    return SphericalGmm(theta_e.means + d_mu, sig, theta_e.space)


# checkpoint file

MAGIC = b"FSGMMCKP"
CKPT_VERSION = 1


def write_checkpoint(path, model: EncoderModel, header: dict, extra_blocks=None):
    """Write the model (and optional named extra blocks) atomically.

    Layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON
    header, then each block as raw little-endian float32 in header order.
    """
    blocks = OrderedDict((name, p.data) for name, p in model.params.items())
    for name, arr in (extra_blocks or {}).items():
        blocks[name] = arr
    head = dict(header)
    head["config"] = model.config.to_dict()
    head["blocks"] = [{"name": k, "shape": list(np.shape(v))} for k, v in blocks.items()]
    head["n_model_blocks"] = len(model.params)
    payload = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", CKPT_VERSION, len(payload)))
            fh.write(payload)
            for arr in blocks.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if tmp.exists():
            tmp.unlink()
        raise


def read_checkpoint(path, dtype=np.float32):
    """Return ``(model, header, extra_blocks)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        config = EncoderConfig.from_dict(header["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: unreadable checkpoint header ({e})") from None
    offset = 16 + hlen
    params, extra = OrderedDict(), OrderedDict()
    for i, spec in enumerate(header["blocks"]):
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        if offset + 4 * count > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        arr =np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        if i < header["n_model_blocks"]:
            params[spec["name"]] = Array(arr.astype(dtype), requires_grad=True)
        else:
            extra[spec["name"]] = arr.astype(np.float32)
    if offset != len(raw):
        raise FormatError(f"{path}: trailing or missing bytes")
    model = EncoderModel(config, params)
    if model.n_params() != param_count(config):
        raise FormatError(f"{path}: parameter blocks do not match the config")
    return model, header, extra
