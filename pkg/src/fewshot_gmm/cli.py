"""Command-line entry point: ``fewshot-gmm <command> [options]``.

Exit status: 0 success, 2 usage error, 3 data or format error, 4 numeric failure.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import platform
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__, kernels
from .data import (DomainCollection, ParseStats, build_domains, expected_header, fit_scaler,
                   load_prepared, parse_dataset, sample_shots, save_prepared, scale_collection,
                   split_collection)
from .encoder import EncoderConfig
from .errors import DataError, FormatError, NumericError
from .gmm import (gmm_to_dict, init_theta_o, read_gmm_file, run_to_convergence, sample_gmm,
                  to_physical, write_gmm_file)
from .metrics import compare_sets, write_report_csv
from .synth import (SynthConfig, gen_splits, run_benchmark, write_aggregate_csv, write_long_csv)
from .trainer import Estimator, TrainConfig, train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _sha256(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _write_run_json(out_dir, command: str, params: dict, inputs: dict):
    import scipy
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "params": {k: (str(v) if isinstance(v, Path) else v) for k, v in params.items()},
        "inputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in inputs.items() if v},
        "versions": {"fewshot_gmm": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "kernel_backend": kernels.BACKEND},
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def _workers(workers: int, deterministic: bool) -> int:
    return 1 if deterministic else max(1, workers)


def _parse_int_list(text: str) -> list[int]:
    """``"1-24"`` or ``"4,8,16"`` (ranges inclusive)."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise click.BadParameter(f"empty list {text!r}")
    return out


def _load_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None


seed_option = click.option("--seed", type=int, envvar="FEWSHOT_GMM_SEED", default=0, show_default=True,
                           help="Master seed (default from FEWSHOT_GMM_SEED).")
workers_option = click.option("--workers", type=int, default=1, show_default=True,
                              help="Worker processes for per-domain stages.")
det_option = click.option("--deterministic", is_flag=True,
                          help="Force a single worker and ordered reductions.")


@click.group()
@click.version_option(__version__)
def cli():
    """Few-shot estimation of daily consumption-profile distributions."""


@cli.command()
@click.option("--input", "input_csv", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Dataset CSV: domain_or_household_id,date,h00..h{T-1}.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True,
              help="Output dataset directory.")
@click.option("--T", "T", type=int, default=24, show_default=True, help="Readings per day.")
@click.option("--window", type=int, default=250, show_default=True, help="Days per domain.")
@click.option("--ratios", default="0.8,0.1,0.1", show_default=True,
              help="Household split ratios source,test,validation.")
@click.option("--percentile", type=float, default=99.0, show_default=True,
              help="Scaler percentile of pooled source readings.")
@click.option("--clip-hi", type=float, default=3.0, show_default=True,
              help="Upper clip of scaled readings.")
@seed_option
def prepare(input_csv, out_dir, T, window, ratios, percentile, clip_hi, seed):
    """Parse a dataset CSV into domains, split households and fit the scaler."""
    stats = ParseStats()
    series = parse_dataset(input_csv, T, stats)
    coll = build_domains(series, window, seed)
    try:
        r = tuple(float(x) for x in ratios.split(","))
    except ValueError:
        raise click.BadParameter(f"bad ratios {ratios!r}") from None
    if len(coll) == 0:
        splits = {name: DomainCollection([], role) for name, role in
                  (("source", "source"), ("test", "target"), ("validation", "validation"))}
        scaler = None
    else:
        src, tgt, val = split_collection(coll, r, seed)
        splits = {"source": src, "test": tgt, "validation": val}
        scaler = fit_scaler(src, percentile, clip_hi)
    extra = {"parse": {"rows": stats.rows, "dropped": stats.dropped, "reasons": stats.reasons}}
    m = save_prepared(out_dir, splits, scaler, T=T, window=window, split_seed=seed, extra=extra)
    _write_run_json(out_dir, "prepare", dict(T=T, window=window, ratios=ratios, seed=seed,
                                             percentile=percentile, clip_hi=clip_hi),
                    {"input": input_csv})
    click.echo(f"domains: " + ", ".join(f"{k}={v['domains']}" for k, v in m["counts"].items()))


@cli.command("init-gmm")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Prepared dataset directory.")
@click.option("--out", "out_file", type=click.Path(dir_okay=False), required=True,
              help="Output GMM parameter file (JSON).")
@click.option("--J", "J", type=int, default=6, show_default=True, help="Mixture components.")
@click.option("--subsample", type=int, default=50_000, show_default=True,
              help="Pooled profiles used for EM.")
@seed_option
def init_gmm(data_dir, out_file, J, subsample, seed):
    """Fit the shared starting GMM on the pooled, scaled source profiles."""
    _, splits, scaler = load_prepared(data_dir)
    src = splits.get("source")
    if scaler is None or src is None or len(src) == 0:
        raise DataError(f"{data_dir}: dataset has no source domains")
    pooled = np.concatenate([scaler.apply(d.values) for d in src])
    theta_o = init_theta_o(pooled, J, seed, subsample)
    write_gmm_file(out_file, theta_o, scaler)
    _write_run_json(Path(out_file).parent, "init-gmm", dict(J=J, subsample=subsample, seed=seed),
                    {"data": data_dir})
    click.echo(f"wrote {out_file} (J={J}, T={theta_o.T})")


@cli.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True,
              help="Output dataset directory.")
@click.option("--n-source", type=int, default=500, show_default=True)
@click.option("--n-target", type=int, default=100, show_default=True)
@click.option("--n-validation", type=int, default=20, show_default=True)
@click.option("--J-true", "J_true", type=int, default=None, help="Components of the true mixtures.")
@click.option("--T", "T", type=int, default=None, help="Readings per day.")
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              help="JSON file with SynthConfig fields (flags override it).")
@click.option("--percentile", type=float, default=99.0, show_default=True)
@click.option("--clip-hi", type=float, default=3.0, show_default=True)
@seed_option
def synth(out_dir, n_source, n_target, n_validation, J_true, T, config_file, percentile, clip_hi, seed):
    """Generate a synthetic dataset with known ground-truth mixtures."""
    d = _load_json(config_file)
    d["master_seed"] = seed
    if J_true is not None:
        d["J_true"] = J_true
    if T is not None:
        d["T"] = T
    cfg = SynthConfig.from_dict(d)
    splits, truths = gen_splits(cfg, n_source, n_target, n_validation)
    scaler = fit_scaler(splits["source"], percentile, clip_hi)
    save_prepared(out_dir, splits, scaler, T=cfg.T, window=cfg.samples_per_domain,
                  split_seed=seed, extra={"synthetic": cfg.to_dict()})
    truth_doc = {k: gmm_to_dict(g) for k, g in truths.items()}
    (Path(out_dir) / "truths.json").write_text(json.dumps(truth_doc, indent=1, sort_keys=True) + "\n")
    _write_run_json(out_dir, "synth", dict(cfg.to_dict(), n_source=n_source, n_target=n_target,
                                           n_validation=n_validation), {"config": config_file})
    click.echo(f"domains: source={n_source}, test={n_target}, validation={n_validation}")


@cli.command("train")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Prepared dataset directory.")
@click.option("--theta-o", "theta_file", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Starting GMM from init-gmm.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True,
              help="Run directory for checkpoints and the log.")
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              help="JSON with TrainConfig fields and an optional 'encoder' object.")
@click.option("--steps", type=int, default=None, help="Total optimizer steps.")
@click.option("--batch-size", type=int, default=None)
@click.option("--eval-every", type=int, default=None)
@click.option("--d-model", type=int, default=None)
@click.option("--layers", type=int, default=None)
@click.option("--heads", type=int, default=None)
@click.option("--d-ff", type=int, default=None)
@click.option("--n-max", type=int, default=None, help="Shot slots of the encoder.")
@click.option("--sigma-shift-space", type=click.Choice(["additive_floored", "log_additive"]),
              default=None)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Continue from this checkpoint.")
@seed_option
def train_cmd(data_dir, theta_file, out_dir, config_file, steps, batch_size, eval_every, d_model,
              layers, heads, d_ff, n_max, sigma_shift_space, resume, seed):
    """Meta-train the shift encoder on the source split."""
    doc = _load_json(config_file)
    enc = dict(doc.pop("encoder", {}))
    tcfg = dict(doc, master_seed=seed)
    for k, v in (("total_steps", steps), ("batch_size", batch_size), ("eval_every", eval_every)):
        if v is not None:
            tcfg[k] = v
    if eval_every is not None and "checkpoint_every" not in doc:
        tcfg["checkpoint_every"] = eval_every
    for k, v in (("d_model", d_model), ("n_layers", layers), ("n_heads", heads), ("d_ff", d_ff),
                 ("n_max", n_max), ("sigma_shift_space", sigma_shift_space)):
        if v is not None:
            enc[k] = v
    theta_o, scaler = read_gmm_file(theta_file)
    _, splits, data_scaler = load_prepared(data_dir)
    if scaler is None:
        scaler = data_scaler
    enc.setdefault("T", theta_o.T)
    enc.setdefault("J", theta_o.J)
    enc_cfg = EncoderConfig.from_dict(enc)
    cfg = TrainConfig.from_dict(tcfg)
    if enc_cfg.n_max < cfg.n_max:
        cfg = TrainConfig.from_dict(dict(cfg.to_dict(), n_max=enc_cfg.n_max))
    src = scale_collection(splits["source"], scaler)
    val = scale_collection(splits.get("validation", DomainCollection([], "validation")), scaler)
    res = train(src, val, theta_o, scaler, enc_cfg, cfg, out_dir, resume=resume)
    _write_run_json(out_dir, "train", dict(train=cfg.to_dict(), encoder=enc_cfg.to_dict()),
                    {"data": data_dir, "theta_o": theta_file, "resume": resume})
    click.echo(f"steps={res.steps} best_val_mmd={res.best_val_mmd:.6g} last={res.last_checkpoint}")


def _read_shots(path, T):
    series = parse_dataset(path, T)
    if len(series) != 1:
        raise DataError(f"{path}: expected rows for exactly one household, found {len(series)}")
    s = series[0]
    return s.values, s.days


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--shots", "shots_csv", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Shots in the dataset CSV format (one household, physical units).")
@click.option("--out", "out_file", type=click.Path(dir_okay=False), default="params.json",
              show_default=True, help="Output GMM parameter file.")
def estimate(checkpoint, shots_csv, out_file):
    """Estimate a household's mixture from a few daily profiles."""
    est = Estimator.from_checkpoint(checkpoint)
    values, days = _read_shots(shots_csv, est.config.T)
    gmm = est.estimate(values, days)
    write_gmm_file(out_file, gmm, est.scaler)
    _write_run_json(Path(out_file).parent, "estimate", {},
                    {"checkpoint": checkpoint, "shots": shots_csv})
    click.echo(f"wrote {out_file} (J={gmm.J}, T={gmm.T}, shots={len(values)})")


@cli.command()
@click.option("--params", "params_file", type=click.Path(exists=True, dir_okay=False), required=True,
              help="GMM parameter file.")
@click.option("-m", "m", type=int, default=250, show_default=True, help="Profiles to draw.")
@click.option("--out", "out_file", type=click.Path(dir_okay=False), default="samples.csv",
              show_default=True)
@seed_option
def sample(params_file, m, out_file, seed):
    """Draw daily profiles in physical units (clipped at zero)."""
    gmm, scaler = read_gmm_file(params_file)
    if gmm.space == "scaled":
        if scaler is None:
            raise FormatError(f"{params_file}: scaled parameters without a scaler")
        gmm = to_physical(gmm, scaler)
    X = sample_gmm(gmm, m, seed, clip_nonneg=True)
    lines = [",".join(expected_header(gmm.T)[2:])]
    lines += [",".join(repr(float(v)) for v in row) for row in X]
    Path(out_file).write_text("\n".join(lines) + "\n")
    _write_run_json(Path(out_file).parent, "sample", dict(m=m, seed=seed), {"params": params_file})
    click.echo(f"wrote {m} profiles to {out_file}")


def _targets(data_dir, split, scaler):
    _, splits, _ = load_prepared(data_dir)
    if split not in splits:
        raise DataError(f"{data_dir}: no split named {split!r}")
    return scale_collection(splits[split], scaler)


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--n-shots", type=int, default=4, show_default=True)
@click.option("-m", "m", type=int, default=250, show_default=True, help="Generated profiles per domain.")
@click.option("--out", "out_file", type=click.Path(dir_okay=False), default="report.csv", show_default=True)
@seed_option
def evaluate(checkpoint, data_dir, split, n_shots, m, out_file, seed):
    """Per-domain metric report for sampled shots, θ_p and the trained estimator."""
    est = Estimator.from_checkpoint(checkpoint)
    targets = _targets(data_dir, split, est.scaler)
    shots = [sample_shots(d, n_shots, seed) for d in targets]
    ours = est.predict([(s.values, s.days) for s in shots])
    rows = []
    for d, s, g in zip(targets, shots, ours):
        tp = run_to_convergence(est.theta_o, s.values)
        for method, gen in (("sampled", s.values), ("theta_p", sample_gmm(tp, m, [seed, 1])),
                            ("ours", sample_gmm(g, m, [seed, 2]))):
            rep = compare_sets(gen, d.values, seed)
            rows.append(dict(rep.values(), domain_id=d.domain_id, n_shots=n_shots, method=method,
                             seed=seed))
    write_report_csv(out_file, rows)
    _write_run_json(Path(out_file).parent, "evaluate", dict(split=split, n_shots=n_shots, m=m, seed=seed),
                    {"checkpoint": checkpoint, "data": data_dir})
    for method in ("sampled", "theta_p", "ours"):
        v = [r["mmd"] for r in rows if r["method"] == method]
        click.echo(f"{method}: mean mmd {np.mean(v):.4f} over {len(v)} domains")


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--shots", "shots", default="1-24", show_default=True, help="Shot counts, e.g. 1-24 or 4,8,16.")
@click.option("--seeds", default="0", show_default=True, help="Shot-sampling seeds, e.g. 0,1,2.")
@click.option("-m", "m", type=int, default=250, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@workers_option
@det_option
def bench(checkpoint, data_dir, split, shots, seeds, m, out_dir, workers, deterministic):
    """Shot-count benchmark: long metric CSV plus per-n MMD aggregates."""
    est = Estimator.from_checkpoint(checkpoint)
    targets = _targets(data_dir, split, est.scaler)
    rows, agg = run_benchmark(est, targets, _parse_int_list(shots), _parse_int_list(seeds), m,
                              _workers(workers, deterministic))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_long_csv(out / "bench_long.csv", rows)
    write_aggregate_csv(out / "bench_mmd_by_shots.csv", agg)
    _write_run_json(out, "bench", dict(split=split, shots=shots, seeds=seeds, m=m, workers=workers),
                    {"checkpoint": checkpoint, "data": data_dir})
    for a in agg:
        click.echo(f"n={a['n_shots']:>3} {a['method']:<8} mean mmd {a['mean_mmd']:.4f}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="fewshot-gmm", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE if isinstance(e, click.UsageError) else e.exit_code
    except (FormatError, DataError, FileNotFoundError, KeyError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        click.echo(f"numeric error: {e}", err=True)
        return EXIT_NUMERIC
    except ValueError as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
