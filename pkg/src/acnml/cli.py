"""Command-line entry point: ``acnml <command> --config run.json``.

Every output carries the SHA-256 of the config file bytes and the run seed.
Exit status is 0 on success, 2 for invalid configs or missing inputs
(checked before any computation) and 1 for failures during computation.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import calibration as cal
from .cnml import AcnmlConfig, acnml, bma_predict, exact_cnml, map_predict
from .data import (BlobSpec, GridSpec, fmt, heatmap, load_dataset, make_blobs, read_table,
                   rotate_points, rotate_square_images, write_heatmap)
from .errors import ContractError, DataFormatError
from .models import Dataset, FitInfo, L2Prior, build_model, fit_map
from .posterior import (ALPHA_GRID, GaussianPosterior, SgdTrajectoryConfig, ViConfig,
                        laplace_fit, load_posterior, save_posterior, swag_diag_fit, vi_diag_fit)
from .verification import certify_distribution_bound, certify_parameter_bound

METHODS = ("map", "bma", "acnml", "exact-cnml")
POSTERIOR_KINDS = ("laplace-full", "laplace-diag", "swag-diag", "vi-diag")


class ConfigError(ValueError):
    """Invalid run configuration or missing input file."""


@dataclass
class RunConfig:
    path: Path
    sha256: str
    raw: dict
    seed: int
    out: Path
    num_classes: int
    model: dict
    lam: float
    posterior: dict
    method: str
    acnml: AcnmlConfig
    bma_samples: int

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.path.parent / p

    @property
    def posterior_path(self) -> Path:
        p = self.raw.get("posterior_path")
        return self.resolve(p) if p else self.out / "posterior.bin"

    def stamp(self) -> str:
        return f"config_sha256={self.sha256} seed={self.seed}"


def _check_data_spec(cfg_dir: Path, spec, where: str):
    if isinstance(spec, str):
        p = Path(spec) if Path(spec).is_absolute() else cfg_dir / spec
        if not p.is_file():
            raise ConfigError(f"{where}: dataset file not found: {p}")
        return
    if not isinstance(spec, dict):
        raise ConfigError(f"{where}: dataset must be a path or an object")
    if "blobs" in spec:
        if not isinstance(spec["blobs"], list) or len(spec["blobs"]) < 2:
            raise ConfigError(f"{where}: blobs needs at least two entries")
        return
    if "rotate" in spec:
        r = spec["rotate"]
        if "source" not in r:
            raise ConfigError(f"{where}: rotate needs a source")
        _check_data_spec(cfg_dir, r["source"], where + ".rotate.source")
        return
    raise ConfigError(f"{where}: unknown dataset spec keys {sorted(spec)}")


def load_config(path, seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    data = path.read_bytes()
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    k = raw.get("num_classes")
    if not isinstance(k, int) or k < 2:
        raise ConfigError("num_classes must be an integer >= 2")
    method = raw.get("method", "acnml")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    post = dict(raw.get("posterior", {"kind": "laplace-full"}))
    if post.get("kind") not in POSTERIOR_KINDS:
        raise ConfigError(f"posterior.kind must be one of {POSTERIOR_KINDS}")
    alpha = post.get("alpha", 1.0)
    if not (isinstance(alpha, (int, float)) and alpha > 0):
        raise ConfigError("posterior.alpha must be > 0")
    lam = raw.get("prior_lambda", 0.0)
    if not (isinstance(lam, (int, float)) and lam >= 0):
        raise ConfigError("prior_lambda must be >= 0")
    try:
        acfg = AcnmlConfig(**raw.get("acnml", {}))
    except (TypeError, ContractError) as exc:
        raise ConfigError(f"acnml: {exc}") from None
    bma = raw.get("bma_samples", 30)
    if not isinstance(bma, int) or bma < 1:
        raise ConfigError("bma_samples must be an integer >= 1")
    if "train" not in raw:
        raise ConfigError("train dataset is required")
    _check_data_spec(path.parent, raw["train"], "train")
    run_seed = int(raw.get("seed", 0)) if seed is None else seed
    out_dir = Path(out) if out is not None else path.parent / raw.get("out", "out")
    return RunConfig(path=path, sha256=hashlib.sha256(data).hexdigest(), raw=raw,
                     seed=run_seed, out=out_dir, num_classes=k,
                     model=raw.get("model", {"kind": "logistic-regression"}), lam=float(lam),
                     posterior=post, method=method, acnml=acfg, bma_samples=bma)


def load_data(cfg: RunConfig, spec) -> Dataset:
    if isinstance(spec, str):
        return load_dataset(cfg.resolve(spec), cfg.num_classes)
    if "blobs" in spec:
        return make_blobs([BlobSpec(tuple(b["mean"]), float(b["std"]), int(b["count"]),
                                    int(b.get("seed", 0))) for b in spec["blobs"]])
    r = spec["rotate"]
    src = load_data(cfg, r["source"])
    if "side" in r:
        return rotate_square_images(src, int(r["side"]), float(r.get("angle_degrees", 0.0)),
                                    r.get("seed"))
    return rotate_points(src, float(r["angle_degrees"]))


def _subconfig(cls, spec: dict, seed: int):
    allowed = {f.name for f in fields(cls)}
    kw = {k: v for k, v in spec.items() if k in allowed}
    kw.setdefault("seed", seed)
    return cls(**kw)


def fit_posterior(cfg: RunConfig, model, train: Dataset, alpha: Optional[float] = None):
    """Fit the configured posterior; returns (posterior, metadata dict)."""
    spec = cfg.posterior
    kind = spec["kind"]
    alpha = float(spec.get("alpha", 1.0)) if alpha is None else alpha
    prior = L2Prior(cfg.lam)
    init = model.init_params(cfg.seed)
    meta = {"kind": kind}
    if kind.startswith("laplace"):
        info = FitInfo()
        q = laplace_fit(model, train, prior, "full" if kind == "laplace-full" else "diagonal",
                        damping=spec.get("damping"), init=init, alpha=alpha, info=info)
        meta.update(map_iterations=info.iterations, map_grad_norm=info.grad_norm,
                    map_objective=info.objective, optimizer=info.method)
    elif kind == "swag-diag":
        q = swag_diag_fit(model, train, prior, _subconfig(SgdTrajectoryConfig, spec, cfg.seed),
                          init=init, alpha=alpha)
    else:
        trace = []
        q = vi_diag_fit(model, train, _subconfig(ViConfig, spec, cfg.seed), init=init,
                        alpha=alpha, trace=trace)
        meta.update(vi_steps=len(trace), final_elbo=trace[-1] if trace else math.nan)
    # the constructors above only succeed on an SPD covariance
    meta["spd_check"] = True
    meta["param_count"] = q.dim
    return q, meta


def _predictor(cfg: RunConfig, model, method: str, q: Optional[GaussianPosterior],
               train: Optional[Dataset], acfg: AcnmlConfig):
    """Return ``f(x) -> (probs, phi or None, per-label log probs or None)``."""
    if method in ("map", "bma", "acnml"):
        if q is None:
            raise ContractError(f"method {method} needs a posterior")
        if q.dim != model.param_count:
            raise ContractError(f"posterior has {q.dim} parameters, model has {model.param_count}")
    if method == "map":
        return lambda x: (map_predict(model, q, x), None, None)
    if method == "bma":
        rng = np.random.default_rng(cfg.seed)
        return lambda x: (bma_predict(model, q, x, cfg.bma_samples, rng), None, None)
    if method == "acnml":
        def f(x):
            r = acnml(model, q, x, acfg)
            return r.probs, r.log_normalizer_phi, r.per_label_log_prob
        return f
    prior = L2Prior(cfg.lam)
    theta = fit_map(model, train, prior, init=model.init_params(cfg.seed))

    def g(x):
        r = exact_cnml(model, train, x, prior, theta_train=theta)
        return r.probs, r.log_normalizer_phi, r.per_label_log_prob
    return g


def _write_json(path: Path, obj) -> None:
    path.write_text(cal.dumps_json(obj) + "\n")


def _load_posterior_checked(cfg: RunConfig):
    if cfg.method == "exact-cnml":
        return None
    p = cfg.posterior_path
    if not p.is_file():
        raise ConfigError(f"posterior file not found: {p} (run fit-posterior first)")
    return load_posterior(p)


# -- commands ----------------------------------------------------------------

def cmd_fit_posterior(cfg: RunConfig, args) -> None:
    train = load_data(cfg, cfg.raw["train"])
    model = build_model(cfg.model, train.dim, cfg.num_classes)
    q, meta = fit_posterior(cfg, model, train)
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.posterior_path
    path.parent.mkdir(parents=True, exist_ok=True)
    q = GaussianPosterior(q.mean, q.shape, q.variances, q.chol, q.temperature_alpha,
                          f"{q.source};config_sha256={cfg.sha256}")
    save_posterior(q, path)
    meta.update(config_sha256=cfg.sha256, seed=cfg.seed, posterior_file=path.name,
                train_size=train.n)
    _write_json(path.with_suffix(".json"), meta)


def cmd_predict(cfg: RunConfig, args) -> None:
    inputs = cfg.resolve(args.inputs) if args.inputs else None
    if inputs is None or not inputs.is_file():
        raise ConfigError(f"inputs file not found: {inputs}")
    q = _load_posterior_checked(cfg)
    train = load_data(cfg, cfg.raw["train"]) if cfg.method == "exact-cnml" else None
    X, _ = read_table(inputs, require_label=False)
    model = build_model(cfg.model, X.shape[1], cfg.num_classes)
    f = _predictor(cfg, model, cfg.method, q, train, cfg.acnml)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_predictions([f(x) for x in X], cfg.num_classes, cfg.out / "predictions.csv",
                      f"{cfg.stamp()} method={cfg.method}")


def write_predictions(rows, k: int, path, comment: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"p{c}" for c in range(k)] + ["phi"] + [f"lp{c}" for c in range(k)])
        for i, (probs, phi, lp) in enumerate(rows):
            tail = [""] * (k + 1) if phi is None else [fmt(phi)] + [fmt(v) for v in lp]
            w.writerow([i] + [fmt(v) for v in probs] + tail)


def read_predictions(path):
    """Parse a predictions file into (probs matrix, phi vector or None)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0][0] != "id":
        raise DataFormatError(f"{path}: missing predictions header")
    header = rows[0]
    k = sum(1 for h in header if h.startswith("p") and h[1:].isdigit())
    phi_col = header.index("phi")
    probs, phis = [], []
    for line, r in enumerate(rows[1:], start=2):
        try:
            probs.append([float(v) for v in r[1:1 + k]])
            phis.append(float(r[phi_col]) if r[phi_col] else None)
        except (ValueError, IndexError) as exc:
            raise DataFormatError(f"{path}: row {line}: {exc}") from None
    has_phi = all(p is not None for p in phis)
    return np.array(probs), (np.array(phis) if has_phi else None)


def _records(probs, labels, phis=None):
    if len(probs) != len(labels):
        raise DataFormatError(f"{len(probs)} predictions but {len(labels)} labels")
    return [cal.EvaluationRecord(p, int(y), None if phis is None else float(phis[i]))
            for i, (p, y) in enumerate(zip(probs, labels))]


def write_evaluation(records, out: Path, stamp: str, prefix: str = "") -> cal.CalibrationReport:
    report = cal.evaluate(records)
    cal.write_report_json(report, out / f"{prefix}report.json")
    cal.write_report_csv(report, out / f"{prefix}reliability.csv")
    if all(r.phi is not None for r in records):
        cal.write_phi_csv(cal.phi_diagnostics(records), out / f"{prefix}phi_histogram.csv",
                          out / f"{prefix}phi_reliability.csv")
    _write_json(out / f"{prefix}report.meta.json", {"stamp": stamp, "records": len(records)})
    return report


def cmd_evaluate(cfg: Optional[RunConfig], args) -> None:
    for name in ("predictions", "labels"):
        p = getattr(args, name)
        if p is None or not Path(p).is_file():
            raise ConfigError(f"{name} file not found: {p}")
    probs, phis = read_predictions(args.predictions)
    _, labels = read_table(args.labels, require_label=True)
    out = Path(args.out) if args.out else (cfg.out if cfg else Path("."))
    out.mkdir(parents=True, exist_ok=True)
    stamp = cfg.stamp() if cfg else "config_sha256=none"
    write_evaluation(_records(probs, labels, phis), out, stamp)


def cmd_heatmap(cfg: RunConfig, args) -> None:
    g = dict(cfg.raw.get("grid", {}))
    for key in ("x_min", "x_max", "y_min", "y_max", "resolution"):
        if getattr(args, key) is not None:
            g[key] = getattr(args, key)
    try:
        grid = GridSpec(float(g.get("x_min", -8)), float(g.get("x_max", 8)),
                        float(g.get("y_min", -8)), float(g.get("y_max", 8)),
                        int(g.get("resolution", 40)))
    except ContractError as exc:
        raise ConfigError(f"grid: {exc}") from None
    q = _load_posterior_checked(cfg)
    train = load_data(cfg, cfg.raw["train"])
    if train.dim != 2:
        raise ConfigError("heatmap needs 2-D inputs")
    model = build_model(cfg.model, 2, cfg.num_classes)
    f = _predictor(cfg, model, cfg.method, q, train, cfg.acnml)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_heatmap(heatmap(lambda x: f(x)[0], grid), cfg.out / "heatmap.csv",
                  f"{cfg.stamp()} method={cfg.method}")


def cmd_verify_bounds(cfg: RunConfig, args) -> None:
    v = dict(cfg.raw.get("verify", {}))
    size = args.campaign_size if args.campaign_size is not None else v.get("campaign_size", 10)
    kind = v.get("kind", "parameter")
    if not isinstance(size, int) or size < 1:
        raise ConfigError("campaign size must be an integer >= 1")
    if kind not in ("parameter", "distribution"):
        raise ConfigError("verify.kind must be 'parameter' or 'distribution'")
    samples = int(v.get("num_samples", 10_000))
    train = load_data(cfg, cfg.raw["train"])
    model = build_model(cfg.model, train.dim, cfg.num_classes)
    prior = L2Prior(cfg.lam)
    rng = np.random.default_rng(cfg.seed)
    lo, hi = train.inputs.min(axis=0), train.inputs.max(axis=0)
    theta = fit_map(model, train, prior, init=model.init_params(cfg.seed))
    q = fit_posterior(cfg, model, train)[0] if kind == "distribution" else None
    cfg.out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(size):
        x = rng.uniform(lo, hi)
        y = int(rng.integers(cfg.num_classes))
        if kind == "parameter":
            cert = certify_parameter_bound(model, train, prior, x, y, num_samples=samples,
                                           seed=cfg.seed + i, theta_train=theta)
        else:
            cert = certify_distribution_bound(model, train, prior, q, x, cfg.acnml,
                                              theta_train=theta)
        d = {"index": i, "query": x, "config_sha256": cfg.sha256, "seed": cfg.seed}
        d.update(cert.to_dict())
        lines.append(cal.dumps_json(d))
    (cfg.out / "certificates.jsonl").write_text("".join(line + "\n" for line in lines))


def _method_entry(entry):
    if isinstance(entry, str):
        entry = {"method": entry}
    if entry.get("method") not in METHODS:
        raise ConfigError(f"compare: unknown method {entry.get('method')!r}")
    return entry


def cmd_compare(cfg: RunConfig, args) -> None:
    c = cfg.raw.get("compare")
    if not isinstance(c, dict):
        raise ConfigError("compare section is required")
    methods = [_method_entry(m) for m in c.get("methods", [])]
    if len(methods) < 2:
        raise ConfigError("compare needs at least two methods")
    splits = c.get("splits", {})
    if not splits:
        raise ConfigError("compare needs at least one split")
    for name, spec in splits.items():
        _check_data_spec(cfg.path.parent, spec, f"compare.splits.{name}")
    train = load_data(cfg, cfg.raw["train"])
    model = build_model(cfg.model, train.dim, cfg.num_classes)
    q, _ = fit_posterior(cfg, model, train)
    data = {name: load_data(cfg, spec) for name, spec in splits.items()}
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for m in methods:
        label = m.get("name", m["method"])
        alpha = m.get("alpha")
        qm = q if alpha is None else q.with_alpha(float(alpha))
        acfg = AcnmlConfig(m.get("num_steps", cfg.acnml.num_steps),
                           m.get("step_size", cfg.acnml.step_size), cfg.acnml.alpha)
        for name, d in data.items():
            f = _predictor(cfg, model, m["method"], qm, train, acfg)
            preds = [f(x) for x in d.inputs]
            write_predictions(preds, cfg.num_classes, cfg.out / f"predictions_{label}_{name}.csv",
                              f"{cfg.stamp()} method={m['method']} split={name}")
            phis = None if preds[0][1] is None else [p[1] for p in preds]
            recs = _records([p[0] for p in preds], d.labels, phis)
            rep = write_evaluation(recs, cfg.out, cfg.stamp(), prefix=f"{label}_{name}_")
            if phis is not None:
                diag = cal.phi_diagnostics(recs)
                extra = [fmt(diag.mean_phi_correct), fmt(diag.mean_phi_incorrect)]
            else:
                extra = ["", ""]
            rows.append([label, name, fmt(rep.nll), fmt(rep.accuracy), fmt(rep.ece)] + extra)
    with open(cfg.out / "compare.csv", "w", newline="") as fh:
        fh.write(f"# {cfg.stamp()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "split", "nll", "accuracy", "ece", "mean_phi_correct",
                    "mean_phi_incorrect"])
        w.writerows(rows)
    sweep = c.get("alpha_sweep")
    if sweep:
        _alpha_sweep(cfg, model, q, data, sweep)


def _alpha_sweep(cfg: RunConfig, model, q, data, sweep) -> None:
    """ACNML metrics per temperature on one split; the choice is left to the user."""
    split = sweep.get("split") if isinstance(sweep, dict) else None
    split = split or next(iter(data))
    if split not in data:
        raise ConfigError(f"alpha_sweep split {split!r} is not a compare split")
    grid = sweep.get("alphas", ALPHA_GRID) if isinstance(sweep, dict) else ALPHA_GRID
    d = data[split]
    with open(cfg.out / "alpha_sweep.csv", "w", newline="") as fh:
        fh.write(f"# {cfg.stamp()} split={split}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "nll", "accuracy", "ece"])
        for a in grid:
            qa = q.with_alpha(float(a))
            recs = [cal.EvaluationRecord(acnml(model, qa, x, cfg.acnml).probs, int(y))
                    for x, y in zip(d.inputs, d.labels)]
            rep = cal.evaluate(recs)
            w.writerow([fmt(float(a)), fmt(rep.nll), fmt(rep.accuracy), fmt(rep.ece)])


COMMANDS = {
    "fit-posterior": cmd_fit_posterior,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "heatmap": cmd_heatmap,
    "verify-bounds": cmd_verify_bounds,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acnml", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "evaluate", help="run config (JSON)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (default: config 'out')")
        if name == "predict":
            p.add_argument("--inputs", required=True, help="x0,...,x{d-1} file to predict")
        if name == "evaluate":
            p.add_argument("--predictions", required=True)
            p.add_argument("--labels", required=True, help="file with a label column")
        if name == "heatmap":
            for key in ("x_min", "x_max", "y_min", "y_max"):
                p.add_argument("--" + key.replace("_", "-"), dest=key, type=float)
            p.add_argument("--resolution", type=int)
        if name == "verify-bounds":
            p.add_argument("--campaign-size", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = None
        if args.config is not None:
            cfg = load_config(args.config, args.seed, args.out)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, ContractError, DataFormatError) as exc:
        print(f"acnml {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any failure during computation
        print(f"acnml {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
