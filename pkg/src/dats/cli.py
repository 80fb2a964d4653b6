"""Command-line entry point.

Configuration is read from a JSON file (``--config``) and then overridden by
flags: ``--seed`` replaces the training seed and the synthetic data seed,
``--mode`` replaces the training mode.  Recognised top-level keys::

    {
      "data":     {SyntheticSpec fields},      # synthetic data (default)
      "data_path": "file.csv",                 # or an external CSV
      "target_domain": 1,                      # CSV only; else from sidecar
      "training": {TrainingConfig fields},
      "sweep":    [0.1, ..., 0.9],             # sweep subcommand
      "modes":    ["dats", "mean", "dann"],    # sweep subcommand
      "model":    "model_train.bin"            # eval subcommand
    }

Every error ends the process with a non-zero status and one line on stderr::

    error: code=<code> kind=<ExceptionClass> message=<json string>
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import dist_match, model_io, trainer
from .datagen import (
    DomainDataset,
    SyntheticSpec,
    TabularSchema,
    generate,
    load_tabular,
    proportion_sweep,
)
from .errors import ConfigurationError, DatsError, LoadError, UsageError
from .nn import softmax
from .proportions import (
    class_conditional_means,
    gradient_path_proportions,
    solve_proportions_closed_form,
)

DEFAULT_SWEEP = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
SUMMARY_COLUMNS = ("run", "sweep_point", "mode", "seed", "status", "accuracy", "auc",
                   "gamma_hat", "gamma_status", "gamma_l1", "gamma_linf", "error")
EVAL_COLUMNS = ("domain", "n", "accuracy", "auc", "per_class_accuracy", "confusion")
ESTIMATE_COLUMNS = ("method", "domain", "gamma_hat", "gamma_linf")

EXIT_FAILED_RUNS = 1
EXIT_ERROR = {"usage": 2, "configuration": 3, "load": 4, "numeric": 5}


def error_line(exc: BaseException) -> str:
    code = getattr(exc, "code", "internal")
    return f"error: code={code} kind={type(exc).__name__} message={json.dumps(str(exc))}"


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"{path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return cfg


def resolve(cfg: dict, seed=None, mode=None) -> tuple[dict, trainer.TrainingConfig]:
    """Apply flag overrides; returns (synthetic spec fields, training config)."""
    data = dict(cfg.get("data", {}))
    known = {f.name for f in fields(SyntheticSpec)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown data fields: {sorted(unknown)}")
    train_cfg = dict(cfg.get("training", {}))
    if seed is not None:
        data["seed"] = seed
        train_cfg["seed"] = seed
    if mode is not None:
        train_cfg["mode"] = mode
    return data, trainer.TrainingConfig.from_dict(train_cfg)


def load_datasets(cfg: dict, data: dict) -> list[DomainDataset]:
    if "data_path" in cfg:
        return load_tabular(cfg["data_path"], TabularSchema(target_domain=cfg.get("target_domain")))
    try:
        return generate(SyntheticSpec(**data))
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path: Path, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in columns})


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _target(datasets):
    t = [d for d in datasets if d.is_target]
    if len(t) != 1:
        raise UsageError("exactly one target domain required")
    return t[0]


def run_training(name: str, datasets, config: trainer.TrainingConfig, out: Path,
                 n_classes: int | None = None) -> dict:
    """Train one model and write its metrics, model dump and report."""
    state, history = trainer.train(datasets, config, n_classes)
    trainer.write_metrics_csv(out / f"metrics_{name}.csv", history, state.n_classes, state.n_sources)
    model_io.save_model(out / f"model_{name}.bin", state, config.to_dict())
    tgt = _target(datasets)
    report = {
        "run": name,
        "mode": config.mode,
        "seed": config.seed,
        "iterations": state.iteration,
        "gamma_hat": state.gamma,
        "gamma_status": "estimated" if config.estimates_gamma else "frozen uniform",
        "lambda": state.lam,
        "final_losses": {k: v for k, v in history[-1].as_row().items()
                         if k in trainer.METRIC_FIELDS and k != "iteration"} if history else {},
        "config": config.to_dict(),
    }
    if tgt.y is not None:
        report["target_eval"] = trainer.evaluate(state, tgt.x, tgt.y, true_gamma=tgt.proportions)
    elif tgt.proportions is not None:
        err = state.gamma - tgt.proportions
        report["target_eval"] = {"gamma_l1": float(np.abs(err).sum()),
                                 "gamma_linf": float(np.abs(err).max())}
    _write_json(out / f"report_{name}.json", report)
    return report


def cmd_sweep(cfg: dict, args) -> int:
    data, base = resolve(cfg, args.seed, None)
    modes = [args.mode] if args.mode else cfg.get("modes", list(trainer.MODES))
    modes = [trainer.normalize_mode(m) for m in modes]
    spec = SyntheticSpec(**data)
    rows, failed = [], 0
    for p, datasets in proportion_sweep(spec, cfg.get("sweep", DEFAULT_SWEEP)):
        for mode in modes:
            name = f"p{p:.2f}_{mode}_s{base.seed}"
            row = {"run": name, "sweep_point": p, "mode": mode, "seed": base.seed}
            try:
                rep = run_training(name, datasets, replace(base, mode=mode), args.out,
                                   spec.n_classes)
            except DatsError as exc:
                failed += 1
                row.update(status="failed", error=error_line(exc))
            else:
                ev = rep["target_eval"]
                row.update(status="ok", accuracy=ev["accuracy"], auc=ev.get("auc"),
                           gamma_hat=rep["gamma_hat"], gamma_status=rep["gamma_status"],
                           gamma_l1=ev["gamma_l1"], gamma_linf=ev["gamma_linf"])
            rows.append(row)
            print(f"{name}: {row['status']}", file=sys.stderr)
    _write_rows(args.out / "summary.csv", SUMMARY_COLUMNS, rows)
    if failed:
        print(f"error: code=runs_failed count={failed} summary={json.dumps(str(args.out / 'summary.csv'))}",
              file=sys.stderr)
        return EXIT_FAILED_RUNS
    return 0


def cmd_train(cfg: dict, args) -> int:
    data, config = resolve(cfg, args.seed, args.mode)
    datasets = load_datasets(cfg, data)
    n_classes = None if "data_path" in cfg else SyntheticSpec(**data).n_classes
    rep = run_training("train", datasets, config, args.out, n_classes)
    row = {"run": "train", "mode": config.mode, "seed": config.seed, "status": "ok",
           "gamma_hat": rep["gamma_hat"], "gamma_status": rep["gamma_status"]}
    ev = rep.get("target_eval", {})
    row.update({k: ev.get(k) for k in ("accuracy", "auc", "gamma_l1", "gamma_linf")})
    _write_rows(args.out / "summary.csv", SUMMARY_COLUMNS, [row])
    return 0


def divergence_estimate(features, labels, target, n_classes: int) -> np.ndarray:
    """Minimiser over the simplex of the kernel divergence on fixed features."""
    grid = dist_match.build_grid(features, labels, n_classes, "median")
    stats = dist_match.estimate_match_stats(target, features, labels, grid, n_classes=n_classes)
    res = minimize(lambda z: dist_match.f_divergence_objective(stats, z), np.zeros(n_classes),
                   jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": 1000})
    return softmax(res.x)


def estimate_proportions(sources, target_x, n_classes: int) -> dict:
    """Three estimators per source domain and pooled, with pairwise agreement."""
    per_domain = []
    for d in sources:
        cm = class_conditional_means(d.x, d.y, n_classes)
        mu = target_x.mean(axis=0)
        per_domain.append({
            "domain": d.domain,
            "closed_form": solve_proportions_closed_form(cm, mu),
            "gradient_path": gradient_path_proportions(cm, mu),
            "f_divergence": divergence_estimate(d.x, d.y, target_x, n_classes),
        })
    pooled = {"domain": "pooled"}
    means = [class_conditional_means(d.x, d.y, n_classes) for d in sources]
    mu = target_x.mean(axis=0)
    w = np.full(len(sources), 1.0 / len(sources))
    pooled["closed_form"] = solve_proportions_closed_form(means, mu, w)
    pooled["gradient_path"] = gradient_path_proportions(means, mu, w)
    xs = np.vstack([d.x for d in sources])
    ys = np.concatenate([d.y for d in sources])
    pooled["f_divergence"] = divergence_estimate(xs, ys, target_x, n_classes)
    methods = ("closed_form", "gradient_path", "f_divergence")
    agreement = {
        f"{a}_vs_{b}": float(np.abs(pooled[a] - pooled[b]).max())
        for i, a in enumerate(methods) for b in methods[i + 1:]
    }
    return {"per_domain": per_domain, "pooled": pooled, "agreement_linf": agreement}


def cmd_estimate(cfg: dict, args) -> int:
    data, _ = resolve(cfg, args.seed, None)
    datasets = load_datasets(cfg, data)
    tgt = _target(datasets)
    sources = [d for d in datasets if not d.is_target]
    if not sources or any(d.y is None for d in sources):
        raise UsageError("estimation needs labeled source domains")
    n_classes = int(max(d.y.max() for d in sources)) + 1
    report = estimate_proportions(sources, tgt.x, n_classes)
    truth = tgt.proportions
    rows = []
    for entry in report["per_domain"] + [report["pooled"]]:
        for m in ("closed_form", "gradient_path", "f_divergence"):
            linf = None if truth is None else float(np.abs(entry[m] - truth).max())
            rows.append({"method": m, "domain": entry["domain"], "gamma_hat": entry[m],
                         "gamma_linf": linf})
    report["true_gamma"] = truth
    _write_rows(args.out / "summary.csv", ESTIMATE_COLUMNS, rows)
    _write_json(args.out / "report_estimate.json", report)
    return 0


def cmd_eval(cfg: dict, args) -> int:
    model_path = args.model or cfg.get("model")
    if model_path is None:
        raise UsageError("eval needs --model or a 'model' config entry")
    state, _ = model_io.load_model(model_path)
    data, _ = resolve(cfg, args.seed, None)
    datasets = load_datasets(cfg, data)
    rows, report = [], {"model": str(model_path), "domains": {}}
    labeled = [d for d in datasets if d.y is not None]
    if not labeled or sum(len(d) for d in labeled) == 0:
        raise UsageError("no labeled samples to evaluate")
    dim = state.feature[0].fan_in
    for d in labeled:
        if d.x.shape[1] != dim:
            raise LoadError(f"model expects {dim} features, dataset has {d.x.shape[1]}")
        ev = trainer.evaluate(state, d.x, d.y)
        report["domains"][str(d.domain)] = ev
        rows.append({"domain": d.domain, **ev})
    _write_rows(args.out / "metrics_eval.csv", EVAL_COLUMNS, rows)
    _write_json(args.out / "report_eval.json", report)
    return 0


COMMANDS = {"sweep": cmd_sweep, "train": cmd_train, "estimate": cmd_estimate, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dats",
        description="Adversarial domain adaptation under label shift.",
        epilog="summary.csv columns (sweep/train): " + ",".join(SUMMARY_COLUMNS)
        + "; (estimate): " + ",".join(ESTIMATE_COLUMNS)
        + ". metrics_eval.csv columns: " + ",".join(EVAL_COLUMNS)
        + ". Flags override config-file fields.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("sweep", "train every mode across a target-proportion sweep"),
                        ("train", "train one model"),
                        ("estimate", "estimate target proportions on fixed features"),
                        ("eval", "evaluate a saved model on labeled data")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="JSON configuration file")
        sp.add_argument("--out", type=Path, default=Path("."), help="output directory")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--mode", choices=trainer.MODES, help="override the training mode")
        if name == "eval":
            sp.add_argument("--model", type=Path, help="model dump written by train or sweep")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except DatsError as exc:
        print(error_line(exc), file=sys.stderr)
        return EXIT_ERROR.get(exc.code, 6)
    except OSError as exc:
        print(error_line(exc), file=sys.stderr)
        return 6


if __name__ == "__main__":
    sys.exit(main())
