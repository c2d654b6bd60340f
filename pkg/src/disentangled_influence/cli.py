"""Command-line front end.

Every command writes a ``manifest*.json`` holding its effective configuration,
library versions, seeds and input digests; ``replay`` re-runs a manifest.
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import urllib.request
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import __version__, nnkit
from .audit import AuditPlan, disentangled_influence_audit, direct_influence_audit, audit_split
from .datasets import (
    TabularDataset,
    gen_planted_proxy,
    gen_xy_synthetic,
    load_adult_raw,
    planted_proxy_model,
    preprocess_adult,
    xy_fixed_model,
)
from .disentangler import (
    DisentangleConfig,
    HandcraftedXYRep,
    error_report,
    load_net,
    load_rep,
    save_net,
    save_rep,
    train_adversarial,
)
from .influence import ShapConfig
from .reporting import (
    SUMMARY_FIELDS,
    dump_json,
    file_digest,
    read_rows,
    safe_name,
    summary_text,
    write_errors_csv,
    write_report,
    write_rows,
)

log = logging.getLogger("disentangled_influence")

ADULT_URL = "https://archive.ics.uci.edu/ml/machine-learning-databases/adult/"
BUILTIN_MODELS = {"fixed-xy": xy_fixed_model, "planted-proxy": planted_proxy_model}

# keys never recorded in manifests: they do not affect results
EXECUTION_KEYS = {"out", "jobs", "config", "command", "verbose"}

DEFAULTS = {
    "gen-data": dict(dataset="xy", n=5000, seed=0, test_fraction=0.2, train_file=None,
                     test_file=None, rare_threshold=1000),
    "train-model": dict(dataset=None, hidden=[], learning_rate=0.01, batch_size=16,
                        train_steps=None, seed=0),
    "train-dr": dict(dataset=None, feature=None, dr="learned", beta=None, latent_dim=None,
                     hidden=None, learning_rate=0.01, batch_size=16, train_steps=None, seed=0,
                     preset=None),
    "errors": dict(rep=None, dataset=None, model=None, instances=None),
    "audit": dict(mode="indirect", dr="learned", dataset=None, model=None, features="all",
                  seed=0, instances=100, background_size=50, shap_mode="auto",
                  permutations=200, exact_width_limit=12, beta=None, latent_dim=None,
                  hidden=None, learning_rate=0.01, batch_size=16, train_steps=None,
                  preset=None, rep_dir=None, svg=False),
    "report": dict(run=None),
}


class ValidationError(Exception):
    pass


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disentangled-influence", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=None)
        p.add_argument("--config", help="YAML/JSON file of option values; flags override it")
        return p

    p = add("gen-data", "generate or preprocess a dataset")
    p.add_argument("--dataset", choices=["xy", "adult", "planted"])
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--train-file")
    p.add_argument("--test-file")
    p.add_argument("--rare-threshold", type=int)
    p.add_argument("--out", required=True)

    p = add("train-model", "train the model to be audited")
    p.add_argument("--dataset", help="dataset directory written by gen-data")
    p.add_argument("--hidden", type=_int_list, help="comma-separated hidden widths (default none)")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--train-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("train-dr", "train (or construct) a disentangled representation for one feature")
    p.add_argument("--dataset")
    p.add_argument("--feature")
    p.add_argument("--dr", choices=["learned", "handcrafted"])
    _add_dr_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("errors", "reconstruction, prediction and disentanglement errors of a representation")
    p.add_argument("--rep")
    p.add_argument("--dataset")
    p.add_argument("--model", help="fixed-xy, planted-proxy or a model.json path")
    p.add_argument("--instances", type=int)
    p.add_argument("--out", required=True)

    p = add("audit", "run direct and/or indirect influence audits")
    p.add_argument("--mode", choices=["indirect", "direct", "both"])
    p.add_argument("--dr", choices=["learned", "handcrafted", "preloaded"])
    p.add_argument("--dataset")
    p.add_argument("--model", help="fixed-xy, planted-proxy or a model.json path")
    p.add_argument("--features", help="'all' or comma-separated column names")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--instances", type=int, help="number of test instances to explain")
    p.add_argument("--background-size", type=int)
    p.add_argument("--shap-mode", choices=["auto", "exact", "permutation"])
    p.add_argument("--permutations", type=int)
    p.add_argument("--exact-width-limit", type=int)
    _add_dr_flags(p)
    p.add_argument("--rep-dir", help="directory of dr_*.json files for --dr preloaded")
    p.add_argument("--svg", action="store_true", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("report", "combined summary table of an audit directory")
    p.add_argument("--run")
    p.add_argument("--out")

    p = sub.add_parser("replay", help="re-execute the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("fetch-adult", help="download the UCI Adult files (needs network)")
    p.add_argument("--out", required=True)
    return parser


def _add_dr_flags(p):
    p.add_argument("--preset", choices=["synthetic", "adult"],
                   help="architecture defaults (chosen from the dataset when omitted)")
    p.add_argument("--beta", type=float)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--hidden", type=_int_list)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--train-steps", type=int)


def effective_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS.get(command, {}))
    if getattr(args, "config", None):
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        loaded = {str(k).replace("-", "_"): v for k, v in loaded.items()}
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command", "verbose"):
            cfg[k] = v
    return cfg


def _recorded(cfg: dict) -> dict:
    return {k: v for k, v in sorted(cfg.items()) if k not in EXECUTION_KEYS}


def _manifest(command, cfg, inputs=(), **extra) -> dict:
    return {
        "command": command,
        "config": _recorded(cfg),
        "versions": {"disentangled_influence": __version__, "numpy": np.__version__},
        "inputs": {str(Path(p).name): file_digest(p) for p in inputs},
        **extra,
    }


def _load_dataset(path) -> TabularDataset:
    if path is None:
        raise ValidationError("--dataset is required")
    path = Path(path)
    if not (path / "dataset.json").exists():
        raise ValidationError(f"{path} is not a dataset directory (no dataset.json)")
    return TabularDataset.load(path)


def _dataset_inputs(path):
    path = Path(path)
    return [p for p in (path / "dataset.json", path / "train.csv", path / "test.csv") if p.exists()]


def _load_model(spec, dataset_dir):
    if spec is None:
        candidate = Path(dataset_dir) / "model.json"
        if candidate.exists():
            return load_net(candidate), [candidate]
        raise ValidationError("--model is required (no model.json next to the dataset)")
    if spec in BUILTIN_MODELS:
        return BUILTIN_MODELS[spec](), []
    path = Path(spec)
    if path.is_dir():
        path = path / "model.json"
    if not path.exists():
        raise ValidationError(f"model {spec!r} is neither a builtin nor an existing file")
    return load_net(path), [path]


def _dr_config(cfg, data: TabularDataset, seed) -> DisentangleConfig:
    preset = cfg.get("preset") or ("adult" if data.task == "binary_classification" else "synthetic")
    base = DisentangleConfig.adult() if preset == "adult" else DisentangleConfig.synthetic()
    over = {k: cfg[k] for k in ("beta", "latent_dim", "learning_rate", "batch_size", "train_steps")
            if cfg.get(k) is not None}
    if cfg.get("hidden") is not None:
        over["hidden"] = tuple(cfg["hidden"])
    return DisentangleConfig(**{**asdict(base), **over, "seed": seed})


# -- commands -----------------------------------------------------------

def cmd_gen_data(cfg) -> int:
    out = Path(cfg["out"])
    inputs = []
    extra = {}
    if cfg["dataset"] == "xy":
        data = gen_xy_synthetic(cfg["n"], cfg["seed"], cfg["test_fraction"])
    elif cfg["dataset"] == "planted":
        data = gen_planted_proxy(cfg["n"], cfg["seed"], test_fraction=cfg["test_fraction"])
    else:
        if not cfg.get("train_file") or not cfg.get("test_file"):
            raise ValidationError("--dataset adult needs --train-file and --test-file")
        inputs = [cfg["train_file"], cfg["test_file"]]
        data, report = preprocess_adult(load_adult_raw(cfg["train_file"]),
                                        load_adult_raw(cfg["test_file"]), cfg["rare_threshold"])
        out.mkdir(parents=True, exist_ok=True)
        dump_json(report.to_dict(), out / "preprocess.json")
        extra["n_train"], extra["n_test"] = int(np.sum(data.split == "train")), int(np.sum(data.split == "test"))
    data.save(out)
    dump_json(_manifest("gen-data", cfg, inputs, **extra), out / "manifest.json")
    log.info("wrote %d rows x %d features to %s", len(data.values), data.n_features, out)
    return 0


def cmd_train_model(cfg) -> int:
    data = _load_dataset(cfg["dataset"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    classify = data.task == "binary_classification"
    steps = cfg["train_steps"] if cfg["train_steps"] is not None else (30_000 if classify else 10_000)
    tc = nnkit.TrainConfig(cfg["learning_rate"], cfg["batch_size"], steps, cfg["seed"],
                           "bce" if classify else "mse")
    rng = np.random.default_rng(tc.seed)
    net = nnkit.init_net([data.n_features, *cfg["hidden"], 1], "relu",
                         "sigmoid" if classify else "linear", rng)
    train, test = data.train, data.test
    net, trace = nnkit.sgd_train(net, train.values, train.labels[:, None], tc, rng=rng)
    metrics = {"train_steps": steps, "final_batch_loss": float(trace[-1]) if len(trace) else None}
    for part, sub in (("train", train), ("test", test)):
        if len(sub.values) == 0:
            continue
        pred = nnkit.forward(net, sub.values)
        metrics[f"{part}_loss"] = nnkit.loss_value(tc.loss, pred, sub.labels[:, None])
        if classify:
            metrics[f"{part}_accuracy"] = float(np.mean((pred[:, 0] >= 0.5) == (sub.labels == 1.0)))
    save_net(net, out / "model.json")
    dump_json(metrics, out / "metrics.json")
    dump_json(_manifest("train-model", cfg, _dataset_inputs(cfg["dataset"])), out / "manifest_model.json")
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_train_dr(cfg) -> int:
    data = _load_dataset(cfg["dataset"])
    feature = cfg["feature"]
    if feature is None:
        raise ValidationError("--feature is required")
    data.column_index(feature)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["dr"] == "handcrafted":
        rep = HandcraftedXYRep(feature)
        extra = {}
    else:
        dc = _dr_config(cfg, data, cfg["seed"])
        dc.p_is_binary = data.is_binary(feature)
        rep, trace = train_adversarial(data, feature, dc)
        extra = {"final_losses": {"enc": float(trace[-1, 0]), "dec": float(trace[-1, 1]),
                                  "disc": float(trace[-1, 2])} if len(trace) else None}
    path = out / f"dr_{safe_name(feature)}.json"
    save_rep(rep, path)
    dump_json(_manifest("train-dr", cfg, _dataset_inputs(cfg["dataset"]), **extra),
              out / f"manifest_dr_{safe_name(feature)}.json")
    log.info("wrote %s", path)
    return 0


def cmd_errors(cfg) -> int:
    if cfg["rep"] is None:
        raise ValidationError("--rep is required")
    rep = load_rep(cfg["rep"])
    data = _load_dataset(cfg["dataset"])
    model, model_inputs = _load_model(cfg["model"], cfg["dataset"])
    rows = data.test.values if np.any(data.split == "test") else data.values
    if cfg["instances"] is not None:
        rows = rows[: cfg["instances"]]
    er = error_report(rep, model, rows)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    stem = safe_name(rep.feature_of_interest)
    write_errors_csv(out / f"errors_{stem}.csv", er, rep.feature_names, rows[:, rep.p_index])
    dump_json(er.summary(), out / f"errors_{stem}.json")
    dump_json(_manifest("errors", cfg, [cfg["rep"], *_dataset_inputs(cfg["dataset"]), *model_inputs]),
              out / f"manifest_errors_{stem}.json")
    return 0


def _load_preloaded(rep_dir, features):
    if rep_dir is None:
        raise ValidationError("--dr preloaded needs --rep-dir")
    reps = {}
    for f in features:
        path = Path(rep_dir) / f"dr_{safe_name(f)}.json"
        if not path.exists():
            raise ValidationError(f"missing representation {path}")
        reps[f] = load_rep(path)
    return reps


def cmd_audit(cfg) -> int:
    data = _load_dataset(cfg["dataset"])
    model, model_inputs = _load_model(cfg["model"], cfg["dataset"])
    features = (list(data.feature_names) if cfg["features"] in (None, "all")
                else [f.strip() for f in str(cfg["features"]).split(",") if f.strip()])
    for f in features:
        try:
            data.column_index(f)
        except KeyError as exc:
            raise ValidationError(str(exc)) from None
    shap = ShapConfig(cfg["shap_mode"], cfg["background_size"], cfg["permutations"], cfg["seed"],
                      cfg["exact_width_limit"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    inputs = [*_dataset_inputs(cfg["dataset"]), *model_inputs]
    manifest_extra = {}
    direct_vals = None
    if cfg["mode"] in ("indirect", "both"):
        source = {"handcrafted": "handcrafted_xy"}.get(cfg["dr"], cfg["dr"])
        preloaded = _load_preloaded(cfg["rep_dir"], features) if source == "preloaded" else None
        if preloaded:
            inputs += [Path(cfg["rep_dir"]) / f"dr_{safe_name(f)}.json" for f in features]
        plan = AuditPlan(features, source, shap, _dr_config(cfg, data, 0), cfg["seed"],
                         cfg["instances"], preloaded)
        report = disentangled_influence_audit(data, model, plan, jobs=cfg.get("jobs", 1),
                                              direct=cfg["mode"] == "both")
        manifest_extra.update(report.meta)
        manifest_extra["dr_config"] = {**asdict(plan.dr), "hidden": list(plan.dr.hidden)}
        manifest_extra["status"] = {f: (a.failure or "ok") for f, a in report.features.items()}
    else:
        from .audit import AuditReport
        report = AuditReport({}, direct_influence_audit(data, model, shap, cfg["instances"]))
        manifest_extra["status"] = {}
    manifest_extra["shap_config"] = asdict(shap)
    if report.direct is not None:
        direct_vals = audit_split(data, shap, cfg["instances"])[1]
    write_report(report, out, data.feature_names, svg=bool(cfg["svg"]), direct_values=direct_vals)
    dump_json(_manifest("audit", cfg, inputs, **manifest_extra), out / "manifest.json")
    print(summary_text(read_rows(out / "summary.csv")), end="")
    if report.features and not report.succeeded():
        log.error("every feature audit failed")
        return 2
    return 0


def cmd_report(cfg) -> int:
    run = Path(cfg["run"] or ".")
    summaries = sorted(run.rglob("summary.csv"))
    if not summaries:
        raise ValidationError(f"no summary.csv under {run}")
    rows = []
    for path in summaries:
        source = str(path.parent.relative_to(run)) if path.parent != run else "."
        for row in read_rows(path):
            rows.append({"source": source, **row})
    out = Path(cfg.get("out") or run)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "report.csv", ["source", *SUMMARY_FIELDS], rows)
    text = summary_text(rows)
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_fetch_adult(out) -> int:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("adult.data", "adult.test"):
        with urllib.request.urlopen(ADULT_URL + name, timeout=60) as resp:
            (out / name).write_bytes(resp.read())
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-model": cmd_train_model,
    "train-dr": cmd_train_dr,
    "errors": cmd_errors,
    "audit": cmd_audit,
    "report": cmd_report,
}


def run_command(command: str, cfg: dict) -> int:
    return COMMANDS[command](cfg)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "fetch-adult":
            return cmd_fetch_adult(args.out)
        if args.command == "replay":
            manifest = json.loads(Path(args.manifest).read_text())
            cfg = {**DEFAULTS[manifest["command"]], **manifest["config"],
                   "out": args.out, "jobs": args.jobs}
            return run_command(manifest["command"], cfg)
        cfg = effective_config(args.command, args)
        return run_command(args.command, cfg)
    except (ValidationError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except nnkit.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
