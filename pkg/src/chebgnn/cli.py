"""Command-line front end: ``chebgnn {generate,train,eval,params,stability,transfer}``.

Configuration is a nested YAML (or JSON) mapping; see ``DEFAULTS`` for every
key.  Values resolve as defaults < ``--config`` file < ``--set key=value``
overrides, and the resolved mapping is written to ``manifest.json`` next to
the outputs.  A manifest can itself be passed to ``--config`` to repeat the
run.

Seeds: ``seed`` is the root seed for data generation (and stability
sweeps); ``train.seeds`` lists one training seed per run, each of which
derives its initialization and shuffling streams as documented in
:mod:`chebgnn.training`.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional

import numpy as np
import scipy
import yaml
from threadpoolctl import threadpool_limits

from . import __version__
from .data import (
    DATASET_SCHEMA,
    Dataset,
    DatasetError,
    PatternConfig,
    SbmConfig,
    gen_cluster_like,
    gen_pattern_like,
    load_dataset,
    save_dataset,
)
from .graph import GraphError
from .nn import CHECKPOINT_SCHEMA, Model, ModelSpec, load_checkpoint, param_count
from .training import (
    DEFAULT_SEEDS,
    TASK_METRIC,
    DivergenceError,
    MetricReport,
    TrainConfig,
    evaluate,
    make_batches,
    model_seed,
    train_one,
)
from .transfer import REPORT_SCHEMA, chebyshev_lipschitz_bound, size_transfer, stability_sweep

log = logging.getLogger("chebgnn")

MANIFEST_SCHEMA = "chebgnn.manifest/1"
SUMMARY_SCHEMA = "chebgnn.summary/1"
RESULTS_FIELDS = ("seed", "status", "best_epoch", "best_val", "test_metric")

DEFAULTS = {
    "seed": 0,
    "out": None,
    "threads": 1,
    "dataset": {
        "path": None,
        "kind": "cluster",  # cluster | pattern
        "n_graphs": 1200,
        "sbm": {"n_communities": 6, "min_size": 5, "max_size": 35, "p": 0.55, "q": 0.25, "labeled_per_community": 1},
        "pattern": {
            "pattern_size": 20,
            "n_patterns": 100,
            "attach_prob": None,
            "pattern_p": None,
            "vocab": 3,
            "host": {"n_communities": 5, "min_size": 5, "max_size": 35, "p": 0.55, "q": 0.25},
        },
    },
    "model": {
        "arch": "7 -E70 -ChN70 -ChN70 -ChN70 -ChN70 -MP70 -L35 -L17 -L6",
        "task": "node-classification",
        "k": 5,
        "residual": None,
        "lambda_max": 2.0,
    },
    "train": {
        "batch_size": 128,
        "lr0": 1e-3,
        "plateau_factor": 0.5,
        "plateau_patience": 5,
        "min_lr": 1e-5,
        "max_epochs": 100,
        "seeds": list(DEFAULT_SEEDS),
        "workers": 1,
    },
    "eval": {"checkpoint": None, "split": "test"},
    "stability": {
        "n_communities": 4,
        "community_size": 25,
        "p": 0.55,
        "q": 0.25,
        "theta": None,  # explicit coefficients, else random of length k
        "k": 6,
        "eps": [1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
        "trials": 5,
        "kind": "weight",
        "lambda_max": 2.0,
        "max_iter": 200,
    },
    "transfer": {
        "train_sizes": [7, 10],
        "eval_sizes": [14, 20],
        "n_train_graphs": 1200,
        "n_eval_graphs": 200,
    },
}


class CliError(Exception):
    """User-facing failure; printed without a traceback."""


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        path = f"{where}{key}"
        if key not in base:
            raise CliError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and base[key]:
            if not isinstance(val, dict):
                raise CliError(f"config key {path!r} expects a mapping")
            out[key] = _merge(base[key], val, path + ".")
        else:
            out[key] = val
    return out


def parse_override(item: str) -> dict:
    """``"train.max_epochs=5"`` -> ``{"train": {"max_epochs": 5}}`` (value parsed as YAML)."""
    if "=" not in item:
        raise CliError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        val = yaml.safe_load(raw) if raw else None
    except yaml.YAMLError as exc:
        raise CliError(f"--set {key}: cannot parse value {raw!r}: {exc}") from None
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = val
    return node


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file {path} does not exist")
    try:
        text = path.read_text()
        data = json.loads(text) if path.suffix == ".json" else (yaml.safe_load(text) or {})
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise CliError(f"{path}: cannot parse config: {exc}") from None
    if not isinstance(data, dict):
        raise CliError(f"{path}: top level must be a mapping")
    if data.get("schema") == MANIFEST_SCHEMA:
        data = data["config"]
    return data


def resolve_config(config_path=None, overrides: Optional[List[str]] = None, flags: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        cfg = _merge(cfg, load_config_file(config_path))
    for item in overrides or []:
        cfg = _merge(cfg, parse_override(item))
    for dotted, val in (flags or {}).items():
        if val is not None:
            cfg = _merge(cfg, parse_override(f"{dotted}={json.dumps(val)}"))
    return cfg


_FLOAT_KEYS = ("lr0", "plateau_factor", "min_lr", "p", "q", "attach_prob", "pattern_p", "lambda_max")


def _numbers(d: dict) -> dict:
    # YAML 1.1 reads "1e-5" as a string
    return {k: float(v) if k in _FLOAT_KEYS and v is not None else v for k, v in d.items()}


def _train_config(cfg: dict) -> TrainConfig:
    t = _numbers({k: v for k, v in cfg["train"].items() if k != "workers"})
    t["seeds"] = tuple(int(s) for s in t["seeds"] or ())
    for key in ("batch_size", "plateau_patience", "max_epochs"):
        t[key] = int(t[key])
    tc = TrainConfig(**t)
    tc.validate()
    return tc


def _model_spec(cfg: dict, input_dim: Optional[int] = None) -> ModelSpec:
    m = cfg["model"]
    return ModelSpec.parse(
        m["arch"], task=m["task"], k=int(m["k"]), input_dim=input_dim, residual=m["residual"], lambda_max=float(m["lambda_max"])
    )


def _sbm_config(d: dict, seed: int) -> SbmConfig:
    return SbmConfig(seed=int(seed), **_numbers(d))


def _dataset(cfg: dict) -> Dataset:
    d = cfg["dataset"]
    if d["path"] is not None:
        return load_dataset(d["path"], task=cfg["model"]["task"] if not _has_header(d["path"]) else None)
    if d["kind"] == "cluster":
        return gen_cluster_like(_sbm_config(d["sbm"], cfg["seed"]), int(d["n_graphs"]))
    if d["kind"] == "pattern":
        pat = _numbers(d["pattern"])
        host = SbmConfig(**_numbers(pat.pop("host")))
        return gen_pattern_like(PatternConfig(host=host, seed=int(cfg["seed"]), **pat), int(d["n_graphs"]))
    raise CliError(f"unknown dataset kind {d['kind']!r}; expected 'cluster' or 'pattern'")


def _has_header(path) -> bool:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    try:
        return isinstance(json.loads(first), dict) and json.loads(first).get("schema") == DATASET_SCHEMA
    except json.JSONDecodeError:
        return False


# ---------------------------------------------------------------------------
# outputs


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(cfg: dict, required: bool = True) -> Optional[Path]:
    if cfg["out"] is None:
        if required:
            raise CliError("no output directory; pass --out DIR")
        return None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: dict, artifacts: List[Path], inputs: Optional[dict] = None) -> Path:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "config": cfg,
        "seeds": {"root": cfg["seed"], "train": list(cfg["train"]["seeds"])},
        "inputs": inputs or {},
        "artifacts": {p.name: sha256(p) for p in sorted(artifacts)},
        "schemas": {
            "dataset": DATASET_SCHEMA,
            "checkpoint": CHECKPOINT_SCHEMA,
            "stability": REPORT_SCHEMA,
            "summary": SUMMARY_SCHEMA,
        },
        "versions": {
            "chebgnn": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _input_hashes(cfg: dict) -> dict:
    out = {}
    for key in ("path",):
        p = cfg["dataset"][key]
        if p is not None and Path(p).exists():
            out[f"dataset.{key}"] = sha256(p)
    ckpt = cfg["eval"]["checkpoint"]
    if ckpt is not None and Path(ckpt).is_file():
        out["eval.checkpoint"] = sha256(ckpt)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: dict) -> int:
    out = _out_dir(cfg)
    if cfg["dataset"]["path"] is not None:
        raise CliError("generate builds a dataset; unset dataset.path")
    ds = _dataset(cfg)
    path = out / "dataset.jsonl"
    save_dataset(ds, path)
    write_manifest(out, "generate", cfg, [path])
    print(f"wrote {len(ds)} graphs ({ds.task}, vocab {ds.input_dim}) to {path}")
    return 0


def _seed_worker(args):
    spec_dict, ds, tcfg, seed, out = args
    spec = ModelSpec.from_dict(spec_dict)
    kwargs = {}
    if out is not None:
        kwargs = dict(log_path=Path(out) / f"epochs_seed{seed}.csv", checkpoint_path=Path(out) / f"checkpoint_seed{seed}.npz")
    try:
        run = train_one(Model(spec, model_seed(seed)), ds, tcfg, seed, **kwargs)
    except DivergenceError as exc:
        return dict(seed=seed, status="diverged", best_epoch="", best_val="", test_metric="", error=str(exc))
    return dict(seed=seed, status="ok", best_epoch=run.best_epoch, best_val=run.best_val, test_metric=run.test_metric)


def run_training(spec: ModelSpec, ds: Dataset, tcfg: TrainConfig, out: Path, workers: int) -> MetricReport:
    """Train every seed, serially or in worker processes; the outputs are identical either way."""
    if spec.input_dim != ds.input_dim:
        raise CliError(f"model input width {spec.input_dim} != dataset vocabulary {ds.input_dim}")
    if spec.task != ds.task:
        raise CliError(f"model task {spec.task!r} != dataset task {ds.task!r}")
    jobs = [(spec.to_dict(), ds, tcfg, seed, str(out)) for seed in tcfg.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_seed_worker, jobs))
    else:
        rows = [_seed_worker(j) for j in jobs]
    ok = [r for r in rows if r["status"] == "ok"]
    report = MetricReport(
        TASK_METRIC[spec.task][0],
        [r["test_metric"] for r in ok],
        [r["seed"] for r in ok],
        failed={r["seed"]: r["error"] for r in rows if r["status"] != "ok"},
    )
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULTS_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return report


def _summary(report: MetricReport, **extra) -> dict:
    return {"schema": SUMMARY_SCHEMA, **report.to_dict(), **extra}


def _format_report(report: MetricReport) -> str:
    if not report.per_seed:
        return f"{report.metric}: no successful seeds"
    return f"{report.metric}: {report.mean:.4f} +- {report.std:.4f} over seeds {list(report.seeds)}"


def cmd_train(cfg: dict) -> int:
    out = _out_dir(cfg)
    ds = _dataset(cfg)
    spec = _model_spec(cfg)
    tcfg = _train_config(cfg)
    report = run_training(spec, ds, tcfg, out, int(cfg["train"]["workers"]))
    summary = _write_json(out / "summary.json", _summary(report, params=param_count(Model(spec)), spec=spec.to_dict()))
    artifacts = [summary, out / "results.csv"] + sorted(out.glob("epochs_seed*.csv")) + sorted(out.glob("checkpoint_seed*.npz"))
    write_manifest(out, "train", cfg, [a for a in artifacts if a.exists()], _input_hashes(cfg))
    print(_format_report(report))
    for seed, msg in report.failed.items():
        print(f"seed {seed} failed: {msg}", file=sys.stderr)
    return 1 if report.failed else 0


def _checkpoints(path) -> List[Path]:
    path = Path(path)
    if path.is_dir():
        found = sorted(path.glob("checkpoint_seed*.npz"))
        if not found:
            raise CliError(f"no checkpoint_seed*.npz files in {path}")
        return found
    if not path.exists():
        raise CliError(f"checkpoint {path} does not exist")
    return [path]


def check_compatible(model: Model, ds: Dataset) -> None:
    spec = model.spec
    if spec.task != ds.task:
        raise CliError(f"checkpoint task {spec.task!r} != dataset task {ds.task!r}")
    if spec.input_dim != ds.input_dim:
        raise CliError(f"checkpoint vocabulary {spec.input_dim} != dataset vocabulary {ds.input_dim}")
    for g in ds.graphs:
        if g.feature_kind == "categorical" and g.n_nodes and g.features.max() >= spec.input_dim:
            raise CliError(f"graph {g.graph_id!r} has feature codes outside the checkpoint vocabulary")


def cmd_eval(cfg: dict) -> int:
    if cfg["eval"]["checkpoint"] is None:
        raise CliError("eval needs eval.checkpoint (a checkpoint file or a training output directory)")
    out = _out_dir(cfg, required=False)
    ds = _dataset(cfg)
    split = cfg["eval"]["split"]
    if split == "all":
        graphs = ds.graphs
    elif split in ds.splits:
        graphs = ds.subset(split)
    else:
        raise CliError(f"unknown split {split!r}; expected one of {sorted(ds.splits)} or 'all'")
    scores, seeds = [], []
    for path in _checkpoints(cfg["eval"]["checkpoint"]):
        try:
            model, meta = load_checkpoint(path)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot read checkpoint {path}: {exc}") from None
        check_compatible(model, ds)
        _, metric = evaluate(model, make_batches(graphs, int(cfg["train"]["batch_size"])))
        scores.append(metric)
        seeds.append(meta.get("run_seed", meta.get("seed")))
        name = TASK_METRIC[model.spec.task][0]
    report = MetricReport(name, scores, seeds)
    print(_format_report(report))
    if out is not None:
        summary = _write_json(out / "eval.json", _summary(report, split=split))
        write_manifest(out, "eval", cfg, [summary], _input_hashes(cfg))
    return 0


def cmd_params(cfg: dict) -> int:
    spec = _model_spec(cfg)
    n = param_count(Model(spec))
    print(n)
    out = _out_dir(cfg, required=False)
    if out is not None:
        summary = _write_json(out / "params.json", {"schema": SUMMARY_SCHEMA, "spec": spec.to_dict(), "params": n})
        write_manifest(out, "params", cfg, [summary])
    return 0


def cmd_stability(cfg: dict) -> int:
    out = _out_dir(cfg)
    s = cfg["stability"]
    size = int(s["community_size"])
    sbm = SbmConfig(
        n_communities=int(s["n_communities"]), min_size=size, max_size=size, p=float(s["p"]), q=float(s["q"]), seed=int(cfg["seed"])
    )
    graph = gen_cluster_like(sbm, 1).graphs[0]
    if s["theta"] is not None:
        theta = np.asarray(s["theta"], dtype=np.float64)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg["seed"]), 2]))
        theta = rng.standard_normal(int(s["k"]))
    rep = stability_sweep(
        graph,
        theta,
        [float(e) for e in s["eps"]],
        trials=int(s["trials"]),
        seed=int(cfg["seed"]),
        kind=s["kind"],
        lambda_max=float(s["lambda_max"]),
        max_iter=int(s["max_iter"]),
    )
    path = out / "stability.csv"
    path.write_text(rep.to_csv())
    summary = _write_json(
        out / "stability.json",
        {
            "schema": SUMMARY_SCHEMA,
            "theta": theta.tolist(),
            "n_nodes": graph.n_nodes,
            "slope": rep.slope,
            "intercept": rep.intercept,
            "r2": rep.r2,
            "insufficient_points": rep.insufficient_points,
            "max_ratio": float(rep.ratios.max()),
            "lipschitz_bound": chebyshev_lipschitz_bound(theta),
            "all_converged": all(r.converged for r in rep.rows),
        },
    )
    write_manifest(out, "stability", cfg, [path, summary])
    print(f"slope={rep.slope:.4f} r2={rep.r2:.4f} max ratio={rep.ratios.max():.4g} (n={graph.n_nodes})")
    return 0


def cmd_transfer(cfg: dict) -> int:
    out = _out_dir(cfg)
    t = cfg["transfer"]
    base = _numbers(cfg["dataset"]["sbm"])
    small = SbmConfig(**{**base, "min_size": int(t["train_sizes"][0]), "max_size": int(t["train_sizes"][1])}, seed=int(cfg["seed"]))
    large_seed = int(np.random.SeedSequence([int(cfg["seed"]), 3]).generate_state(1)[0])
    large = SbmConfig(**{**base, "min_size": int(t["eval_sizes"][0]), "max_size": int(t["eval_sizes"][1])}, seed=large_seed)
    spec = _model_spec(cfg)
    rep = size_transfer(small, large, spec, _train_config(cfg), int(t["n_train_graphs"]), int(t["n_eval_graphs"]), out_dir=out)
    summary = _write_json(out / "transfer.json", {"schema": SUMMARY_SCHEMA, **rep.to_dict()})
    artifacts = [summary] + sorted(out.glob("epochs_seed*.csv")) + sorted(out.glob("checkpoint_seed*.npz"))
    write_manifest(out, "transfer", cfg, artifacts)
    print(f"small: {_format_report(rep.small)}")
    print(f"large: {_format_report(rep.large)}")
    print(f"gap (small - large): {rep.gap:.4f}")
    return 1 if rep.small.failed else 0


COMMANDS = {
    "generate": (cmd_generate, "generate a synthetic dataset file"),
    "train": (cmd_train, "train one model per seed and summarize"),
    "eval": (cmd_eval, "evaluate saved checkpoints on a dataset"),
    "params": (cmd_params, "print the parameter count of a model spec"),
    "stability": (cmd_stability, "filter-distance sweep over perturbation sizes"),
    "transfer": (cmd_transfer, "train on small graphs, evaluate on larger ones"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chebgnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"chebgnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", help="YAML/JSON config file or a previous manifest.json")
        p.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. train.max_epochs=5 (repeatable)")
        p.add_argument("-o", "--out", help="output directory (config key 'out')")
        p.add_argument("--seed", type=int, help="root seed (config key 'seed')")
        p.add_argument("--threads", type=int, help="BLAS threads; 1 gives bit-reproducible runs (config key 'threads')")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "transfer", "params"):
            p.add_argument("--arch", help="model spec string (config key 'model.arch')")
        if name in ("train", "eval"):
            p.add_argument("--dataset", help="dataset file (config key 'dataset.path')")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint file or training output directory")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    flags = {
        "out": args.out,
        "seed": args.seed,
        "threads": args.threads,
        "model.arch": getattr(args, "arch", None),
        "dataset.path": getattr(args, "dataset", None),
        "eval.checkpoint": getattr(args, "checkpoint", None),
    }
    try:
        cfg = resolve_config(args.config, args.overrides, flags)
        log.debug("resolved config: %s", json.dumps(cfg, sort_keys=True))
        threads = cfg["threads"]
        with threadpool_limits(limits=int(threads)) if threads else nullcontext():
            return COMMANDS[args.command][0](cfg)
    except (CliError, DatasetError, GraphError, ValueError, TypeError, OSError) as exc:
        print(f"chebgnn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
