"""Command line: ``ganem run | evaluate | verify-theory | list-datasets``.

Run configs are YAML mappings::

    mode: cluster            # cluster | semisup | dimreduce | baseline-gmm | baseline-kmeans | verify-theory
    seed: 0
    output_dir: runs/rings   # relative paths resolve against $GANEM_OUTPUT_ROOT (default: cwd)
    dataset: {kind: two-rings, k: 2, n: 2000}
    em: {n_iterations: 20, lr_g: 0.001}
    semisup: {labels_per_class: 10}
    dimreduce: {k: 2}
    baseline: {covariance_type: full}
    theory: {trials: 20}
    checkpoint_every: 0

Unknown keys anywhere are errors reported with the offending line.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
import time
import traceback
from pathlib import Path

import numpy as np
import yaml

from . import __version__, _kernels, pipelines
from .data import SYNTH_KINDS, DataFormatError, load_dataset, save_dataset
from .emcore import ConfigError, EmConfig, load_state, metrics_csv, save_state
from .metrics import classification_error, clustering_error, embeddings_csv, hard_labels
from .nn import CheckpointError

log = logging.getLogger("ganem")

OUTPUT_ROOT_ENV = "GANEM_OUTPUT_ROOT"
MODES = ("cluster", "semisup", "dimreduce", "baseline-gmm", "baseline-kmeans", "verify-theory")
TOP_KEYS = {
    "mode",
    "seed",
    "output_dir",
    "dataset",
    "em",
    "semisup",
    "dimreduce",
    "baseline",
    "theory",
    "checkpoint_every",
}
SECTION_KEYS = {
    "dataset": pipelines.DATASET_KEYS,
    "em": set(EmConfig.field_names()) - {"seed"},
    "semisup": {"labels_per_class", "label_seed"},
    "dimreduce": {"k"},
    "baseline": {"covariance_type", "n_init", "max_iter", "tol"},
    "theory": {"trials", "max_support", "probes"},
}
SECTION_MODES = {"semisup": ("semisup",), "dimreduce": ("dimreduce",), "theory": ("verify-theory",)}


class ConfigFileError(ValueError):
    """Invalid run configuration, carrying the file line it refers to."""

    def __init__(self, path, line, message):
        self.path, self.line = str(path), line
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {message}")


# ------------------------------------------------------------------ config loading


def _line_index(node, prefix=(), out=None):
    """Map key paths of a composed YAML tree to 1-based line numbers."""
    out = {} if out is None else out
    out.setdefault(prefix, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = (*prefix, key.value)
            out[path] = key.start_mark.line + 1
            _line_index(value, path, out)
    return out


def load_config(path) -> dict:
    """Parse and validate a run config, returning the resolved settings.

    The result holds ``mode``, ``seed``, ``output_dir``, ``dataset`` (dict),
    ``em`` (:class:`EmConfig`) and the per-mode sections with defaults filled.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigFileError(path, None, f"cannot read config: {exc.strerror}") from None
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigFileError(path, mark.line + 1 if mark else None, f"YAML syntax error: {exc.problem}") from None
    if not isinstance(raw, dict):
        raise ConfigFileError(path, 1, "config must be a mapping")
    lines = _line_index(node)

    def fail(keys, message):
        keys = tuple(keys)
        while keys and keys not in lines:
            keys = keys[:-1]
        raise ConfigFileError(path, lines.get(keys, 1), message)

    for key in raw:
        if key not in TOP_KEYS:
            fail((key,), f"unknown key '{key}'")
    for section, allowed in SECTION_KEYS.items():
        value = raw.get(section)
        if value is None:
            continue
        if not isinstance(value, dict):
            fail((section,), f"'{section}' must be a mapping")
        for key in value:
            if key not in allowed:
                fail((section, key), f"unknown key '{key}' in '{section}'")

    mode = raw.get("mode")
    if mode not in MODES:
        fail(("mode",), f"mode must be one of {MODES}, got {mode!r}")
    for section, modes in SECTION_MODES.items():
        if section in raw and mode not in modes:
            fail((section,), f"section '{section}' does not apply to mode '{mode}'")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        fail(("seed",), "seed must be a non-negative integer")
    every = raw.get("checkpoint_every", 0)
    if not isinstance(every, int) or every < 0:
        fail(("checkpoint_every",), "checkpoint_every must be a non-negative integer")

    resolved = {
        "mode": mode,
        "seed": seed,
        "output_dir": str(raw.get("output_dir", f"runs/{path.stem}")),
        "checkpoint_every": every,
    }
    if mode == "verify-theory":
        theory = {"trials": 20, "max_support": 16, "probes": 1000, **(raw.get("theory") or {})}
        for key, value in theory.items():
            if not isinstance(value, int) or value <= 0:
                fail(("theory", key), f"{key} must be a positive integer")
        resolved["theory"] = theory
        return resolved

    dataset = dict(raw.get("dataset") or {})
    if not dataset:
        fail(("dataset",), "a 'dataset' section is required")
    if dataset.get("kind") != "idx":
        dataset.setdefault("seed", seed)
    resolved["dataset"] = dataset

    em = dict(raw.get("em") or {})
    if "n_clusters" not in em:
        if "k" in dataset:
            em["n_clusters"] = dataset["k"]
        elif dataset.get("classes"):
            em["n_clusters"] = len(dataset["classes"])
    try:
        config = EmConfig(**em, seed=seed)
        config.validate()
    except (TypeError, ValueError) as exc:
        bad = next((k for k in em if k in str(exc)), None)
        fail(("em", bad) if bad else ("em",), f"invalid em settings: {exc}")
    resolved["em"] = config

    if mode == "semisup":
        section = raw.get("semisup") or {}
        if "labels_per_class" not in section:
            fail(("semisup",), "semisup mode requires semisup.labels_per_class")
        m = section["labels_per_class"]
        if not isinstance(m, int) or m <= 0:
            fail(("semisup", "labels_per_class"), "labels_per_class must be a positive integer")
        resolved["semisup"] = {"labels_per_class": m, "label_seed": section.get("label_seed", seed)}
    if mode == "dimreduce":
        section = raw.get("dimreduce") or {}
        k = section.get("k", config.bottleneck)
        if k is None:
            fail(("dimreduce",), "dimreduce mode requires dimreduce.k (bottleneck width)")
        if not isinstance(k, int) or k <= 0:
            fail(("dimreduce", "k"), "k must be a positive integer")
        resolved["em"] = pipelines.config_with(config, bottleneck=k)
        resolved["dimreduce"] = {"k": k}
    if mode.startswith("baseline"):
        base = dict(raw.get("baseline") or {})
        if mode == "baseline-kmeans" and "covariance_type" in base:
            fail(("baseline", "covariance_type"), "covariance_type applies to baseline-gmm only")
        if mode == "baseline-gmm":
            base.setdefault("covariance_type", "full")
            if base["covariance_type"] not in ("diag", "full"):
                fail(("baseline", "covariance_type"), "covariance_type must be 'diag' or 'full'")
        resolved["baseline"] = base
    return resolved


def resolve_output_dir(output_dir) -> Path:
    out = Path(output_dir)
    if not out.is_absolute():
        out = Path(os.environ.get(OUTPUT_ROOT_ENV) or ".") / out
    return out


def _jsonable(resolved: dict) -> dict:
    out = {}
    for key, value in resolved.items():
        out[key] = value.to_dict() if isinstance(value, EmConfig) else value
    return out


# ------------------------------------------------------------------ artifacts


def _assignments_csv(w, pred, labels) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", *(f"w_{i}" for i in range(w.shape[1])), "pred", "label"])
    for n, (row, p) in enumerate(zip(w, pred)):
        label = int(labels[n]) if labels is not None else -1
        writer.writerow([n, *(repr(float(v)) for v in row), int(p), label])
    return buf.getvalue()


def _write(path: Path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)


class _Run:
    """Collects artifacts and the manifest for one ``run`` invocation."""

    def __init__(self, resolved, config_path):
        self.resolved = resolved
        self.out = resolve_output_dir(resolved["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts = []
        self.manifest = {
            "status": "running",
            "mode": resolved["mode"],
            "seed": resolved["seed"],
            "config_path": str(config_path),
            "config": _jsonable(resolved),
            "code_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "numba_kernels": _kernels.numba_enabled(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }

    def write(self, name, data):
        _write(self.out / name, data)
        if name not in self.artifacts:
            self.artifacts.append(name)

    def finish(self, status, **extra):
        self.manifest.update(status=status, artifacts=list(self.artifacts), finished=time.strftime("%Y-%m-%dT%H:%M:%S"))
        self.manifest.update(extra)
        _write(self.out / "manifest.json", json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def _em_callback(run: _Run, config: EmConfig, data_dim: int, every: int):
    trace = []

    def callback(row, state):
        trace.append(row)
        run.write("metrics.csv", metrics_csv(trace))
        if every and row["iteration"] % every == 0:
            run.write(f"checkpoint_{row['iteration']:04d}.gemc", save_state(state, config, data_dim))

    return callback


def execute(resolved: dict, config_path="<memory>") -> dict:
    """Run a resolved config, writing artifacts; returns the scores dict."""
    run = _Run(resolved, config_path)
    mode = resolved["mode"]
    try:
        if mode == "verify-theory":
            report = pipelines.verify_theory(**resolved["theory"], seed=resolved["seed"])
            run.write("theory.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
            run.finish("ok" if report["ok"] else "failed", scores=report)
            return report

        ds = pipelines.make_dataset(resolved["dataset"])
        run.write("dataset.gemd", save_dataset(ds))
        scores = {"n": len(ds), "dim": ds.dim}
        if mode.startswith("baseline"):
            k = resolved["em"].n_clusters
            if mode == "baseline-gmm":
                out = pipelines.baseline_gmm(ds, k, seed=resolved["seed"], **resolved["baseline"])
                rows = [{"iteration": i + 1, "log_likelihood": float(v)} for i, v in enumerate(out["loglik_trace"])]
            else:
                out = pipelines.baseline_kmeans(ds, k, seed=resolved["seed"], **resolved["baseline"])
                rows = [{"iteration": i + 1, "inertia": float(v)} for i, v in enumerate(out["inertia_trace"])]
            run.write("metrics.csv", metrics_csv(rows))
        else:
            config = resolved["em"]
            callback = _em_callback(run, config, ds.dim, resolved["checkpoint_every"])
            if mode == "cluster":
                out = pipelines.cluster(ds, config, callback=callback)
            elif mode == "semisup":
                sec = resolved["semisup"]
                out = pipelines.semisupervised(ds, config, sec["labels_per_class"], sec["label_seed"], callback=callback)
                scores["classification_error"] = out["classification_error"]
                scores["labeled_error"] = out["labeled_error"]
                run.write("labeled_indices.csv", "index\n" + "".join(f"{i}\n" for i in out["labeled_indices"]))
            else:
                out = pipelines.dimreduce(ds, config, callback=callback)
                run.write("embeddings.csv", embeddings_csv(out["embeddings"]))
                scores["gan_em_error"] = out["gan_em_error"]
            if config.n_iterations == 0:
                run.write("metrics.csv", "")
            run.write("checkpoint.gemc", save_state(out["result"].state, config, ds.dim))
        scores["clustering_error"] = out["clustering_error"]
        run.write("final_assignments.csv", _assignments_csv(out["w"], out["pred"], ds.labels))
        run.write("scores.json", json.dumps(scores, indent=2, sort_keys=True) + "\n")
        run.finish("ok", scores=scores)
        return scores
    except Exception as exc:
        run.finish("failed", error={"type": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()})
        raise


# ------------------------------------------------------------------ evaluate


def _load_eval_dataset(spec_path: Path):
    raw = spec_path.read_bytes()
    if raw[:4] == b"GEMC":
        return load_dataset(raw)
    spec = yaml.safe_load(raw.decode())
    if isinstance(spec, dict) and "dataset" in spec:
        seed = spec.get("seed", 0)
        spec = dict(spec["dataset"])
        if spec.get("kind") != "idx":
            spec.setdefault("seed", seed)
    if not isinstance(spec, dict):
        raise ValueError("dataset spec must be a mapping, a run config or a saved dataset")
    return pipelines.make_dataset(spec)


def evaluate(checkpoint, dataset, out_path=None) -> dict:
    """Score a saved model's E-net predictions on a dataset."""
    state, config, meta = load_state(Path(checkpoint).read_bytes())
    ds = _load_eval_dataset(Path(dataset))
    if ds.dim != meta["data_dim"]:
        raise ValueError(f"checkpoint expects {meta['data_dim']}-dimensional data, dataset has {ds.dim}")
    w = state.enet.predict(ds.x)
    pred = hard_labels(w)
    scores = {"n": len(ds), "n_clusters": config.n_clusters}
    if ds.labels is not None:
        scores["clustering_error"] = clustering_error(pred, ds.labels, max(config.n_clusters, ds.n_classes)).error
        scores["classification_error"] = classification_error(pred, ds.labels)
    if out_path is not None:
        _write(Path(out_path), json.dumps(scores, indent=2, sort_keys=True) + "\n")
    return scores


# ------------------------------------------------------------------ entry point


def _parser():
    p = argparse.ArgumentParser(prog="ganem", description="GAN-based EM clustering experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a YAML config")
    r.add_argument("config")
    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset", help="saved dataset (.gemd), dataset YAML mapping, or run config")
    e.add_argument("--out", help="scores JSON path (default: scores.json next to the checkpoint)")
    t = sub.add_parser("verify-theory", help="exact checks of the discriminator game and prior update")
    t.add_argument("--trials", type=int, default=20)
    t.add_argument("--seed", type=int, default=0)
    sub.add_parser("list-datasets", help="list dataset kinds")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            resolved = load_config(args.config)
            scores = execute(resolved, args.config)
            print(json.dumps(scores, sort_keys=True))
            return 0 if scores.get("ok", True) else 1
        if args.command == "evaluate":
            out = args.out or str(Path(args.checkpoint).with_name("scores.json"))
            scores = evaluate(args.checkpoint, args.dataset, out)
            for key, value in scores.items():
                print(f"{key}: {value}")
            return 0
        if args.command == "verify-theory":
            if args.trials <= 0:
                raise ValueError("--trials must be positive")
            report = pipelines.verify_theory(trials=args.trials, seed=args.seed)
            for key, value in report.items():
                print(f"{key}: {value}")
            return 0 if report["ok"] else 1
        for kind in SYNTH_KINDS:
            print(kind)
        print("idx")
        return 0
    except ConfigFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ConfigError, CheckpointError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
