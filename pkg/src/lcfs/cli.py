"""Experiment runner: config parsing, seed-grid execution and report files.

A run executes one task over every ``(seed_data, seed_params)`` cell and
writes ``report.json``, ``kta.csv``, ``importance.csv``, ``lambda.csv`` and one
model JSON per trained model into the output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import gen_parity, gen_quantum_dataset, load_breast_cancer
from .kernels import make_kernel
from .select import importance_scores, prune_model, reorder_features, single_term_kta_scan
from .sim import build_alternating_layered, build_brick_reuploading
from .train import KtaConfig, alternate_train

log = logging.getLogger(__name__)

TASKS = ("feature-select", "reorder", "prune", "qdata", "kta-scan")
KERNELS = ("pqk", "qfk")
DATASETS = ("parity", "breast-cancer", "quantum")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "task": {"enum": list(TASKS)},
        "kernel": {"enum": list(KERNELS)},
        "n_qubits": {"type": "integer", "minimum": 2, "maximum": 16},
        "depth": {"type": "integer", "minimum": 1},
        "dataset": {"enum": list(DATASETS)},
        "parity_subset": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "feature_indices": {
            "type": ["array", "null"],
            "items": {"type": "integer", "minimum": 0, "maximum": 29},
            "uniqueItems": True,
        },
        "n_train": {"type": "integer", "minimum": 2},
        "n_test": {"type": "integer", "minimum": 2},
        "seed_data": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "seed_params": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "seed_mode": {"enum": ["grid", "zip"]},
        "encoding": {"enum": ["rx", "ry", "rz"]},
        "rotation": {"enum": ["rx", "ry", "rz"]},
        "threshold": {"type": "number", "minimum": 0},
        "reorder_rounds": {"type": "integer", "minimum": 1},
        "scramble_depth": {"type": "integer", "minimum": 1},
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "iterations": {"type": "integer", "minimum": 1},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "max_rounds": {"type": "integer", "minimum": 1},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "out": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
    },
}

_STATS = {
    "type": "object",
    "required": ["n", "mean", "median", "std", "min", "max"],
    "properties": {k: {"type": ["number", "null"]} for k in ("mean", "median", "std", "min", "max")} | {"n": {"type": "integer"}},
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["config", "cells", "aggregate", "n_failed", "seconds"],
    "properties": {
        "config": CONFIG_SCHEMA,
        "cells": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["seed_data", "seed_params", "status", "arms"],
                "properties": {
                    "seed_data": {"type": "integer"},
                    "seed_params": {"type": "integer"},
                    "status": {"enum": ["ok", "error"]},
                    "error": {"type": "string"},
                    "arms": {
                        "type": "object",
                        "additionalProperties": {
                            "type": "object",
                            "required": ["kta_train", "kta_test", "weights"],
                            "properties": {
                                "kta_train": {"type": "number"},
                                "kta_test": {"type": "number"},
                                "weights": {"type": "array", "items": {"type": "number", "minimum": 0}},
                                "scores": {"type": "object", "additionalProperties": {"type": "number"}},
                                "selected": {"type": "array", "items": {"type": "string"}},
                                "order": {"type": "array", "items": {"type": "integer"}},
                                "stages": {"type": "array"},
                                "lambda_argmax": {"type": "integer"},
                                "scan": {"type": "array", "items": {"type": ["number", "null"]}},
                                "scan_argmax": {"type": "integer"},
                                "pruned": {"type": "object"},
                            },
                        },
                    },
                },
            },
        },
        "aggregate": {"type": "object", "additionalProperties": {"type": "object", "additionalProperties": _STATS}},
        "n_failed": {"type": "integer", "minimum": 0},
        "seconds": {"type": "number"},
    },
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    task: str = "feature-select"
    kernel: str | None = None
    n_qubits: int = 8
    depth: int = 3
    dataset: str | None = None
    parity_subset: list[int] = field(default_factory=lambda: [1, 2])
    feature_indices: list[int] | None = None
    n_train: int = 80
    n_test: int = 80
    seed_data: list[int] = field(default_factory=lambda: list(range(5)))
    seed_params: list[int] = field(default_factory=lambda: list(range(5)))
    seed_mode: str = "grid"
    encoding: str = "rz"
    rotation: str = "ry"
    threshold: float = 0.1
    reorder_rounds: int = 3
    scramble_depth: int = 1
    training: dict = field(default_factory=dict)
    out: str = "runs/lcfs"
    threads: int = 1

    def __post_init__(self):
        if self.dataset is None:
            self.dataset = "quantum" if self.task == "qdata" else "parity"
        if self.kernel is None:
            self.kernel = "pqk" if self.task in ("qdata", "kta-scan") else "qfk"
        self.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _schema_check(d, CONFIG_SCHEMA, "config")
        return cls(**d)

    def validate(self):
        _schema_check(self.to_dict(), CONFIG_SCHEMA, "config")
        if self.dataset == "quantum":
            if self.task not in ("qdata", "kta-scan"):
                raise ConfigError(f"task: {self.task!r} needs a classical dataset")
            if self.kernel != "pqk":
                raise ConfigError("kernel: quantum-data runs use the projected kernel only")
            if self.n_qubits % 2:
                raise ConfigError("n_qubits: quantum data needs an even qubit count")
        elif self.task == "qdata":
            raise ConfigError("dataset: qdata runs on the quantum dataset")
        if self.task == "kta-scan" and self.kernel != "pqk":
            raise ConfigError("kernel: kta-scan uses the projected kernel")
        if self.dataset == "parity" and max(self.parity_subset) > self.n_qubits:
            raise ConfigError("parity_subset: labels must lie in 1..n_qubits")
        if self.dataset == "breast-cancer":
            n = len(self.feature_indices) if self.feature_indices is not None else 12
            if n != self.n_qubits:
                raise ConfigError(f"feature_indices: {n} features for {self.n_qubits} qubits")
        try:
            self.kta_config()
        except ValueError as exc:
            raise ConfigError(f"training: {exc}") from None

    def kta_config(self) -> KtaConfig:
        return KtaConfig(**self.training)

    def cells(self) -> list[tuple[int, int]]:
        if self.seed_mode == "zip":
            if len(self.seed_data) != len(self.seed_params):
                raise ConfigError("seed_params: zip mode needs as many parameter seeds as data seeds")
            return list(zip(self.seed_data, self.seed_params))
        return [(d, p) for d in self.seed_data for p in self.seed_params]


def _schema_check(d: dict, schema: dict, what: str):
    try:
        jsonschema.validate(d, schema)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{what} field {where}: {exc.message}") from None


def read_config(path: str | Path) -> dict:
    """Raw mapping from a TOML (``.toml``) or JSON config file."""
    path = Path(path)
    text = path.read_text()
    try:
        return tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(read_config(path))


# --------------------------------------------------------------------------
# Per-cell work
# --------------------------------------------------------------------------


def _datasets(cfg: ExperimentConfig, seed: int):
    rng = np.random.default_rng(seed)
    if cfg.dataset == "parity":
        tr = gen_parity(cfg.n_qubits, cfg.parity_subset, cfg.n_train, rng, "train", seed)
        te = gen_parity(cfg.n_qubits, cfg.parity_subset, cfg.n_test, rng, "test", seed)
    elif cfg.dataset == "breast-cancer":
        tr, te = load_breast_cancer(feature_indices=cfg.feature_indices, rng=rng, n_train=cfg.n_train, n_test=cfg.n_test, seed=seed)
    else:
        tr = gen_quantum_dataset(cfg.n_qubits, cfg.n_train, rng, scramble_depth=cfg.scramble_depth, split="train", seed=seed)
        te = gen_quantum_dataset(cfg.n_qubits, cfg.n_test, rng, theta_star=tr.theta_star, scramble=tr.scramble, split="test", seed=seed)
    return tr, te


def _inputs(ds):
    if hasattr(ds, "states"):
        return None, ds.states
    return ds.X, None


def _labels(ds) -> list[str]:
    names = getattr(ds, "feature_names", None)
    return [f"x{i + 1}" for i in range(ds.X.shape[1])] if names is None or names[0].startswith("x") else list(names)


def _train(cfg, circuit, tr, te, rng):
    k = make_kernel(cfg.kernel, circuit)
    x, st = _inputs(tr)
    xt, stt = _inputs(te)
    m = alternate_train(k, tr.y, x, st, config=cfg.kta_config(), rng=rng, test=(te.y, xt, stt))
    m.circuit = circuit.to_dict()
    return k, m


def _arm(cfg, k, m, tr) -> dict:
    arm = {"kta_train": m.kta_train, "kta_test": m.kta_test, "weights": [float(w) for w in m.weights]}
    arm["lambda_argmax"] = int(np.argmax(m.weights))
    if k.circuit.has_features:
        rep = importance_scores(m.weights, k.cones(), k.circuit.n_features, cfg.threshold)
        rep.labels = _labels(tr)
        d = rep.to_dict()
        arm["scores"] = d["scores"]
        arm["selected"] = d["selected"]
    return arm


def _classical_circuit(cfg, order=None):
    return build_brick_reuploading(cfg.n_qubits, cfg.depth, feature_order=order, encoding=cfg.encoding, rotation=cfg.rotation)


def run_cell(cfg: ExperimentConfig, seed_data: int, seed_params: int) -> dict:
    """One grid cell; returns the report entry plus the trained models."""
    tr, te = _datasets(cfg, seed_data)
    arms: dict[str, dict] = {}
    models: dict[str, dict] = {}
    if cfg.task in ("feature-select", "prune"):
        c = _classical_circuit(cfg)
        k, m = _train(cfg, c, tr, te, seed_params)
        arms["main"] = _arm(cfg, k, m, tr)
        models["main"] = m.to_dict()
        if cfg.task == "prune":
            pm = prune_model(m, c)
            p_train, p_test = pm.kta(tr.X, tr.y), pm.kta(te.X, te.y)
            arms["main"]["pruned"] = {
                "term": pm.term,
                "n_qubits": pm.circuit.n_qubits,
                "n_gates": len(pm.circuit.gates),
                "kta_train": p_train,
                "kta_test": p_test,
                "delta_train": p_train - m.kta_train,
                "delta_test": p_test - m.kta_test,
            }
            models["pruned"] = pm.to_dict()
    elif cfg.task == "reorder":
        for name, sort in (("unsorted", False), ("sorted", True)):
            order = list(range(cfg.n_qubits))
            stages = []
            for stage in range(cfg.reorder_rounds):
                k, m = _train(cfg, _classical_circuit(cfg, order), tr, te, [seed_params, stage])
                arm = _arm(cfg, k, m, tr)
                arm["order"] = order
                stages.append(arm)
                models[f"{name}_stage{stage}"] = m.to_dict()
                if sort:
                    # scores are indexed by feature, so the new order is absolute
                    order = reorder_features(importance_scores(m.weights, k.cones(), cfg.n_qubits))
            final = dict(stages[-1])
            final["stages"] = stages
            arms[name] = final
    else:
        c = build_alternating_layered(cfg.n_qubits, cfg.depth) if cfg.dataset == "quantum" else _classical_circuit(cfg)
        k, m = _train(cfg, c, tr, te, seed_params)
        arm = _arm(cfg, k, m, tr)
        x, st = _inputs(tr)
        scan = single_term_kta_scan(k, m.theta, tr.y, x, st)
        arm["scan"] = [None if np.isnan(v) else float(v) for v in scan]
        arm["scan_argmax"] = int(np.nanargmax(scan))
        if cfg.dataset == "quantum":
            arm["key_qubit"] = tr.key_qubit
        arms["main"] = arm
        models["main"] = m.to_dict()
    return {"seed_data": seed_data, "seed_params": seed_params, "status": "ok", "arms": arms}, models


def _safe_cell(args):
    cfg, sd, sp = args
    try:
        return run_cell(cfg, sd, sp)
    except Exception as exc:
        log.error("cell (%d, %d) failed: %s", sd, sp, exc)
        return {
            "seed_data": sd,
            "seed_params": sp,
            "status": "error",
            "error": f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=5)}",
            "arms": {},
        }, {}


# --------------------------------------------------------------------------
# Aggregation and output
# --------------------------------------------------------------------------


def _stats(values: Sequence[float]) -> dict:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return {"n": 0, "mean": None, "median": None, "std": None, "min": None, "max": None}
    return {
        "n": int(v.size),
        "mean": float(v.mean()),
        "median": float(np.median(v)),
        "std": float(v.std()),
        "min": float(v.min()),
        "max": float(v.max()),
    }


SCALARS = ("kta_train", "kta_test", "lambda_argmax", "scan_argmax")
PRUNED = ("kta_train", "kta_test", "delta_train", "delta_test")


def aggregate(cells: list[dict]) -> dict:
    """Mean, median and spread of every per-arm scalar over the successful cells."""
    ok = [c for c in cells if c["status"] == "ok"]
    arms = sorted({a for c in ok for a in c["arms"]})
    out = {}
    for a in arms:
        entries = [c["arms"][a] for c in ok if a in c["arms"]]
        stats = {k: _stats([e[k] for e in entries]) for k in SCALARS if any(k in e for e in entries)}
        for k in PRUNED:
            if any("pruned" in e for e in entries):
                stats[f"pruned_{k}"] = _stats([e["pruned"][k] for e in entries if "pruned" in e])
        names = [n for e in entries for n in e.get("scores", {})]
        for n in dict.fromkeys(names):
            stats[f"score_{n}"] = _stats([e["scores"].get(n) for e in entries if "scores" in e])
        out[a] = stats
    return out


def median_selected(report: dict, arm: str = "main") -> list[str]:
    """Features whose median score across cells exceeds the configured threshold."""
    th = report["config"]["threshold"]
    agg = report["aggregate"].get(arm, {})
    return [k[len("score_") :] for k, s in agg.items() if k.startswith("score_") and s["median"] is not None and s["median"] > th]


def _g(v) -> str:
    return "" if v is None else f"{v:.17g}"


def write_outputs(report: dict, models: dict, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=1))
    with open(out / "kta.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed_data", "seed_params", "arm", "kta_train", "kta_test", "pruned_kta_train", "pruned_kta_test"])
        for c in report["cells"]:
            for a, e in c["arms"].items():
                p = e.get("pruned", {})
                w.writerow([c["seed_data"], c["seed_params"], a, _g(e["kta_train"]), _g(e["kta_test"]), _g(p.get("kta_train")), _g(p.get("kta_test"))])
    with open(out / "importance.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed_data", "seed_params", "arm", "feature", "score"])
        for c in report["cells"]:
            for a, e in c["arms"].items():
                for n, s in e.get("scores", {}).items():
                    w.writerow([c["seed_data"], c["seed_params"], a, n, _g(s)])
    with open(out / "lambda.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed_data", "seed_params", "arm", "term", "lambda"])
        for c in report["cells"]:
            for a, e in c["arms"].items():
                for t, lam in enumerate(e["weights"]):
                    w.writerow([c["seed_data"], c["seed_params"], a, t, _g(lam)])
    mdir = out / "models"
    mdir.mkdir(exist_ok=True)
    for (sd, sp), ms in models.items():
        for name, m in ms.items():
            (mdir / f"model_d{sd}_p{sp}_{name}.json").write_text(json.dumps(m))


def run(cfg: ExperimentConfig, out: str | Path | None = None) -> dict:
    """Execute the configured task over the seed grid and write the report files."""
    start = time.perf_counter()
    cells = cfg.cells()
    jobs = [(cfg, sd, sp) for sd, sp in cells]
    if cfg.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(_safe_cell, jobs))
    else:
        results = [_safe_cell(j) for j in jobs]
    entries = [r[0] for r in results]
    report = {
        "config": cfg.to_dict(),
        "cells": entries,
        "aggregate": aggregate(entries),
        "n_failed": sum(e["status"] != "ok" for e in entries),
        "seconds": time.perf_counter() - start,
    }
    jsonschema.validate(report, REPORT_SCHEMA)
    write_outputs(report, {c: r[1] for c, r in zip(cells, results)}, Path(out or cfg.out))
    return report


def compare_reorder(cfg: ExperimentConfig, out: str | Path | None = None) -> dict:
    """Both arms of the re-ordering comparison on matched seeds."""
    d = cfg.to_dict()
    d["task"] = "reorder"
    return run(ExperimentConfig(**d), out)


# --------------------------------------------------------------------------
# Command line
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lcfs", description="Light-cone feature selection experiments.")
    p.add_argument("--config", type=Path, help="TOML or JSON experiment config")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--kernel", choices=KERNELS)
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--n-qubits", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--seed-data", type=int, nargs="+")
    p.add_argument("--seed-params", type=int, nargs="+")
    p.add_argument("--out", type=str)
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        d = read_config(args.config) if args.config else {}
        for name in ("task", "kernel", "dataset", "n_qubits", "depth", "seed_data", "seed_params", "out", "threads"):
            v = getattr(args, name)
            if v is not None:
                d[name] = v
        cfg = ExperimentConfig.from_dict(d)
        cfg.cells()
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run(cfg)
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for arm, stats in report["aggregate"].items():
        tr, te = stats["kta_train"], stats["kta_test"]
        print(f"{arm}: kta_train mean {tr['mean']:.17g} median {tr['median']:.17g}; kta_test mean {te['mean']:.17g} median {te['median']:.17g}")
    print(f"wrote {cfg.out}")
    return EXIT_RUNTIME if report["n_failed"] else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
