"""Turning trained light-cone weights into feature scores, encodings and compressed models."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .kernels import FisherKernel, ProjectedKernel, make_kernel
from .sim import Circuit, GatePrefix, LightCone, OutputQubit, PrunedCircuit, light_cone, prune_to_cone
from .train import TrainedModel, kta


@dataclass
class ImportanceReport:
    """Normalized feature scores with the cone/feature counts behind them.

    ``weight_counts[l, mu]`` is how often feature ``mu`` is encoded inside
    the light cone of term ``l``.
    """

    scores: np.ndarray
    weight_counts: np.ndarray
    weights: np.ndarray
    threshold: float = 0.1
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.labels:
            self.labels = [f"x{i + 1}" for i in range(len(self.scores))]

    @property
    def n_features(self) -> int:
        return len(self.scores)

    def selected(self, threshold: float | None = None) -> list[int]:
        return select_features(self, self.threshold if threshold is None else threshold)

    def to_dict(self) -> dict:
        return {
            "scores": {lab: float(s) for lab, s in zip(self.labels, self.scores)},
            "weight_counts": np.asarray(self.weight_counts, dtype=int).tolist(),
            "weights": [float(w) for w in self.weights],
            "threshold": self.threshold,
            "selected": [self.labels[i] for i in self.selected()],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["feature", "score"])
            for lab, s in zip(self.labels, self.scores):
                w.writerow([lab, f"{s:.17g}"])
        return path


def cone_counts(cones: Sequence[LightCone], n_features: int) -> np.ndarray:
    W = np.zeros((len(cones), n_features), dtype=int)
    for l, cone in enumerate(cones):
        for mu, c in cone.feature_counts.items():
            W[l, mu] = c
    return W


def importance_scores(weights: np.ndarray, cones: Sequence[LightCone], n_features: int, threshold: float = 0.1) -> ImportanceReport:
    """``P(mu)`` proportional to ``sum_l w_l(mu) lambda_l``, normalized over features."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(cones),):
        raise ValueError(f"{weights.size} weights for {len(cones)} cones")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    W = cone_counts(cones, n_features)
    raw = weights @ W
    total = raw.sum()
    if total <= 0:
        raise ValueError("no feature appears in any weighted light cone")
    return ImportanceReport(raw / total, W, weights, threshold)


def select_features(report: ImportanceReport, threshold: float = 0.1) -> list[int]:
    """0-based indices of features scoring strictly above ``threshold``."""
    return [int(i) for i in np.flatnonzero(np.asarray(report.scores) > threshold)]


def reorder_features(report: ImportanceReport) -> list[int]:
    """Encoding order putting the best feature on qubit 0; ties keep ascending index."""
    return [int(i) for i in np.argsort(-np.asarray(report.scores), kind="stable")]


# --------------------------------------------------------------------------
# Pruning
# --------------------------------------------------------------------------


@dataclass
class PrunedModel:
    """Single surviving kernel term on its light-cone subcircuit."""

    kind: str
    term: int
    pruned: PrunedCircuit
    theta: np.ndarray
    local_term: int

    @property
    def circuit(self) -> Circuit:
        return self.pruned.circuit

    @property
    def weights(self) -> np.ndarray:
        w = np.zeros(self.kernel().n_terms)
        w[self.local_term] = 1.0
        return w

    def kernel(self):
        return make_kernel(self.kind, self.circuit)

    def gram(self, x: np.ndarray, other: np.ndarray | None = None) -> np.ndarray:
        k = self.kernel()
        active = np.zeros(k.n_terms, dtype=bool)
        active[self.local_term] = True
        if isinstance(k, FisherKernel):
            a = k.features(self.theta, x=x, active=active)
            b = a if other is None else k.features(self.theta, x=other, active=active)
        else:
            a = k.features(self.theta, x=x)
            b = a if other is None else k.features(self.theta, x=other)
        return k.gram(a, b).terms[self.local_term]

    def kta(self, x: np.ndarray, y: np.ndarray) -> float:
        return kta(self.gram(x), y)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "term": self.term,
            "local_term": self.local_term,
            "theta": [float(t) for t in self.theta],
            "pruned": self.pruned.to_dict(),
        }


def prune_model(model: TrainedModel, circuit: Circuit) -> PrunedModel:
    """Keep only the largest-weight term (ties to the smallest index) and its light cone."""
    term = int(np.argmax(model.weights))
    if model.kind == "pqk":
        if not circuit.has_features:
            raise ValueError("pruning is implemented for classical re-uploading circuits")
        cone = light_cone(circuit, OutputQubit(term))
        pc = prune_to_cone(circuit, cone)
        local_term = pc.qubits.index(term)
    elif model.kind == "qfk":
        pos = circuit.trainable_positions()[term]
        pc = prune_to_cone(circuit, light_cone(circuit, GatePrefix(pos)))
        local_term = pc.params.index(term)
    else:
        raise ValueError(f"unknown kernel kind {model.kind!r}")
    return PrunedModel(model.kind, term, pc, pc.local_theta(model.theta), local_term)


# --------------------------------------------------------------------------
# Single-term scans
# --------------------------------------------------------------------------


def single_term_kta_scan(kernel, theta: np.ndarray, labels: np.ndarray, x=None, states=None) -> np.ndarray:
    """Alignment of every one-hot weighting; terms with an all-zero slice score ``nan``."""
    gram = kernel.gram(kernel.features(theta, x=x, states=states))
    out = np.full(gram.n_terms, np.nan)
    for l, K in enumerate(gram.terms):
        if np.linalg.norm(K) > 0:
            out[l] = kta(K, labels)
    return out
