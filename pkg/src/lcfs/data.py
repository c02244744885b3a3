"""Datasets: parity tasks, the Wisconsin breast-cancer table and synthetic quantum data."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .sim import Circuit, apply, build_alternating_layered, haar_random_product_state, save_states

log = logging.getLogger(__name__)

WDBC_ROWS = 569
WDBC_FEATURES = 30


@dataclass
class ClassicalDataset:
    X: np.ndarray
    y: np.ndarray
    split: str = "train"
    seed: int | None = None
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X must be (N, d) with one label per row")
        if not np.all(np.abs(self.y) == 1):
            raise ValueError("labels must be +1/-1")

    def __len__(self):
        return self.y.size

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def to_dict(self) -> dict:
        return {
            "X": self.X.tolist(),
            "y": self.y.tolist(),
            "split": self.split,
            "seed": self.seed,
            "feature_names": self.feature_names,
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text: str) -> "ClassicalDataset":
        return cls(**json.loads(text))


@dataclass
class QuantumDataset:
    """Scrambled product states labeled by one hidden qubit's Bloch-z sign.

    ``hidden`` keeps the single-qubit factors ``(N, n, 2)`` of the unscrambled
    inputs so labels can be audited.
    """

    states: np.ndarray
    y: np.ndarray
    hidden: np.ndarray
    theta_star: np.ndarray
    scramble: Circuit
    key_qubit: int
    split: str = "train"
    seed: int | None = None

    def __len__(self):
        return self.y.size

    @property
    def n_qubits(self) -> int:
        return self.scramble.n_qubits

    def recompute_labels(self) -> np.ndarray:
        return _bloch_z_sign(self.hidden[:, self.key_qubit])

    def export(self, path: str | Path) -> Path:
        meta = {
            "labels": self.y.tolist(),
            "key_qubit": self.key_qubit,
            "theta_star": [float(t) for t in self.theta_star],
            "scramble": self.scramble.to_dict(),
            "split": self.split,
            "seed": self.seed,
        }
        return save_states(path, self.states, meta)


def _bloch_z_sign(factors: np.ndarray) -> np.ndarray:
    z = np.abs(factors[:, 0]) ** 2 - np.abs(factors[:, 1]) ** 2
    if np.any(z == 0):
        log.warning("%d hidden states with <Z> = 0 labeled +1", int(np.sum(z == 0)))
    return np.where(z >= 0, 1, -1)


# --------------------------------------------------------------------------
# Parity
# --------------------------------------------------------------------------


def parity_labels(X: np.ndarray, subset: Sequence[int]) -> np.ndarray:
    """Product of the coordinates in ``subset`` (1-based feature labels)."""
    idx = [int(i) - 1 for i in subset]
    return np.prod(np.asarray(X)[:, idx], axis=1).astype(int)


def gen_parity(d: int, subset: Sequence[int], N: int, rng, split: str = "train", seed: int | None = None) -> ClassicalDataset:
    """Uniform inputs in ``{-1, 1}^d`` labeled by the parity of ``subset`` (1-based)."""
    subset = list(subset)
    if not subset:
        raise ValueError("parity subset must be non-empty")
    if len(set(subset)) != len(subset) or min(subset) < 1 or max(subset) > d:
        raise ValueError(f"parity subset {subset} must hold distinct labels in 1..{d}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    X = rng.choice(np.array([-1.0, 1.0]), size=(N, d))
    return ClassicalDataset(X, parity_labels(X, subset), split, seed, [f"x{i + 1}" for i in range(d)])


# --------------------------------------------------------------------------
# Breast cancer
# --------------------------------------------------------------------------


def wdbc_path() -> Path:
    return Path(str(resources.files("lcfs") / "data_files" / "wdbc.csv"))


def read_wdbc(path: str | Path | None = None) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Parse the diagnostic table: 30 numeric columns plus an ``M``/``B`` diagnosis column.

    Returns ``(X, y, names)`` with malignant mapped to ``+1``.
    """
    path = wdbc_path() if path is None else Path(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if len(header) != WDBC_FEATURES + 1:
        raise ValueError(f"{path}: expected {WDBC_FEATURES + 1} columns, found {len(header)}")
    diag_col = next((i for i, h in enumerate(header) if h.strip().lower() == "diagnosis"), len(header) - 1)
    names = [h for i, h in enumerate(header) if i != diag_col]
    X = np.empty((len(body), WDBC_FEATURES))
    y = np.empty(len(body), dtype=int)
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{r}: expected {len(header)} cells, found {len(row)}")
        label = row[diag_col].strip().upper()
        if label not in ("M", "B"):
            raise ValueError(f"{path}:{r}: diagnosis must be M or B, got {row[diag_col]!r}")
        y[r - 2] = 1 if label == "M" else -1
        try:
            X[r - 2] = [float(v) for i, v in enumerate(row) if i != diag_col]
        except ValueError as exc:
            raise ValueError(f"{path}:{r}: non-numeric cell ({exc})") from None
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{path}: non-finite values")
    return X, y, names


def load_breast_cancer(
    csv_path: str | Path | None = None,
    feature_indices: Sequence[int] | None = None,
    rng=None,
    n_train: int = 80,
    n_test: int = 80,
    seed: int | None = None,
) -> tuple[ClassicalDataset, ClassicalDataset]:
    """Standardized breast-cancer features split into disjoint train and test draws.

    ``feature_indices`` are 0-based columns of the table (default: the first
    12). Standardization uses the statistics of all rows.
    """
    X, y, names = read_wdbc(csv_path)
    idx = list(range(12)) if feature_indices is None else [int(i) for i in feature_indices]
    if len(set(idx)) != len(idx):
        raise ValueError("feature indices must be distinct")
    if min(idx) < 0 or max(idx) >= X.shape[1]:
        raise ValueError(f"feature indices must lie in 0..{X.shape[1] - 1}")
    if n_train + n_test > X.shape[0]:
        raise ValueError("not enough rows for the requested split sizes")
    X = X[:, idx]
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    perm = rng.permutation(X.shape[0])
    tr, te = perm[:n_train], perm[n_train : n_train + n_test]
    sel = [names[i] for i in idx]
    return (
        ClassicalDataset(X[tr], y[tr], "train", seed, sel),
        ClassicalDataset(X[te], y[te], "test", seed, sel),
    )


def histogram_l1_delta(a: np.ndarray, b: np.ndarray, bins: int = 100) -> float:
    """L1 distance between normalized histograms of two samples on their common range."""
    a = np.ravel(np.asarray(a, dtype=float))
    b = np.ravel(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be non-empty")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        return 0.0
    ha, _ = np.histogram(a, bins=bins, range=(lo, hi))
    hb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    return float(np.abs(ha / a.size - hb / b.size).sum())


# --------------------------------------------------------------------------
# Quantum data
# --------------------------------------------------------------------------


def gen_quantum_dataset(
    n: int,
    N: int,
    rng,
    theta_star: np.ndarray | None = None,
    scramble: Circuit | None = None,
    scramble_depth: int = 1,
    split: str = "train",
    seed: int | None = None,
) -> QuantumDataset:
    """Random product states, labeled by qubit ``n/2`` (0-based), then scrambled.

    The scramble defaults to an alternating layered circuit of
    ``scramble_depth`` layers; missing angles are drawn uniformly from
    ``[-pi, pi]`` with ``rng`` before any state is sampled.
    """
    if n % 2:
        raise ValueError("quantum data needs an even qubit count")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    scramble = build_alternating_layered(n, scramble_depth) if scramble is None else scramble
    if scramble.has_features:
        raise ValueError("scramble circuit must not encode classical features")
    if theta_star is None:
        theta_star = rng.uniform(-np.pi, np.pi, scramble.n_params)
    theta_star = np.asarray(theta_star, dtype=float)
    m = n // 2
    plain = []
    hidden = np.empty((N, n, 2), dtype=complex)
    for i in range(N):
        psi, factors = haar_random_product_state(n, rng, return_factors=True)
        plain.append(psi)
        hidden[i] = factors
    y = _bloch_z_sign(hidden[:, m])
    states = apply(scramble, None, theta_star, np.stack(plain))
    return QuantumDataset(states, y, hidden, theta_star, scramble, m, split, seed)
