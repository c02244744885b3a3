import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lcfs.sim import Binding, Circuit, Gate  # noqa: E402


def random_circuit(rng, n, n_gates, n_features=0, kinds=("rx", "ry", "rz", "cz", "cnot")):
    """Random gate list; trainable angles are numbered in order of appearance."""
    gates = []
    n_params = 0
    for _ in range(n_gates):
        kind = kinds[rng.integers(len(kinds))] if n > 1 else kinds[rng.integers(3)]
        if kind in ("cz", "cnot"):
            a, b = rng.choice(n, size=2, replace=False)
            gates.append(Gate(kind, (int(a), int(b))))
            continue
        q = int(rng.integers(n))
        r = rng.random()
        if n_features and r < 0.35:
            binding = Binding.feature(int(rng.integers(n_features)))
        elif r < 0.85:
            binding = Binding.trainable(n_params)
            n_params += 1
        else:
            binding = Binding.fixed(float(rng.uniform(-np.pi, np.pi)))
        gates.append(Gate(kind, (q,), binding))
    return Circuit(n, tuple(gates), n_features=n_features)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
