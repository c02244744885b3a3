"""Dense statevector simulation of parameterized circuits.

Qubit 0 is the most significant bit of the computational-basis index, so a
batch of states of shape ``(B, 2**n)`` reshapes to ``(B, 2, ..., 2)`` with the
axis of qubit ``q`` at position ``q + 1``.

Rotations follow ``R_A(phi) = exp(-i phi A / 2)`` for a Pauli ``A``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

ROTATIONS = ("rx", "ry", "rz")
ENTANGLERS = ("cz", "cnot")


# --------------------------------------------------------------------------
# Circuit representation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Binding:
    """Source of a rotation angle: a data feature, a trainable angle or a constant."""

    kind: str
    index: int | None = None
    angle: float | None = None

    def __post_init__(self):
        if self.kind in ("feature", "trainable"):
            if self.index is None or self.index < 0 or self.angle is not None:
                raise ValueError(f"{self.kind} binding needs a non-negative index only")
        elif self.kind == "fixed":
            if self.angle is None or self.index is not None:
                raise ValueError("fixed binding needs an angle only")
        else:
            raise ValueError(f"unknown binding kind {self.kind!r}")

    @classmethod
    def feature(cls, index: int) -> "Binding":
        return cls("feature", int(index))

    @classmethod
    def trainable(cls, index: int) -> "Binding":
        return cls("trainable", int(index))

    @classmethod
    def fixed(cls, angle: float) -> "Binding":
        return cls("fixed", angle=float(angle))

    def to_dict(self) -> dict:
        return {self.kind: self.angle if self.kind == "fixed" else self.index}

    @classmethod
    def from_dict(cls, d: dict) -> "Binding":
        ((kind, value),) = d.items()
        if kind == "fixed":
            return cls.fixed(value)
        return cls(kind, int(value))


@dataclass(frozen=True)
class Gate:
    kind: str
    qubits: tuple[int, ...]
    binding: Binding | None = None

    def __post_init__(self):
        object.__setattr__(self, "qubits", tuple(int(q) for q in self.qubits))
        if self.kind in ROTATIONS:
            if len(self.qubits) != 1 or self.binding is None:
                raise ValueError(f"{self.kind} acts on one qubit and needs a binding")
        elif self.kind in ENTANGLERS:
            if len(self.qubits) != 2 or self.binding is not None:
                raise ValueError(f"{self.kind} acts on two qubits and takes no binding")
            if self.qubits[0] == self.qubits[1]:
                raise ValueError(f"{self.kind} qubits must be distinct")
        else:
            raise ValueError(f"unknown gate kind {self.kind!r}")

    @property
    def is_rotation(self) -> bool:
        return self.kind in ROTATIONS

    @property
    def axis(self) -> str:
        return self.kind[1]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "qubits": list(self.qubits)}
        if self.binding is not None:
            d["binding"] = self.binding.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Gate":
        b = d.get("binding")
        return cls(d["kind"], tuple(d["qubits"]), Binding.from_dict(b) if b else None)


@dataclass(frozen=True)
class Circuit:
    """Ordered gate list over ``n_qubits`` with ``n_features`` classical inputs.

    The number of trainable angles is inferred from the bindings; trainable
    indices must cover ``0..n_params-1`` without gaps.
    """

    n_qubits: int
    gates: tuple[Gate, ...]
    n_features: int = 0
    n_params: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        if self.n_qubits < 1:
            raise ValueError("n_qubits must be positive")
        seen = set()
        for g in self.gates:
            if any(q < 0 or q >= self.n_qubits for q in g.qubits):
                raise ValueError(f"gate {g} acts outside {self.n_qubits} qubits")
            b = g.binding
            if b is None:
                continue
            if b.kind == "feature" and b.index >= self.n_features:
                raise ValueError(f"feature index {b.index} >= n_features={self.n_features}")
            if b.kind == "trainable":
                seen.add(b.index)
        if seen != set(range(len(seen))):
            raise ValueError("trainable indices must be contiguous from 0")
        object.__setattr__(self, "n_params", len(seen))

    # --- bookkeeping ------------------------------------------------------

    @property
    def rotation_positions(self) -> list[int]:
        return [i for i, g in enumerate(self.gates) if g.is_rotation]

    @property
    def has_features(self) -> bool:
        return any(g.binding is not None and g.binding.kind == "feature" for g in self.gates)

    def trainable_positions(self) -> list[int]:
        """Gate position of each trainable angle, indexed by angle index.

        Raises if an angle drives more than one gate.
        """
        pos = [-1] * self.n_params
        for i, g in enumerate(self.gates):
            if g.binding is not None and g.binding.kind == "trainable":
                if pos[g.binding.index] >= 0:
                    raise ValueError(f"trainable angle {g.binding.index} is shared by several gates")
                pos[g.binding.index] = i
        return pos

    def angle_matrix(self, x: np.ndarray | None, theta: np.ndarray, batch: int | None = None) -> np.ndarray:
        """Angles of all rotation gates per batch row, shape ``(B, n_rotations)``."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.n_params},)")
        if x is not None:
            x = np.atleast_2d(np.asarray(x, dtype=float))
            if x.shape[1] != self.n_features:
                raise ValueError(f"x has {x.shape[1]} features, circuit expects {self.n_features}")
            batch = x.shape[0]
        elif self.has_features:
            raise ValueError("circuit encodes features but no x was given")
        batch = 1 if batch is None else batch
        rot = [self.gates[i] for i in self.rotation_positions]
        out = np.empty((batch, len(rot)))
        for j, g in enumerate(rot):
            b = g.binding
            if b.kind == "feature":
                out[:, j] = x[:, b.index]
            elif b.kind == "trainable":
                out[:, j] = theta[b.index]
            else:
                out[:, j] = b.angle
        return out

    # --- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "n_qubits": self.n_qubits,
            "n_features": self.n_features,
            "gates": [g.to_dict() for g in self.gates],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "Circuit":
        return cls(int(d["n_qubits"]), tuple(Gate.from_dict(g) for g in d["gates"]), int(d.get("n_features", 0)))

    @classmethod
    def from_json(cls, text: str) -> "Circuit":
        return cls.from_dict(json.loads(text))


def _brick_pairs(n: int, layer: int) -> list[tuple[int, int]]:
    # layer is 1-based: odd layers pair (0,1)(2,3)..., even layers (1,2)(3,4)...
    start = 0 if layer % 2 == 1 else 1
    return [(q, q + 1) for q in range(start, n - 1, 2)]


def build_brick_reuploading(
    n: int,
    n_layers: int,
    feature_order: Sequence[int] | None = None,
    encoding: str = "ry",
    rotation: str = "ry",
) -> Circuit:
    """Data re-uploading circuit with ``n_layers`` of (encode, rotate, CZ brick).

    Qubit ``q`` encodes feature ``feature_order[q]`` with an ``encoding``
    rotation in every layer. Each layer's trainable block is one ``rotation``
    per qubit followed by CZs on ``(0,1)(2,3)...`` (odd layers) or
    ``(1,2)(3,4)...`` (even layers), with open boundaries. Layer ``l`` owns
    angles ``(l-1)*n .. l*n-1``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    order = list(range(n)) if feature_order is None else [int(f) for f in feature_order]
    if sorted(order) != list(range(n)):
        raise ValueError(f"feature_order must be a permutation of 0..{n - 1} (one feature per qubit)")
    if encoding not in ROTATIONS or rotation not in ROTATIONS:
        raise ValueError(f"rotation kinds must be among {ROTATIONS}")
    gates: list[Gate] = []
    for layer in range(1, n_layers + 1):
        gates += [Gate(encoding, (q,), Binding.feature(order[q])) for q in range(n)]
        gates += [Gate(rotation, (q,), Binding.trainable((layer - 1) * n + q)) for q in range(n)]
        gates += [Gate("cz", p) for p in _brick_pairs(n, layer)]
    return Circuit(n, tuple(gates), n_features=n)


def build_alternating_layered(n: int, n_layers: int) -> Circuit:
    """Trainable-only brick ansatz for quantum inputs: ``RY`` layer then CZ brick, repeated."""
    if n < 2 or n % 2:
        raise ValueError("alternating layered ansatz needs an even number of qubits")
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    gates: list[Gate] = []
    for layer in range(1, n_layers + 1):
        gates += [Gate("ry", (q,), Binding.trainable((layer - 1) * n + q)) for q in range(n)]
        gates += [Gate("cz", p) for p in _brick_pairs(n, layer)]
    return Circuit(n, tuple(gates), n_features=0)


# --------------------------------------------------------------------------
# Compiled programs: forward simulation and reverse-mode derivatives
# --------------------------------------------------------------------------


@dataclass
class _RotLayer:
    # slots[j] lists every angle slot fused into gate j (same axis, same qubit, adjacent)
    qubits: list[int]
    axes: list[str]
    slots: list[list[int]]
    mix: np.ndarray | None = None

    def angles(self, angles: np.ndarray) -> np.ndarray:
        if self.mix is None:
            self.mix = np.zeros((max(max(s) for s in self.slots) + 1, len(self.slots)))
            for j, ss in enumerate(self.slots):
                self.mix[ss, j] = 1.0
        return angles[:, : self.mix.shape[0]] @ self.mix


@dataclass
class _Diag:
    sign: np.ndarray


@dataclass
class _Perm:
    index: np.ndarray


def _cz_sign(n: int, pairs: Iterable[tuple[int, int]]) -> np.ndarray:
    bits = (np.arange(1 << n)[:, None] >> (n - 1 - np.arange(n))[None, :]) & 1
    sign = np.ones(1 << n)
    for a, b in pairs:
        sign[(bits[:, a] & bits[:, b]) == 1] *= -1
    return sign


def _cnot_perm(n: int, control: int, target: int) -> np.ndarray:
    idx = np.arange(1 << n)
    cbit = (idx >> (n - 1 - control)) & 1
    return np.where(cbit == 1, idx ^ (1 << (n - 1 - target)), idx)


@dataclass
class Program:
    """A gate sequence compiled into commuting rotation layers, CZ diagonals and permutations.

    Rotation gates are addressed by *slot*: the column of the angle matrix
    fed to :meth:`forward`.
    """

    n_qubits: int
    steps: list
    n_slots: int
    real: bool

    @classmethod
    def compile(cls, n: int, gates: Sequence[Gate]) -> "Program":
        steps: list = []
        slot = 0
        pending_cz: list[tuple[int, int]] = []

        def flush_cz():
            if pending_cz:
                steps.append(_Diag(_cz_sign(n, pending_cz)))
                pending_cz.clear()

        for g in gates:
            if g.kind == "cz":
                pending_cz.append(g.qubits)
                continue
            flush_cz()
            if g.kind == "cnot":
                steps.append(_Perm(_cnot_perm(n, *g.qubits)))
                continue
            q = g.qubits[0]
            last = steps[-1] if steps else None
            if isinstance(last, _RotLayer) and q in last.qubits and last.axes[last.qubits.index(q)] == g.axis:
                last.slots[last.qubits.index(q)].append(slot)
            elif isinstance(last, _RotLayer) and q not in last.qubits:
                last.qubits.append(q)
                last.axes.append(g.axis)
                last.slots.append([slot])
            else:
                steps.append(_RotLayer([q], [g.axis], [[slot]]))
            slot += 1
        flush_cz()
        real = all(a == "y" for s in steps if isinstance(s, _RotLayer) for a in s.axes)
        return cls(n, steps, slot, real)

    # --- elementary operations -------------------------------------------

    def _rot_mats(self, axis: str, angles: np.ndarray) -> np.ndarray:
        c = np.cos(angles / 2)
        s = np.sin(angles / 2)
        if axis == "y":
            m = np.empty(angles.shape + (2, 2))
            m[..., 0, 0] = c
            m[..., 0, 1] = -s
            m[..., 1, 0] = s
            m[..., 1, 1] = c
        elif axis == "x":
            m = np.empty(angles.shape + (2, 2), dtype=complex)
            m[..., 0, 0] = c
            m[..., 0, 1] = -1j * s
            m[..., 1, 0] = -1j * s
            m[..., 1, 1] = c
        else:
            m = np.zeros(angles.shape + (2, 2), dtype=complex)
            m[..., 0, 0] = np.exp(-0.5j * angles)
            m[..., 1, 1] = np.exp(0.5j * angles)
        return m

    def _apply_layer(self, psi: np.ndarray, layer: _RotLayer, angles: np.ndarray, sign: float) -> np.ndarray:
        n = self.n_qubits
        cols = layer.angles(angles) * sign
        shared = bool(np.all(cols == cols[:1]))
        if shared and len(layer.qubits) >= 3 and n >= 4:
            return _apply_product_shared(psi, n, layer.qubits, [self._rot_mats(a, cols[0, j]) for j, a in enumerate(layer.axes)])
        if not shared and len(layer.qubits) >= 2 and n >= 4:
            mats = np.stack([self._rot_mats(a, cols[:, j]) for j, a in enumerate(layer.axes)], axis=1)
            return _apply_product_rows(psi, n, layer.qubits, mats)
        for j, (q, a) in enumerate(zip(layer.qubits, layer.axes)):
            m = self._rot_mats(a, cols[0, j] if shared else cols[:, j])
            psi = apply_1q(psi, n, q, m)
        return psi

    def _apply_step(self, psi, step, angles, inverse=False):
        if isinstance(step, _RotLayer):
            return self._apply_layer(psi, step, angles, -1.0 if inverse else 1.0)
        if isinstance(step, _Diag):
            return psi * step.sign
        return psi[:, step.index]

    # --- public API --------------------------------------------------------

    def initial_state(self, batch: int) -> np.ndarray:
        psi = np.zeros((batch, 1 << self.n_qubits), dtype=float if self.real else complex)
        psi[:, 0] = 1.0
        return psi

    def forward(self, angles: np.ndarray, psi0: np.ndarray | None = None, keep: bool = False):
        """Run the program on a batch.

        ``angles`` has shape ``(B, n_slots)``. Returns the final states, or
        ``(final, states)`` when ``keep`` is set, where ``states[k]`` is the
        batch entering step ``k`` (``states[-1]`` is the output).
        """
        angles = np.asarray(angles, dtype=float)
        psi = self.initial_state(angles.shape[0]) if psi0 is None else np.asarray(psi0)
        if not self.real and psi.dtype != complex:
            psi = psi.astype(complex)
        states = [psi]
        for step in self.steps:
            psi = self._apply_step(psi, step, angles)
            if keep:
                states.append(psi)
        return (psi, states) if keep else psi

    def backward(self, angles: np.ndarray, states: list, cotangent: np.ndarray) -> np.ndarray:
        """Reverse-mode derivative of a real loss through the program.

        ``cotangent`` is ``phi`` with ``dL = 2 Re <phi | d psi_out>`` per row.
        Returns ``dL/d angle`` with shape ``(B, n_slots)``. Each rotation's
        derivative inserts its generator ``-i A / 2`` after the gate.
        """
        n = self.n_qubits
        grad = np.zeros((angles.shape[0], self.n_slots))
        phi = cotangent
        for k in range(len(self.steps) - 1, -1, -1):
            step = self.steps[k]
            if isinstance(step, _RotLayer):
                psi = states[k + 1]
                for q, a, ss in zip(step.qubits, step.axes, step.slots):
                    g = _generator_overlap(phi, psi, n, q, a)
                    for s in ss:
                        grad[:, s] = g
                phi = self._apply_layer(phi, step, angles, -1.0)
            elif isinstance(step, _Diag):
                phi = phi * step.sign
            else:
                phi = phi[:, step.index]
        return grad

    def forward_inserted(self, angles: np.ndarray, slot: int, psi0: np.ndarray | None = None) -> np.ndarray:
        """``d psi_out / d angle[slot]``: the forward pass with ``-i A / 2`` inserted after that gate."""
        angles = np.asarray(angles, dtype=float)
        psi = self.initial_state(angles.shape[0]) if psi0 is None else np.asarray(psi0)
        psi = psi.astype(complex)
        n = self.n_qubits
        for step in self.steps:
            psi = self._apply_step(psi, step, angles)
            if isinstance(step, _RotLayer) and any(slot in ss for ss in step.slots):
                j = next(j for j, ss in enumerate(step.slots) if slot in ss)
                psi = apply_1q(psi, n, step.qubits[j], -0.5j * PAULI[step.axes[j]])
        return psi


PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]]),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def apply_1q(psi: np.ndarray, n: int, q: int, m: np.ndarray) -> np.ndarray:
    """Apply a 2x2 matrix (shared ``(2,2)`` or per-row ``(B,2,2)``) to qubit ``q``."""
    B = psi.shape[0]
    v = psi.reshape(B, 1 << q, 2, -1)
    a = v[:, :, 0]
    b = v[:, :, 1]
    if m.ndim == 3:
        m = m[:, :, :, None, None]
        m00, m01, m10, m11 = m[:, 0, 0], m[:, 0, 1], m[:, 1, 0], m[:, 1, 1]
    else:
        m00, m01, m10, m11 = m[0, 0], m[0, 1], m[1, 0], m[1, 1]
    out = np.empty(v.shape, dtype=np.result_type(psi.dtype, m.dtype))
    out[:, :, 0] = m00 * a + m01 * b
    out[:, :, 1] = m10 * a + m11 * b
    return out.reshape(psi.shape)


def _kron_half(n_half: int, offset: int, mats: dict[int, np.ndarray]) -> np.ndarray:
    out = np.ones((1, 1))
    eye = np.eye(2)
    for q in range(offset, offset + n_half):
        out = np.kron(out, mats.get(q, eye))
    return out


def _apply_product_shared(psi: np.ndarray, n: int, qubits: list[int], mats: list[np.ndarray]) -> np.ndarray:
    # tensor product of shared single-qubit gates as two dense half-register matmuls
    h = n // 2
    by_q = dict(zip(qubits, mats))
    A = _kron_half(h, 0, by_q)
    Bm = _kron_half(n - h, h, by_q)
    v = psi.reshape(psi.shape[0], 1 << h, 1 << (n - h))
    if not any(q < h for q in qubits):
        out = v @ Bm.T
    elif not any(q >= h for q in qubits):
        out = A @ v
    else:
        out = (A @ v) @ Bm.T
    return out.reshape(psi.shape)


_EYE2 = np.eye(2)


def _kron_half_rows(B: int, n_half: int, offset: int, mats: dict[int, np.ndarray]) -> np.ndarray:
    out = np.ones((B, 1, 1))
    for q in range(offset, offset + n_half):
        m = mats.get(q)
        d = out.shape[1]
        m = _EYE2[None] if m is None else m
        out = (out[:, :, None, :, None] * m[:, None, :, None, :]).reshape(B, 2 * d, 2 * d)
    return out


def _apply_product_rows(psi: np.ndarray, n: int, qubits: list[int], mats: np.ndarray) -> np.ndarray:
    # per-row tensor product of single-qubit gates, mats has shape (B, k, 2, 2)
    h = n // 2
    B = psi.shape[0]
    by_q = {q: mats[:, j] for j, q in enumerate(qubits)}
    v = psi.reshape(B, 1 << h, 1 << (n - h))
    if any(q < h for q in qubits):
        v = _kron_half_rows(B, h, 0, by_q) @ v
    if any(q >= h for q in qubits):
        v = v @ np.swapaxes(_kron_half_rows(B, n - h, h, by_q), 1, 2)
    return v.reshape(psi.shape)


def _generator_overlap(phi: np.ndarray, psi: np.ndarray, n: int, q: int, axis: str) -> np.ndarray:
    """Per row ``2 Re <phi | (-i A/2) psi> = Re <phi | -i A | psi>``."""
    B = psi.shape[0]
    p = phi.reshape(B, 1 << q, 2, -1)
    s = psi.reshape(B, 1 << q, 2, -1)
    p0, p1 = p[:, :, 0], p[:, :, 1]
    s0, s1 = s[:, :, 0], s[:, :, 1]
    if axis == "y":
        val = np.real(np.conj(p1) * s0 - np.conj(p0) * s1) if np.iscomplexobj(p) or np.iscomplexobj(s) else p1 * s0 - p0 * s1
    elif axis == "x":
        val = np.imag(np.conj(p0) * s1 + np.conj(p1) * s0)
    else:
        val = np.imag(np.conj(p0) * s0) - np.imag(np.conj(p1) * s1)
    return val.reshape(B, -1).sum(axis=1)


_PROGRAMS: dict = {}


def compiled(circuit: Circuit) -> Program:
    # circuits are immutable and hashable, so compiled programs are memoized
    prog = _PROGRAMS.get(circuit)
    if prog is None:
        if len(_PROGRAMS) > 256:
            _PROGRAMS.clear()
        prog = _PROGRAMS[circuit] = Program.compile(circuit.n_qubits, circuit.gates)
    return prog


# --------------------------------------------------------------------------
# States
# --------------------------------------------------------------------------


def zero_state(n: int) -> np.ndarray:
    psi = np.zeros(1 << n, dtype=complex)
    psi[0] = 1.0
    return psi


def apply(circuit: Circuit, x: np.ndarray | None, theta: np.ndarray, state: np.ndarray | None = None) -> np.ndarray:
    """Output state(s) of ``circuit`` for features ``x`` and angles ``theta``.

    ``x`` may be a single feature vector or an ``(N, d)`` batch; ``state`` a
    single input state or an ``(N, 2**n)`` batch (default ``|0...0>``). The
    result has a leading batch axis only if one of the inputs had it.
    """
    dim = 1 << circuit.n_qubits
    batched = (x is not None and np.ndim(x) == 2) or (state is not None and np.ndim(state) == 2)
    psi0 = None
    batch = None
    if state is not None:
        psi0 = np.atleast_2d(np.asarray(state, dtype=complex))
        if psi0.shape[1] != dim:
            raise ValueError(f"input state has dimension {psi0.shape[1]}, expected {dim}")
        norms = np.sum(np.abs(psi0) ** 2, axis=1)
        if np.any(np.abs(norms - 1) > 1e-10):
            raise ValueError("input state is not normalized")
        batch = psi0.shape[0]
    angles = circuit.angle_matrix(x, theta, batch=batch)
    if psi0 is not None and angles.shape[0] != psi0.shape[0]:
        if angles.shape[0] == 1:
            angles = np.repeat(angles, psi0.shape[0], axis=0)
        elif psi0.shape[0] == 1:
            psi0 = np.repeat(psi0, angles.shape[0], axis=0)
        else:
            raise ValueError("x and state batch sizes differ")
    out = compiled(circuit).forward(angles, psi0).astype(complex)
    return out if batched else out[0]


def reduced_density(state: np.ndarray, subset: Sequence[int], n: int | None = None) -> np.ndarray:
    """Partial trace of pure state(s) onto ``subset`` (kept in the given order).

    Accepts a single state or a batch and returns ``(2**k, 2**k)`` or
    ``(B, 2**k, 2**k)`` accordingly.
    """
    psi = np.asarray(state)
    single = psi.ndim == 1
    psi = np.atleast_2d(psi)
    if n is None:
        n = int(round(np.log2(psi.shape[1])))
    if (1 << n) != psi.shape[1]:
        raise ValueError("state length is not a power of two")
    subset = [int(q) for q in subset]
    if not subset:
        raise ValueError("subset must be non-empty")
    if len(set(subset)) != len(subset) or any(q < 0 or q >= n for q in subset):
        raise ValueError(f"invalid qubit subset {subset} for {n} qubits")
    rest = [q for q in range(n) if q not in subset]
    B = psi.shape[0]
    t = psi.reshape((B,) + (2,) * n).transpose([0] + [q + 1 for q in subset] + [q + 1 for q in rest])
    t = t.reshape(B, 1 << len(subset), -1)
    rho = np.einsum("bik,bjk->bij", t, np.conj(t))
    return rho[0] if single else rho


def single_qubit_rdms(psi: np.ndarray, n: int) -> np.ndarray:
    """All one-qubit reduced density matrices of a batch, shape ``(B, n, 2, 2)``."""
    B = psi.shape[0]
    out = np.empty((B, n, 2, 2), dtype=complex)
    for q in range(n):
        t = psi.reshape(B, 1 << q, 2, -1).transpose(0, 2, 1, 3).reshape(B, 2, -1)
        out[:, q] = t @ np.conj(np.swapaxes(t, 1, 2))
    return out


def haar_random_product_state(n: int, rng: np.random.Generator, return_factors: bool = False):
    """Tensor product of ``n`` independent single-qubit Haar-random states."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g = rng.normal(size=(n, 2)) + 1j * rng.normal(size=(n, 2))
    factors = g / np.linalg.norm(g, axis=1, keepdims=True)
    psi = np.ones(1, dtype=complex)
    for f in factors:
        psi = np.kron(psi, f)
    return (psi, factors) if return_factors else psi


def save_states(path, states: np.ndarray, meta: dict | None = None) -> Path:
    """Write an ``(N, 2**n)`` batch as little-endian complex128 plus a ``<path>.json`` sidecar."""
    path = Path(path)
    states = np.atleast_2d(np.asarray(states, dtype=complex))
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(states, dtype="<c16").tofile(path)
    side = {"shape": list(states.shape), "dtype": "<c16", "order": "C", "qubit_order": "big-endian"}
    side.update(meta or {})
    path.with_name(path.name + ".json").write_text(json.dumps(side, indent=2))
    return path


def load_states(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    states = np.fromfile(path, dtype=meta["dtype"]).reshape(meta["shape"])
    return states, meta


def purity(rho: np.ndarray) -> float:
    return float(np.real(np.trace(rho @ rho)))


# --------------------------------------------------------------------------
# Light cones
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OutputQubit:
    qubit: int


@dataclass(frozen=True)
class GatePrefix:
    gate: int


Sink = Union[OutputQubit, GatePrefix]


@dataclass(frozen=True)
class LightCone:
    sink: Sink
    gates: tuple[int, ...]
    qubits: tuple[int, ...]
    feature_counts: dict

    def count(self, feature: int) -> int:
        return self.feature_counts.get(feature, 0)


def light_cone(circuit: Circuit, sink: Sink) -> LightCone:
    """Backward light cone of a measured output qubit or of one gate within its prefix."""
    if isinstance(sink, OutputQubit):
        if not 0 <= sink.qubit < circuit.n_qubits:
            raise ValueError(f"sink qubit {sink.qubit} out of range")
        active = {sink.qubit}
        members: list[int] = []
        start = len(circuit.gates) - 1
    elif isinstance(sink, GatePrefix):
        if not 0 <= sink.gate < len(circuit.gates):
            raise ValueError(f"sink gate {sink.gate} out of range")
        active = set(circuit.gates[sink.gate].qubits)
        members = [sink.gate]
        start = sink.gate - 1
    else:
        raise TypeError(f"unsupported sink {sink!r}")
    for i in range(start, -1, -1):
        g = circuit.gates[i]
        if active.intersection(g.qubits):
            members.append(i)
            active.update(g.qubits)
    members.sort()
    counts: dict[int, int] = {}
    for i in members:
        b = circuit.gates[i].binding
        if b is not None and b.kind == "feature":
            counts[b.index] = counts.get(b.index, 0) + 1
    return LightCone(sink, tuple(members), tuple(sorted(active)), counts)


@dataclass(frozen=True)
class PrunedCircuit:
    """A light cone cut out of a larger circuit with rebased qubits and angles.

    ``qubits[k]`` is the original qubit of local qubit ``k``; ``params[k]`` the
    original index of local trainable angle ``k``; ``gate_map[k]`` the
    original position of local gate ``k``. Feature indices are not rebased.
    """

    circuit: Circuit
    qubits: tuple[int, ...]
    params: tuple[int, ...]
    gate_map: tuple[int, ...]
    sink: Sink

    def local_theta(self, theta: np.ndarray) -> np.ndarray:
        return np.asarray(theta, dtype=float)[list(self.params)]

    @property
    def sink_qubits(self) -> tuple[int, ...]:
        """Local indices of the qubits observed at the sink."""
        if isinstance(self.sink, OutputQubit):
            return (self.qubits.index(self.sink.qubit),)
        return self.circuit.gates[-1].qubits

    def to_dict(self) -> dict:
        sink = {"output_qubit": self.sink.qubit} if isinstance(self.sink, OutputQubit) else {"gate_prefix": self.sink.gate}
        return {
            "circuit": self.circuit.to_dict(),
            "qubits": list(self.qubits),
            "params": list(self.params),
            "gate_map": list(self.gate_map),
            "sink": sink,
        }


def prune_to_cone(circuit: Circuit, cone: LightCone) -> PrunedCircuit:
    qubits = tuple(cone.qubits)
    qmap = {q: k for k, q in enumerate(qubits)}
    kept = [b.index for i in cone.gates if (b := circuit.gates[i].binding) is not None and b.kind == "trainable"]
    params = tuple(sorted(set(kept)))
    pmap = {p: k for k, p in enumerate(params)}
    gates = []
    for i in cone.gates:
        g = circuit.gates[i]
        b = g.binding
        if b is not None and b.kind == "trainable":
            b = Binding.trainable(pmap[b.index])
        gates.append(Gate(g.kind, tuple(qmap[q] for q in g.qubits), b))
    pruned = Circuit(len(qubits), tuple(gates), n_features=circuit.n_features)
    return PrunedCircuit(pruned, qubits, params, tuple(cone.gates), cone.sink)
