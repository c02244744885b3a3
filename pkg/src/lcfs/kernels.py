"""Local quantum kernels built from per-datum feature caches.

Two kernel families decompose into one term per light cone:

* projected kernels (``"pqk"``): term ``l`` is ``Tr[rho_i^(l) rho_j^(l)]`` over the
  one-qubit reduced state of output qubit ``l``;
* simplified Fisher kernels (``"qfk"``): term ``l`` is
  ``Re <chi_l(x_i) | chi_l(x_j)>`` with ``chi_l = V_l^dag P_l V_l |0...0>``,
  where ``V_l`` is the circuit prefix up to and including the gate driven by
  trainable angle ``l`` and ``P_l`` that gate's Pauli generator. This is half
  the anticommutator expectation ``Tr[rho_0 {B_i, B_j}]`` so the diagonal is 1.

Fisher terms are evaluated on their pruned light-cone subcircuits; terms whose
pruned tapes share a shape are simulated together in one stacked batch.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .sim import (
    Binding,
    Circuit,
    Gate,
    GatePrefix,
    LightCone,
    OutputQubit,
    Program,
    apply_1q,
    compiled,
    light_cone,
    prune_to_cone,
    single_qubit_rdms,
)

KINDS = ("pqk", "qfk")


def theta_digest(theta: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()


@dataclass
class FeatureCache:
    """Per-datum kernel features for one ``(circuit, theta)`` pair.

    ``terms`` holds ``rho`` with shape ``(N, n, 2, 2)`` for projected kernels,
    or a list with one ``(N, dim_l)`` array of ``chi_l`` states per Fisher
    term (``None`` for terms that were not requested). Fisher states live on
    the pruned cone register and carry a global phase of ``-i``, which cancels
    in every Gram entry.
    """

    kind: str
    theta: np.ndarray
    terms: object
    n_points: int
    derivatives: object = None

    @property
    def n_terms(self) -> int:
        return self.terms.shape[1] if self.kind == "pqk" else len(self.terms)


@dataclass
class GramTensor:
    """``T`` symmetric ``N x N`` Gram slices, one per local kernel term."""

    terms: np.ndarray
    kind: str
    theta_digest: str = ""
    labels: np.ndarray | None = None

    @property
    def n_terms(self) -> int:
        return self.terms.shape[0]

    @property
    def n_points(self) -> int:
        return self.terms.shape[1]

    def weighted(self, weights: np.ndarray) -> np.ndarray:
        return weighted_gram(self, weights)

    # --- export ---------------------------------------------------------

    def to_csv(self, directory: str | Path, prefix: str = "gram") -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for l, K in enumerate(self.terms):
            p = directory / f"{prefix}_{l:03d}.csv"
            np.savetxt(p, K, delimiter=",", fmt="%.17g")
            paths.append(p)
        return paths

    def to_binary(self, path: str | Path) -> Path:
        """Write little-endian float64 slices plus a JSON sidecar ``<path>.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(self.terms, dtype="<f8").tofile(path)
        meta = {
            "shape": list(self.terms.shape),
            "dtype": "<f8",
            "order": "C",
            "kernel": self.kind,
            "theta_sha256": self.theta_digest,
        }
        if self.labels is not None:
            meta["labels"] = [int(v) for v in self.labels]
        path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def from_binary(cls, path: str | Path) -> "GramTensor":
        path = Path(path)
        meta = json.loads(path.with_name(path.name + ".json").read_text())
        terms = np.fromfile(path, dtype="<f8").reshape(meta["shape"])
        labels = np.asarray(meta["labels"]) if "labels" in meta else None
        return cls(terms, meta["kernel"], meta.get("theta_sha256", ""), labels)


def weighted_gram(gram: GramTensor | np.ndarray, weights: np.ndarray) -> np.ndarray:
    terms = gram.terms if isinstance(gram, GramTensor) else np.asarray(gram)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (terms.shape[0],):
        raise ValueError(f"{weights.shape[0] if weights.ndim else 0} weights for {terms.shape[0]} terms")
    return np.tensordot(weights, terms, axes=1)


def _theta_of_slot(circuit: Circuit) -> np.ndarray:
    """Trainable index driving each rotation slot, or -1."""
    out = []
    for i in circuit.rotation_positions:
        b = circuit.gates[i].binding
        out.append(b.index if b.kind == "trainable" else -1)
    return np.asarray(out, dtype=int)


def _scatter_theta(n_params: int, theta_idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    grad = np.zeros(n_params)
    mask = theta_idx >= 0
    np.add.at(grad, theta_idx[mask], values[mask])
    return grad


def _inputs(circuit: Circuit, x, states):
    if x is None and states is None:
        raise ValueError("need classical inputs x or input states")
    if states is not None:
        states = np.atleast_2d(np.asarray(states))
        if states.shape[1] != 1 << circuit.n_qubits:
            raise ValueError("input states do not match the circuit register")
        if x is not None and np.shape(x)[0] != states.shape[0]:
            raise ValueError("x and states have different lengths")
    if x is not None:
        x = np.atleast_2d(np.asarray(x, dtype=float))
    if circuit.has_features and x is None:
        raise ValueError("circuit encodes classical features; x is required")
    if not circuit.has_features and x is not None and states is None:
        raise ValueError("circuit has no feature bindings; quantum inputs are required")
    batch = x.shape[0] if x is not None else states.shape[0]
    return x, states, batch


@dataclass
class KernelTape:
    """Forward results kept for one reverse-mode pass."""

    gram: GramTensor
    cache: FeatureCache
    saved: list = field(default_factory=list)
    active: np.ndarray | None = None


class ProjectedKernel:
    """One term per output qubit: overlap of single-qubit reduced states."""

    kind = "pqk"

    def __init__(self, circuit: Circuit):
        self.circuit = circuit
        self.program = compiled(circuit)
        self._theta_of_slot = _theta_of_slot(circuit)

    @property
    def n_terms(self) -> int:
        return self.circuit.n_qubits

    def cones(self) -> list[LightCone]:
        return [light_cone(self.circuit, OutputQubit(q)) for q in range(self.circuit.n_qubits)]

    def _states(self, theta, x, states, keep=False):
        x, states, batch = _inputs(self.circuit, x, states)
        angles = self.circuit.angle_matrix(x, theta, batch=batch)
        res = self.program.forward(angles, states, keep=keep)
        return (angles,) + (res if keep else (res,))

    def features(self, theta, x=None, states=None) -> FeatureCache:
        _, psi = self._states(theta, x, states)
        rho = single_qubit_rdms(psi, self.circuit.n_qubits)
        return FeatureCache("pqk", np.array(theta, dtype=float), rho, psi.shape[0])

    def gram(self, cache: FeatureCache, other: FeatureCache | None = None) -> GramTensor:
        return pqk_gram(cache, other)

    def forward(self, theta, x=None, states=None, active=None) -> KernelTape:
        angles, psi, kept = self._states(theta, x, states, keep=True)
        rho = single_qubit_rdms(psi, self.circuit.n_qubits)
        cache = FeatureCache("pqk", np.array(theta, dtype=float), rho, psi.shape[0])
        return KernelTape(self.gram(cache), cache, [angles, kept], active)

    def vjp(self, tape: KernelTape, cot: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. theta of ``sum_l sum_ij cot[l,i,j] K_l[i,j]``."""
        angles, kept = tape.saved
        rho = tape.cache.terms
        psi = kept[-1]
        n = self.circuit.n_qubits
        sym = cot + np.swapaxes(cot, 1, 2)
        phi = np.zeros_like(psi)
        for l in range(n):
            if not np.any(sym[l]):
                continue
            A = (sym[l] @ rho[:, l].reshape(-1, 4)).reshape(-1, 2, 2)
            if not np.iscomplexobj(psi):
                A = A.real
            phi = phi + apply_1q(psi, n, l, A)
        g = self.program.backward(angles, kept, phi)
        return _scatter_theta(self.circuit.n_params, self._theta_of_slot, g.sum(axis=0))


@dataclass
class _FisherGroup:
    program: Program
    terms: list[int]
    src: np.ndarray
    sign: np.ndarray
    theta_idx: np.ndarray
    pi_cols: np.ndarray


class FisherKernel:
    """One term per trainable angle: conjugated generator states on the gate's prefix cone.

    With ``prune=False`` every term is simulated on the full register, which
    is slower but independent of the light-cone machinery.
    """

    kind = "qfk"

    def __init__(self, circuit: Circuit, prune: bool = True):
        if circuit.n_params == 0:
            raise ValueError("Fisher kernels need at least one trainable gate")
        self.circuit = circuit
        self.prune = prune
        self.positions = circuit.trainable_positions()
        self._cones = [light_cone(circuit, GatePrefix(p)) for p in self.positions]
        slot_of_pos = {p: s for s, p in enumerate(circuit.rotation_positions)}
        theta_of_slot = _theta_of_slot(circuit)
        by_shape: dict = {}
        self._term_group: list[tuple[int, int]] = [None] * circuit.n_params
        self.term_dims: list[int] = [0] * circuit.n_params
        for l, pos in enumerate(self.positions):
            if prune:
                pc = prune_to_cone(circuit, self._cones[l])
                local = list(pc.circuit.gates)
                origin = list(pc.gate_map)
                n_local = pc.circuit.n_qubits
            else:
                local = list(circuit.gates[: pos + 1])
                origin = list(range(pos + 1))
                n_local = circuit.n_qubits
            target = local[-1]
            tape = local + [Gate(target.kind, target.qubits, Binding.fixed(np.pi))] + local[::-1]
            src, sign = [], []
            for k, g in enumerate(local):
                if g.is_rotation:
                    src.append(slot_of_pos[origin[k]])
                    sign.append(1.0)
            src.append(-1)
            sign.append(1.0)
            for k in range(len(local) - 1, -1, -1):
                if local[k].is_rotation:
                    src.append(slot_of_pos[origin[k]])
                    sign.append(-1.0)
            key = (n_local, tuple((g.kind, g.qubits) for g in tape))
            entry = by_shape.setdefault(key, {"gates": tape, "terms": [], "src": [], "sign": []})
            self._term_group[l] = (key, len(entry["terms"]))
            entry["terms"].append(l)
            entry["src"].append(src)
            entry["sign"].append(sign)
            self.term_dims[l] = 1 << n_local
        self._groups: dict = {}
        for key, e in by_shape.items():
            src = np.asarray(e["src"], dtype=int)
            tidx = np.where(src >= 0, theta_of_slot[np.maximum(src, 0)], -1)
            self._groups[key] = _FisherGroup(
                Program.compile(key[0], e["gates"]),
                e["terms"],
                src,
                np.asarray(e["sign"]),
                tidx,
                np.flatnonzero(src[0] < 0),
            )
        self._key_order = list(self._groups)

    @property
    def n_terms(self) -> int:
        return self.circuit.n_params

    def cones(self) -> list[LightCone]:
        return list(self._cones)

    def _angles(self, theta, x):
        x, _, batch = _inputs(self.circuit, x, None)
        return self.circuit.angle_matrix(x, theta, batch=batch)

    def _group_angles(self, grp: _FisherGroup, rows: list[int], full: np.ndarray) -> np.ndarray:
        src = grp.src[rows]
        a = full[:, np.maximum(src, 0)] * grp.sign[rows][None]
        a[:, :, grp.pi_cols] = np.pi
        return np.transpose(a, (1, 0, 2)).reshape(len(rows) * full.shape[0], -1)

    def _run(self, theta, x, active, keep):
        full = self._angles(theta, x)
        N = full.shape[0]
        chi: list = [None] * self.n_terms
        saved = []
        for key in self._key_order:
            grp = self._groups[key]
            rows = [r for r, l in enumerate(grp.terms) if active is None or active[l]]
            if not rows:
                continue
            ang = self._group_angles(grp, rows, full)
            res = grp.program.forward(ang, keep=keep)
            out, kept = res if keep else (res, None)
            out = out.reshape(len(rows), N, -1)
            for r, row in enumerate(rows):
                chi[grp.terms[row]] = out[r]
            saved.append((key, rows, ang, kept))
        return chi, saved, N

    def features(self, theta, x=None, states=None, active=None) -> FeatureCache:
        if states is not None:
            raise ValueError("Fisher kernels are defined for classical inputs only")
        chi, _, N = self._run(theta, x, active, keep=False)
        return FeatureCache("qfk", np.array(theta, dtype=float), chi, N)

    def gram(self, cache: FeatureCache, other: FeatureCache | None = None) -> GramTensor:
        return qfk_gram(cache, other)

    def forward(self, theta, x=None, states=None, active=None) -> KernelTape:
        if states is not None:
            raise ValueError("Fisher kernels are defined for classical inputs only")
        chi, saved, N = self._run(theta, x, active, keep=True)
        cache = FeatureCache("qfk", np.array(theta, dtype=float), chi, N)
        return KernelTape(self.gram(cache), cache, saved, active)

    def vjp(self, tape: KernelTape, cot: np.ndarray) -> np.ndarray:
        sym = 0.5 * (cot + np.swapaxes(cot, 1, 2))
        grad = np.zeros(self.n_terms)
        for key, rows, ang, kept in tape.saved:
            grp = self._groups[key]
            N = tape.cache.n_points
            phi = np.stack([sym[grp.terms[r]] @ tape.cache.terms[grp.terms[r]] for r in rows])
            phi = phi.reshape(len(rows) * N, -1)
            g = grp.program.backward(ang, kept, phi).reshape(len(rows), N, -1).sum(axis=1)
            grad += _scatter_theta(self.n_terms, grp.theta_idx[rows], g * grp.sign[rows])
        return grad

    def derivative_states(self, theta, x) -> list[np.ndarray]:
        """``d chi_l / d theta_k`` for every term, shape ``(n_params, N, dim_l)`` each.

        The generator is inserted at each occurrence of ``theta_k`` on the
        term's tape: once in the prefix and once in its inverse.
        """
        full = self._angles(theta, x)
        N = full.shape[0]
        out = []
        for l in range(self.n_terms):
            key, r = self._term_group[l]
            grp = self._groups[key]
            ang = self._group_angles(grp, [r], full)
            d = np.zeros((self.n_terms, N, self.term_dims[l]), dtype=complex)
            for j, k in enumerate(grp.theta_idx[r]):
                if k >= 0:
                    d[k] += grp.sign[r, j] * grp.program.forward_inserted(ang, j)
            out.append(d)
        return out


def make_kernel(kind: str, circuit: Circuit):
    if kind == "pqk":
        return ProjectedKernel(circuit)
    if kind == "qfk":
        return FisherKernel(circuit)
    raise ValueError(f"unknown kernel kind {kind!r}; expected one of {KINDS}")


# --------------------------------------------------------------------------
# Functional interface
# --------------------------------------------------------------------------


def pqk_features(circuit: Circuit, x, theta, states=None) -> FeatureCache:
    return ProjectedKernel(circuit).features(theta, x=x, states=states)


def pqk_gram(cache: FeatureCache, other: FeatureCache | None = None) -> GramTensor:
    """``K_l[i, j] = Tr[rho_i^(l) rho_j^(l)]``; ``other`` gives a cross Gram."""
    if cache.kind != "pqk" or (other is not None and other.kind != "pqk"):
        raise ValueError("projected Gram needs pqk feature caches")
    a = cache.terms
    b = a if other is None else other.terms
    fa = np.swapaxes(a.reshape(a.shape[0], a.shape[1], 4), 0, 1)
    fb = np.swapaxes(b.reshape(b.shape[0], b.shape[1], 4), 0, 1)
    terms = np.real(fa @ np.conj(np.swapaxes(fb, 1, 2)))
    return GramTensor(terms, "pqk", theta_digest(cache.theta))


def qfk_features(circuit: Circuit, x, theta, prune: bool = True) -> FeatureCache:
    return FisherKernel(circuit, prune=prune).features(theta, x=x)


def qfk_gram(cache: FeatureCache, other: FeatureCache | None = None) -> GramTensor:
    """``K_l[i, j] = Re <chi_l(x_i)|chi_l(x_j)>``; terms missing from the cache stay zero."""
    if cache.kind != "qfk" or (other is not None and other.kind != "qfk"):
        raise ValueError("Fisher Gram needs qfk feature caches")
    b_terms = cache.terms if other is None else other.terms
    N, M = cache.n_points, (cache.n_points if other is None else other.n_points)
    terms = np.zeros((len(cache.terms), N, M))
    for l, (a, b) in enumerate(zip(cache.terms, b_terms)):
        if a is not None and b is not None:
            terms[l] = np.real(a @ np.conj(b).T)
    return GramTensor(terms, "qfk", theta_digest(cache.theta))


def fidelity_gram(circuit: Circuit, x, theta, states=None) -> np.ndarray:
    """Global fidelity kernel ``|<psi_i|psi_j>|^2`` (baseline, not trained)."""
    x, states, batch = _inputs(circuit, x, states)
    psi = compiled(circuit).forward(circuit.angle_matrix(x, theta, batch=batch), states)
    return np.abs(psi @ np.conj(psi).T) ** 2


def pqk_shift_derivatives(circuit: Circuit, x, theta, states=None) -> np.ndarray:
    """Parameter-shift derivatives of all one-qubit reduced states.

    Returns ``(n_params, N, n, 2, 2)`` with
    ``d rho / d theta_k = (rho(theta_k + pi/2) - rho(theta_k - pi/2)) / 2``
    summed over the gates driven by ``theta_k``.
    """
    x, states, batch = _inputs(circuit, x, states)
    prog = compiled(circuit)
    base = circuit.angle_matrix(x, theta, batch=batch)
    n = circuit.n_qubits
    out = np.zeros((circuit.n_params, batch, n, 2, 2), dtype=complex)
    for slot, k in enumerate(_theta_of_slot(circuit)):
        if k < 0:
            continue
        plus, minus = base.copy(), base.copy()
        plus[:, slot] += np.pi / 2
        minus[:, slot] -= np.pi / 2
        rp = single_qubit_rdms(prog.forward(plus, states), n)
        rm = single_qubit_rdms(prog.forward(minus, states), n)
        out[k] += 0.5 * (rp - rm)
    return out
