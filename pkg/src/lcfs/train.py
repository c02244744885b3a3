"""Kernel-target alignment training of weighted local kernels.

Training alternates two steps until the alignment settles:

1. Adam ascent on the circuit angles with the term weights fixed;
2. a non-negative quadratic program for the weights with the angles fixed,
   ``v* = argmin_{v >= 0} v^T M v - 2 v^T a`` with ``M_ij = <K_i, K_j>_F`` and
   ``a_i = y^T K_i y``, normalized to ``lambda = v* / |v*|_1``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import FisherKernel, GramTensor, ProjectedKernel, pqk_shift_derivatives, weighted_gram

log = logging.getLogger(__name__)


@dataclass
class KtaConfig:
    learning_rate: float = 0.01
    iterations: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_rounds: int = 10
    tolerance: float = 1e-4

    def __post_init__(self):
        for name in ("learning_rate", "beta1", "beta2", "eps", "tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise ValueError("Adam moment constants must be < 1")
        if self.iterations < 1 or self.max_rounds < 1:
            raise ValueError("iterations and max_rounds must be >= 1")


# --------------------------------------------------------------------------
# Alignment
# --------------------------------------------------------------------------


def _check_labels(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or not np.all(np.abs(y) == 1):
        raise ValueError("labels must be a vector of +1/-1")
    if np.all(y == y[0]):
        raise ValueError("labels are all identical; alignment target is degenerate")
    return y


def kta(K: np.ndarray, y: np.ndarray) -> float:
    """Kernel-target alignment ``y^T K y / (||K||_F * N)``."""
    y = _check_labels(y)
    K = np.asarray(K, dtype=float)
    norm = np.linalg.norm(K)
    if norm == 0:
        raise ValueError("kernel matrix has zero Frobenius norm")
    return float(y @ K @ y / (norm * y.size))


def kta_and_gradient(K: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Alignment and its gradient with respect to every entry of ``K``."""
    y = _check_labels(y)
    norm = np.linalg.norm(K)
    if norm == 0:
        raise ValueError("kernel matrix has zero Frobenius norm")
    N = y.size
    value = float(y @ K @ y / (norm * N))
    grad = np.outer(y, y) / (norm * N) - value * K / norm**2
    return value, grad


# --------------------------------------------------------------------------
# Angle gradients
# --------------------------------------------------------------------------


def kta_value_and_grad(kernel, theta, weights, labels, x=None, states=None):
    """Alignment of the weighted kernel and its exact gradient over ``theta`` (reverse mode)."""
    weights = np.asarray(weights, dtype=float)
    tape = kernel.forward(theta, x=x, states=states, active=weights > 0)
    K = weighted_gram(tape.gram, weights)
    value, G = kta_and_gradient(K, labels)
    grad = kernel.vjp(tape, weights[:, None, None] * G[None])
    return value, grad


def _grad_from_features(kernel, theta, weights, labels, x, states):
    cache = kernel.features(theta, x=x, states=states)
    gram = kernel.gram(cache)
    _, G = kta_and_gradient(weighted_gram(gram, weights), labels)
    C = weights[:, None, None] * G[None]
    if isinstance(kernel, ProjectedKernel):
        drho = pqk_shift_derivatives(kernel.circuit, x, theta, states)
        D = np.real(np.einsum("kilab,jlab->klij", drho, np.conj(cache.terms)))
        dK = D + np.swapaxes(D, 2, 3)
        return np.einsum("lij,klij->k", C, dK)
    dchi = kernel.derivative_states(theta, x)
    grad = np.zeros(kernel.n_terms)
    for l, (chi, d) in enumerate(zip(cache.terms, dchi)):
        D = np.real(np.einsum("kia,ja->kij", np.conj(d), chi))
        grad += np.einsum("ij,kij->k", C[l], D + np.swapaxes(D, 1, 2))
    return grad


def grad_theta(kernel, theta, weights, labels, x=None, states=None, method: str = "adjoint") -> np.ndarray:
    """Exact gradient of the weighted-kernel alignment with respect to ``theta``.

    ``method="adjoint"`` back-propagates through each tape with generator
    insertion. ``method="features"`` builds explicit derivative features
    (parameter-shifted reduced states for projected kernels, generator-inserted
    derivative states for Fisher kernels) and applies the product rule.
    """
    weights = np.asarray(weights, dtype=float)
    if not isinstance(kernel, (ProjectedKernel, FisherKernel)):
        raise TypeError(f"unsupported kernel {type(kernel).__name__}")
    if method == "adjoint":
        return kta_value_and_grad(kernel, theta, weights, labels, x, states)[1]
    if method == "features":
        return _grad_from_features(kernel, theta, weights, labels, x, states)
    raise ValueError(f"unknown gradient method {method!r}")


class Adam:
    """Bias-corrected Adam taking ascent steps."""

    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --------------------------------------------------------------------------
# Weight step
# --------------------------------------------------------------------------


def nnqp_active_set(M: np.ndarray, a: np.ndarray, max_iter: int | None = None) -> np.ndarray:
    """Minimize ``v^T M v - 2 a^T v`` over ``v >= 0`` for symmetric PSD ``M``.

    Lawson-Hanson active-set iteration on the normal equations: this is the
    non-negative least-squares problem ``min ||A v - b||`` with ``M = A^T A``
    and ``a = A^T b``, worked directly in ``(M, a)``.
    """
    M = np.asarray(M, dtype=float)
    a = np.asarray(a, dtype=float)
    T = a.size
    if M.shape != (T, T):
        raise ValueError("M must be square and match a")
    scale = max(np.max(np.abs(np.diag(M))), np.max(np.abs(a)), np.finfo(float).tiny)
    M = M / scale
    a = a / scale
    tol = 10 * np.finfo(float).eps * T * max(1.0, np.linalg.norm(M, 1))
    max_iter = 3 * T + 10 if max_iter is None else max_iter
    passive = np.zeros(T, dtype=bool)
    v = np.zeros(T)
    w = a.copy()

    def solve(mask):
        s = np.zeros(T)
        sub = M[np.ix_(mask, mask)]
        try:
            s[mask] = np.linalg.solve(sub, a[mask])
        except np.linalg.LinAlgError:
            s[mask] = np.linalg.lstsq(sub, a[mask], rcond=None)[0]
        return s

    for _ in range(max_iter):
        free = ~passive
        if not free.any() or np.max(np.where(free, w, -np.inf)) <= tol:
            break
        passive[np.argmax(np.where(free, w, -np.inf))] = True
        s = solve(passive)
        inner = 0
        while np.any(s[passive] <= 0) and inner < T:
            inner += 1
            bad = passive & (s <= 0)
            alpha = np.min(v[bad] / (v[bad] - s[bad]))
            v = v + alpha * (s - v)
            passive &= v > tol
            v[~passive] = 0.0
            s = solve(passive)
        v = s
        w = a - M @ v
    return np.maximum(v, 0.0)


def nnqp_problem(gram: GramTensor | np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    terms = gram.terms if isinstance(gram, GramTensor) else np.asarray(gram)
    y = np.asarray(labels, dtype=float)
    flat = terms.reshape(terms.shape[0], -1)
    M = flat @ flat.T
    a = np.einsum("lij,i,j->l", terms, y, y)
    return 0.5 * (M + M.T), a


@dataclass
class LambdaSolution:
    weights: np.ndarray
    v: np.ndarray
    degenerate: bool = False


def solve_lambda(gram: GramTensor | np.ndarray, labels: np.ndarray, previous: np.ndarray | None = None) -> LambdaSolution:
    """Alignment-maximizing simplex weights for fixed Gram slices.

    When no slice is positively aligned the QP optimum is ``v = 0``; the
    previous weights (uniform if none) are returned and the step is flagged
    degenerate.
    """
    M, a = nnqp_problem(gram, labels)
    T = a.size
    v = nnqp_active_set(M, a) if np.any(a > 0) else np.zeros(T)
    total = v.sum()
    if total <= 0:
        prev = np.full(T, 1.0 / T) if previous is None else np.asarray(previous, dtype=float)
        return LambdaSolution(prev.copy(), v, degenerate=True)
    return LambdaSolution(v / total, v)


# --------------------------------------------------------------------------
# Alternating loop
# --------------------------------------------------------------------------


@dataclass
class TrainedModel:
    kind: str
    theta: np.ndarray
    weights: np.ndarray
    kta_train: float
    kta_test: float | None = None
    history: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    theta_init: np.ndarray | None = None
    degenerate_rounds: int = 0
    monotonicity_violations: int = 0
    seconds: float = 0.0
    circuit: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta"] = [float(t) for t in self.theta]
        d["weights"] = [float(w) for w in self.weights]
        d["theta_init"] = None if self.theta_init is None else [float(t) for t in self.theta_init]
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        d = dict(d)
        d["theta"] = np.asarray(d["theta"], dtype=float)
        d["weights"] = np.asarray(d["weights"], dtype=float)
        if d.get("theta_init") is not None:
            d["theta_init"] = np.asarray(d["theta_init"], dtype=float)
        return cls(**d)


def evaluate_kta(kernel, theta, weights, labels, x=None, states=None) -> float:
    gram = kernel.gram(kernel.features(theta, x=x, states=states))
    return kta(weighted_gram(gram, weights), labels)


def alternate_train(
    kernel,
    labels: np.ndarray,
    x: np.ndarray | None = None,
    states: np.ndarray | None = None,
    config: KtaConfig | None = None,
    rng: np.random.Generator | int | None = None,
    theta0: np.ndarray | None = None,
    test: tuple | None = None,
    max_rounds: int | None = None,
) -> TrainedModel:
    """Alternate Adam on the angles and the QP on the weights.

    Angles start uniform in ``[-pi, pi]`` (from ``rng``) unless ``theta0`` is
    given; weights start uniform. Rounds stop once the post-QP alignment moves
    by less than ``config.tolerance`` or after ``max_rounds`` (default
    ``config.max_rounds``). The best post-QP iterate is returned. ``test`` is
    an optional ``(labels, x, states)`` triple scored with the returned model.
    """
    config = config or KtaConfig()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    rounds = config.max_rounds if max_rounds is None else max_rounds
    labels = _check_labels(labels)
    n_params, T = kernel.circuit.n_params, kernel.n_terms
    theta = rng.uniform(-np.pi, np.pi, n_params) if theta0 is None else np.array(theta0, dtype=float)
    theta_init = theta.copy()
    weights = np.full(T, 1.0 / T)
    start = time.perf_counter()
    prev = evaluate_kta(kernel, theta, weights, labels, x, states)
    history = []
    best = None
    degenerate = violations = 0
    for r in range(rounds):
        adam = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
        for _ in range(config.iterations):
            _, g = kta_value_and_grad(kernel, theta, weights, labels, x, states)
            theta = adam.step(theta, g)
        gram = kernel.gram(kernel.features(theta, x=x, states=states))
        before = kta(weighted_gram(gram, weights), labels)
        sol = solve_lambda(gram, labels, previous=weights)
        after = kta(weighted_gram(gram, sol.weights), labels)
        if sol.degenerate:
            degenerate += 1
            log.warning("round %d: weight QP degenerate (no positively aligned term); weights kept", r)
        if after < before - 1e-9:
            violations += 1
            log.warning("round %d: weight step lowered alignment %.6f -> %.6f", r, before, after)
        weights = sol.weights
        history.append(
            {
                "round": r,
                "kta_theta_step": before,
                "kta_lambda_step": after,
                "degenerate": sol.degenerate,
                "active_terms": int(np.count_nonzero(weights)),
            }
        )
        log.debug("round %d: kta %.6f -> %.6f", r, before, after)
        if best is None or after > best[0]:
            best = (after, theta.copy(), weights.copy())
        if abs(after - prev) < config.tolerance:
            break
        prev = after
    kta_train, theta_best, weights_best = best
    kta_test = None
    if test is not None:
        y_t, x_t, s_t = test
        kta_test = evaluate_kta(kernel, theta_best, weights_best, y_t, x_t, s_t)
    return TrainedModel(
        kind=kernel.kind,
        theta=theta_best,
        weights=weights_best,
        kta_train=kta_train,
        kta_test=kta_test,
        history=history,
        config=asdict(config),
        theta_init=theta_init,
        degenerate_rounds=degenerate,
        monotonicity_violations=violations,
        seconds=time.perf_counter() - start,
        circuit=kernel.circuit.to_dict(),
    )
