"""Distribution player of the distillation game.

Keeps the paired per-(sample, label) weight matrices, computes signed-residual
edges, runs the exponential-weight (entropy mirror descent) update with
per-label normalization, and provides the closed-form replay and weak-oracle
diagnostics used to verify the convergence accounting.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ShapeError, check_finite

CHECK_PASS = "pass"
CHECK_FAIL = "fail"
CHECK_DEGENERATE = "degenerate"

# exp() overflows float64 just above 709; stay clear of it
EXP_ARG_LIMIT = 700.0


@dataclass(frozen=True)
class WeightState:
    """Paired nonnegative matrices over samples x labels.

    For every label j the combined mass sums to one:
    sum_i kplus(i,j) + kminus(i,j) == 1.
    """

    kplus: np.ndarray
    kminus: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.kplus.shape[0]

    @property
    def n_labels(self) -> int:
        return self.kplus.shape[1]

    def validate(self, tol: float = 1e-9) -> None:
        for name, k in (("kplus", self.kplus), ("kminus", self.kminus)):
            check_finite(name, k)
            if k.min() < -tol or k.max() > 1.0 + tol:
                raise ValueError(f"{name} entries outside [0, 1]")
        sums = self.kplus.sum(axis=0) + self.kminus.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > tol:
            raise ValueError(f"per-label mass not 1: column sums {sums}")


@dataclass(frozen=True)
class EdgeRecord:
    """Per-round log row: the edge and normalizer per label."""

    round_index: int
    edge_gamma: np.ndarray  # length L
    z: np.ndarray           # length L, all > 0


def init_uniform(n_samples: int, n_labels: int) -> WeightState:
    """Every entry of both matrices starts at 1/(2N)."""
    if n_samples < 1 or n_labels < 1:
        raise ValueError("need at least one sample and one label")
    k = np.full((n_samples, n_labels), 1.0 / (2.0 * n_samples))
    return WeightState(kplus=k, kminus=k.copy())


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {a.shape} vs {b.shape}")


def residual(f_logits: np.ndarray, g_logits: np.ndarray) -> np.ndarray:
    """Elementwise f - g, the quantity the game weights respond to."""
    f = np.asarray(f_logits, dtype=np.float64)
    g = np.asarray(g_logits, dtype=np.float64)
    _check_same_shape(f, g, "residual")
    return f - g


def edge(state: WeightState, l: np.ndarray) -> np.ndarray:
    """Per-label signed correlation gamma(j) = sum_i (k+ - k-)(i,j) * l(i,j)."""
    _check_same_shape(state.kplus, l, "edge")
    return ((state.kplus - state.kminus) * l).sum(axis=0)


def weak_learning_check(state: WeightState, l: np.ndarray, edge_tol: float = 0.0) -> str:
    """Three-way verdict on a candidate's residuals.

    `degenerate` when kplus == kminus exactly (the initial state): every
    candidate then has gamma identically zero and strict positivity is
    unsatisfiable, so the caller must fall back to its loss-minimizing
    candidate.  Otherwise `pass` iff gamma(j) > edge_tol for every label;
    gamma exactly at the tolerance counts as fail.
    """
    if np.array_equal(state.kplus, state.kminus):
        return CHECK_DEGENERATE
    gamma = edge(state, l)
    return CHECK_PASS if np.all(gamma > edge_tol) else CHECK_FAIL


def md_update(state: WeightState, l: np.ndarray, eta: float,
              round_index: int = -1) -> tuple[WeightState, EdgeRecord]:
    """One exponential-weight step: k+ *= exp(-eta*l), k- *= exp(+eta*l),
    then renormalize each label column to total mass one.

    The edge is recorded against the pre-update state, the normalizer against
    the post-update masses, matching the quantities in the convergence proof.
    """
    if eta <= 0.0:
        raise ValueError("eta must be > 0")
    _check_same_shape(state.kplus, l, "md_update")
    scaled = eta * np.asarray(l, dtype=np.float64)
    if np.max(np.abs(scaled)) > EXP_ARG_LIMIT:
        raise FloatingPointError(
            f"eta*|l| exceeds {EXP_ARG_LIMIT:.0f}; bound the logits before updating")
    gamma = edge(state, l)
    up = state.kplus * np.exp(-scaled)
    dn = state.kminus * np.exp(scaled)
    z = up.sum(axis=0) + dn.sum(axis=0)
    new_state = WeightState(kplus=up / z, kminus=dn / z)
    new_state.validate()
    return new_state, EdgeRecord(round_index=round_index, edge_gamma=gamma, z=z)


def recompute_from_history(initial_state: WeightState, residual_history: list,
                           eta_history: list) -> WeightState:
    """Closed-form weights after a whole run.

    The iterated update telescopes: the final state depends only on the
    initial masses and the eta-weighted cumulative residual, with one joint
    normalization standing in for the product of per-round normalizers.
    Computed in log space so long histories cannot overflow.
    """
    if len(residual_history) != len(eta_history):
        raise ValueError("residual and eta histories differ in length")
    s = np.zeros_like(initial_state.kplus)
    for l, eta in zip(residual_history, eta_history):
        _check_same_shape(initial_state.kplus, np.asarray(l), "recompute_from_history")
        s = s + float(eta) * np.asarray(l, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_up = np.log(initial_state.kplus) - s
        log_dn = np.log(initial_state.kminus) + s
    shift = np.maximum(log_up.max(axis=0), log_dn.max(axis=0))
    up = np.exp(log_up - shift)
    dn = np.exp(log_dn - shift)
    z = up.sum(axis=0) + dn.sum(axis=0)
    final = WeightState(kplus=up / z, kminus=dn / z)
    final.validate()
    return final


def normalizer_inequality_ok(edge_gamma: np.ndarray, z: np.ndarray, eta: float,
                             g_inf: float, slack: float = 1e-12) -> bool:
    """Per-round sanity from the proof: log z(j) <= -eta*gamma(j) + eta^2*G^2,
    valid whenever eta*G <= 1."""
    bound = -eta * np.asarray(edge_gamma) + (eta * g_inf) ** 2
    return bool(np.all(np.log(np.asarray(z)) <= bound + slack))


def functional_gradient(p: np.ndarray, f_logits: np.ndarray,
                        g_logits: np.ndarray) -> np.ndarray:
    """Per-label weighted mean residual under a column-stochastic weighting."""
    p = np.asarray(p, dtype=np.float64)
    r = residual(f_logits, g_logits)
    _check_same_shape(p, r, "functional_gradient")
    col_sums = p.sum(axis=0)
    if np.max(np.abs(col_sums - 1.0)) > 1e-9:
        raise ValueError(f"weighting columns must sum to 1, got {col_sums}")
    return (p * r).sum(axis=0)


def gwl_check(u: np.ndarray, grad: np.ndarray, alpha: float, beta: float) -> bool:
    """Generalized weak-oracle inequality: <u, grad> >= alpha*|u|*|grad| - beta."""
    u = np.asarray(u, dtype=np.float64).ravel()
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if u.shape != grad.shape:
        raise ShapeError(f"gwl_check: length {u.shape[0]} vs {grad.shape[0]}")
    return bool(u @ grad >= alpha * np.linalg.norm(u) * np.linalg.norm(grad) - beta)
