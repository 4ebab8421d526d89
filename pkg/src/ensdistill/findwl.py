"""Weak-learner search.

Trains candidate students by minibatch SGD on a distillation loss plus a
log-barrier penalty that softly enforces the weak-learning condition, with
random restarts.  The barrier's finite region is |f - g| < 2B, pushing each
residual entry to the side the current weight state prefers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, ShapeError, log_softmax, softmax
from .game import CHECK_DEGENERATE, CHECK_PASS, WeightState, weak_learning_check
from .nets import ConnectionSpec, LearnerParams, forward, backward, init_params

LOSS_MODES = ("ce_temperature", "squared_error")

# clamp residuals at this fraction of the barrier edge to keep logs finite
_CLAMP_MARGIN = 1e-6


@dataclass
class SgdConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 60
    batch_size: int = 64
    lr_drops: tuple = (0.3, 0.6, 0.9)  # epoch fractions
    lr_factor: float = 0.2

    def validate(self) -> None:
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("bad sgd config: lr/momentum/weight_decay out of range")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad sgd config: epochs/batch_size out of range")
        if any(not 0.0 < f < 1.0 for f in self.lr_drops):
            raise ValueError("lr_drops must be epoch fractions in (0, 1)")


def default_student_recipe() -> SgdConfig:
    """Training recipe for candidate students.

    Gentler than the teacher's: a large step size under the barrier's steep
    near-wall gradient can kick logits past the wall and run away, so the
    default keeps the product lr * wall-gradient small.
    """
    return SgdConfig(lr=0.005, momentum=0.9, weight_decay=5e-4, epochs=60,
                     batch_size=64, lr_drops=(0.3, 0.6, 0.9), lr_factor=0.2)


@dataclass
class FindWlConfig:
    barrier_gamma: float = 0.2
    logit_bound_b: float | None = None  # None: derived as 1.5 * max|teacher logit|
    temperature: float = 2.0
    max_search: int = 4
    loss_mode: str = "squared_error"
    sgd: SgdConfig = field(default_factory=default_student_recipe)

    def validate(self) -> None:
        if self.barrier_gamma <= 0:
            raise ValueError("barrier_gamma must be > 0")
        if self.logit_bound_b is not None and self.logit_bound_b <= 0:
            raise ValueError("logit_bound_b must be > 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.max_search < 1:
            raise ValueError("max_search must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        self.sgd.validate()


def iplus_mask(state: WeightState) -> np.ndarray:
    """Boolean matrix I[k+(i,j) > k-(i,j)], fixed for one round's search."""
    return state.kplus > state.kminus


def _clamp(l: np.ndarray, b: float) -> tuple[np.ndarray, int]:
    limit = 2.0 * b * (1.0 - _CLAMP_MARGIN)
    count = int(np.count_nonzero(np.abs(l) >= limit))
    return np.clip(l, -limit, limit), count


def barrier_loss(l: np.ndarray, mask: np.ndarray, b: float,
                 barrier_gamma: float) -> tuple[float, int]:
    """Log-barrier penalty and the number of residuals clamped to its edge.

    Negative per-entry contributions reward residuals already on the preferred
    side; the +inf wall at |l| = 2B is kept finite by the clamp.
    """
    if b <= 0:
        raise ValueError("logit bound B must be > 0")
    if barrier_gamma <= 0:
        raise ValueError("barrier_gamma must be > 0")
    if l.shape != mask.shape:
        raise ShapeError(f"barrier_loss: shape {l.shape} vs mask {mask.shape}")
    lc, count = _clamp(np.asarray(l, dtype=np.float64), b)
    scaled = lc / (2.0 * b)
    terms = np.where(mask, np.log1p(scaled), np.log1p(-scaled))
    return -float(terms.sum()) / barrier_gamma, count


def barrier_grad(l: np.ndarray, mask: np.ndarray, b: float,
                 barrier_gamma: float) -> np.ndarray:
    """d(barrier)/dl; clamped entries get the boundary gradient."""
    if b <= 0:
        raise ValueError("logit bound B must be > 0")
    if barrier_gamma <= 0:
        raise ValueError("barrier_gamma must be > 0")
    lc, _ = _clamp(np.asarray(l, dtype=np.float64), b)
    grad = np.where(mask, 1.0 / (2.0 * b + lc), -1.0 / (2.0 * b - lc))
    return -grad / barrier_gamma


def distill_loss(f_logits: np.ndarray, g_logits: np.ndarray, mode: str,
                 temperature: float = 2.0) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the student logits.

    ce_temperature: temperature-softened cross-entropy against the teacher's
    soft targets, averaged over rows and rescaled by tau^2 so gradient
    magnitudes stay comparable across temperatures.
    squared_error: 0.5 * ||f - g||^2 / n_rows, the game's own loss.
    """
    f = np.asarray(f_logits, dtype=np.float64)
    g = np.asarray(g_logits, dtype=np.float64)
    if f.shape != g.shape:
        raise ShapeError(f"distill_loss: shape {f.shape} vs {g.shape}")
    n = f.shape[0]
    if mode == "squared_error":
        diff = f - g
        return 0.5 * float((diff * diff).sum()) / n, diff / n
    if mode == "ce_temperature":
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        tau = temperature
        targets = softmax(g / tau)
        logq = log_softmax(f / tau)
        loss = -(tau * tau) * float((targets * logq).sum()) / n
        grad = (tau / n) * (softmax(f / tau) - targets)
        return loss, grad
    raise ValueError(f"unknown loss_mode {mode!r}")


def default_logit_bound(g_logits: np.ndarray) -> float:
    """B = 1.5 * max|teacher logit|, floored away from zero."""
    return 1.5 * max(float(np.max(np.abs(g_logits))), 1e-6)


def lr_at_epoch(epoch: int, cfg: SgdConfig) -> float:
    drops = sum(1 for frac in cfg.lr_drops if epoch >= math.floor(frac * cfg.epochs))
    return cfg.lr * cfg.lr_factor ** drops


def sgd_epoch(params: LearnerParams, x: np.ndarray, loss_fn, cfg: SgdConfig,
              rng: RngStream, lr: float | None = None, velocity=None, cache=None):
    """One shuffled pass of minibatch SGD with momentum and weight decay.

    `loss_fn(logits, row_indices) -> (loss, dloss/dlogits)` sees each
    minibatch; `velocity` carries momentum across epochs (created on first
    use).  Returns (params, velocity, rng); params are updated in place.
    """
    cache = cache or {}
    if lr is None:
        lr = cfg.lr
    if velocity is None:
        velocity = ([np.zeros_like(w) for w in params.weights],
                    [np.zeros_like(b) for b in params.biases])
    vel_w, vel_b = velocity
    perm, rng = rng.permutation(x.shape[0])
    for start in range(0, x.shape[0], cfg.batch_size):
        idx = perm[start:start + cfg.batch_size]
        bx = x[idx]
        bcache = {key: val[idx] for key, val in cache.items()}
        logits, _ = forward(params, bx, bcache)
        _, dlogits = loss_fn(logits, idx)
        dW, db = backward(params, bx, dlogits, bcache)
        for li in range(len(params.weights)):
            step_w = dW[li] + cfg.weight_decay * params.weights[li]
            vel_w[li] = cfg.momentum * vel_w[li] + step_w
            params.weights[li] -= lr * vel_w[li]
            step_b = db[li] + cfg.weight_decay * params.biases[li]
            vel_b[li] = cfg.momentum * vel_b[li] + step_b
            params.biases[li] -= lr * vel_b[li]
    return params, (vel_w, vel_b), rng


def total_loss_fn(g_logits: np.ndarray, mask: np.ndarray, cfg: FindWlConfig, b: float):
    """Training objective: distillation loss plus the barrier, batch-local."""
    def fn(logits: np.ndarray, idx: np.ndarray):
        dl_val, dl_grad = distill_loss(logits, g_logits[idx], cfg.loss_mode, cfg.temperature)
        resid = logits - g_logits[idx]
        b_val, _ = barrier_loss(resid, mask[idx], b, cfg.barrier_gamma)
        b_grad = barrier_grad(resid, mask[idx], b, cfg.barrier_gamma)
        return dl_val + b_val, dl_grad + b_grad
    return fn


@dataclass
class FindResult:
    """Outcome of one weak-learner search."""

    params: LearnerParams | None
    verdict: str          # "pass", "degenerate", or "none"
    train_loss: float
    clamp_count: int
    restart_index: int


def _train_candidate(spec, connection, x, cache, loss_fn, sgd_cfg, rng):
    params = init_params(spec, rng.split(0), connection)
    sgd_rng = rng.split(1)
    velocity = None
    for epoch in range(sgd_cfg.epochs):
        params, velocity, sgd_rng = sgd_epoch(
            params, x, loss_fn, sgd_cfg, sgd_rng,
            lr=lr_at_epoch(epoch, sgd_cfg), velocity=velocity, cache=cache)
    return params


def find_weak_learner(state: WeightState, spec, connection: ConnectionSpec,
                      x: np.ndarray, g_logits: np.ndarray, cfg: FindWlConfig,
                      rng: RngStream, cache=None, edge_tol: float = 0.0) -> FindResult:
    """Search one class for a weak learner via restarts.

    Restarts use independent rng splits; the first restart whose trained
    candidate passes the weak-learning check wins, making the outcome
    independent of any execution order.  When the state is degenerate the
    check cannot pass, so the lowest-total-loss candidate is returned instead.
    A result with params=None means every restart failed.
    """
    cfg.validate()
    cache = cache or {}
    b = cfg.logit_bound_b if cfg.logit_bound_b is not None else default_logit_bound(g_logits)
    degenerate = np.array_equal(state.kplus, state.kminus)
    mask = iplus_mask(state)
    if degenerate:
        # equal paired weights give the barrier no direction to push, so the
        # candidate trains (and competes) on the distillation loss alone
        def loss_fn(logits, idx):
            return distill_loss(logits, g_logits[idx], cfg.loss_mode, cfg.temperature)
    else:
        loss_fn = total_loss_fn(g_logits, mask, cfg, b)
    best = None
    best_key = None
    for restart in range(cfg.max_search):
        try:
            # divergence inside a candidate is routine (the barrier's wall
            # gradient can run away); it costs the restart, nothing more
            with np.errstate(over="ignore", invalid="ignore"):
                params = _train_candidate(spec, connection, x, cache, loss_fn,
                                          cfg.sgd, rng.split(restart))
                logits, _ = forward(params, x, cache)
        except FloatingPointError:
            continue
        resid = logits - g_logits
        dl_val, _ = distill_loss(logits, g_logits, cfg.loss_mode, cfg.temperature)
        b_val, clamps = barrier_loss(resid, mask, b, cfg.barrier_gamma)
        total = dl_val if degenerate else dl_val + b_val
        verdict = weak_learning_check(state, resid, edge_tol)
        if verdict == CHECK_PASS:
            return FindResult(params, CHECK_PASS, total, clamps, restart)
        if best is None or total < best_key:
            best = FindResult(params, verdict, total, clamps, restart)
            best_key = total
    if best is not None and best.verdict == CHECK_DEGENERATE:
        return best
    return FindResult(None, "none", best.train_loss if best else float("nan"),
                      best.clamp_count if best else 0, -1)
