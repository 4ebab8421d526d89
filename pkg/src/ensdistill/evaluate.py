"""Evaluation protocol at desk scale.

Anytime accuracy/cost curves over ensemble prefixes, the independently-trained
averaging baseline, confidence-threshold early exit, empirical margin
measurement, and the convergence-bound verifier that replays a run's weight
updates from its artifacts and checks the recorded history against them.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import RngStream, softmax
from .distill import Ensemble, ensemble_predict
from .findwl import FindWlConfig, distill_loss, lr_at_epoch, sgd_epoch
from .game import init_uniform, md_update, normalizer_inequality_ok
from .nets import flops, forward, init_params


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


@dataclass(frozen=True)
class CurvePoint:
    prefix_k: int
    cum_flops_fraction: float
    accuracy: float


def member_flops(ens: Ensemble) -> list:
    return [flops(m) for m in ens.members]


def ensemble_flops_direct(ens: Ensemble) -> int:
    """Whole-ensemble cost accounted directly from layer shapes — a second
    code path against sum-of-member flops."""
    total = 0
    for params in ens.members:
        for layer in params.spec:
            total += 2 * layer.in_dim * layer.out_dim + layer.out_dim
        if params.connection.kind in ("residual_add", "delta"):
            total += params.spec[params.connection.target_layer].in_dim
    return total


def _prefix_logits(ens: Ensemble, x: np.ndarray) -> list:
    """Logits of every prefix average, evaluating each member once."""
    cache = {}
    total = None
    prefixes = []
    for member_index, params in enumerate(ens.members):
        logits, acts = forward(params, x, cache)
        for layer_index, act in enumerate(acts):
            cache[(member_index, layer_index)] = act
        total = logits if total is None else total + logits
        prefixes.append(total / (member_index + 1))
    return prefixes


def anytime_curve(ens: Ensemble, x: np.ndarray, labels: np.ndarray,
                  teacher_flops: int) -> list:
    """One point per prefix: cumulative cost as a fraction of the teacher's,
    accuracy of the prefix-average prediction."""
    if not ens.members:
        raise ValueError("empty ensemble")
    if teacher_flops <= 0:
        raise ValueError("teacher_flops must be > 0")
    per_member = member_flops(ens)
    points = []
    cum = 0
    for k, prefix in enumerate(_prefix_logits(ens, x), start=1):
        cum += per_member[k - 1]
        points.append(CurvePoint(prefix_k=k, cum_flops_fraction=cum / teacher_flops,
                                 accuracy=accuracy(prefix, labels)))
    return points


def train_plain_student(spec: list, x: np.ndarray, g_logits: np.ndarray,
                        cfg: FindWlConfig, rng: RngStream):
    """Distillation only: no game weights, no barrier, no connections."""
    params = init_params(spec, rng.split(0))

    def loss_fn(logits, idx):
        return distill_loss(logits, g_logits[idx], cfg.loss_mode, cfg.temperature)

    sgd_rng = rng.split(1)
    velocity = None
    for epoch in range(cfg.sgd.epochs):
        params, velocity, sgd_rng = sgd_epoch(
            params, x, loss_fn, cfg.sgd, sgd_rng,
            lr=lr_at_epoch(epoch, cfg.sgd), velocity=velocity)
    return params


def baseline_resched(member_specs: list, train_x: np.ndarray, train_g: np.ndarray,
                     test_x: np.ndarray, test_labels: np.ndarray,
                     teacher_flops: int, cfg: FindWlConfig, seed: int = 0) -> list:
    """Averaging baseline: each spec trained independently against the
    teacher, prefixes evaluated as simple averages."""
    if teacher_flops <= 0:
        raise ValueError("teacher_flops must be > 0")
    root = RngStream(seed)
    points = []
    total = None
    cum = 0
    for i, spec in enumerate(member_specs):
        params = train_plain_student(spec, train_x, train_g, cfg, root.split(i))
        logits, _ = forward(params, test_x, {})
        total = logits if total is None else total + logits
        cum += flops(params)
        points.append(CurvePoint(prefix_k=i + 1, cum_flops_fraction=cum / teacher_flops,
                                 accuracy=accuracy(total / (i + 1), test_labels)))
    return points


def standalone_spec(params) -> list:
    """A member's layer spec with any connection widening undone, so the same
    architecture can be trained independently (the resched baseline)."""
    conn = params.connection
    spec = list(params.spec)
    if conn.kind == "dense_concat":
        t = conn.target_layer
        if t < 1:
            raise ValueError("cannot un-widen a concat tap at the input layer")
        spec[t] = replace(spec[t], in_dim=spec[t - 1].out_dim)
    return spec


def early_exit(ens: Ensemble, x: np.ndarray, threshold: float):
    """Per-row budgeted inference: walk the ensemble in order and stop at the
    first prefix whose top softmax probability reaches the threshold.

    Returns (predictions, members_evaluated, flops_spent) arrays.  The
    simulation evaluates every member once and then reads off where each row
    would have exited; the reported FLOPs are what a sequential evaluator
    would actually have spent.
    """
    if not ens.members:
        raise ValueError("empty ensemble")
    prefixes = _prefix_logits(ens, x)
    n = x.shape[0]
    n_members = len(prefixes)
    cum_flops = np.cumsum(member_flops(ens))
    chosen = np.full(n, n_members, dtype=np.int64)
    preds = np.argmax(prefixes[-1], axis=1)
    done = np.zeros(n, dtype=bool)
    for k, prefix in enumerate(prefixes, start=1):
        conf = softmax(prefix).max(axis=1)
        hit = (~done) & (conf >= threshold)
        chosen[hit] = k
        preds[hit] = np.argmax(prefix[hit], axis=1)
        done |= hit
    return preds, chosen, cum_flops[chosen - 1]


def margin_measure(teacher_logits: np.ndarray, epsilon: float) -> float:
    """Fraction of rows whose decision margin is within epsilon.

    Margin is top-1 minus top-2 logit (absolute logit when there is only
    one output).  The comparison is inclusive, so epsilon=0 counts exactly
    the tied rows.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    g = np.asarray(teacher_logits, dtype=np.float64)
    if g.shape[1] == 1:
        margins = np.abs(g[:, 0])
    else:
        part = np.partition(g, g.shape[1] - 2, axis=1)
        margins = part[:, -1] - part[:, -2]
    return float(np.mean(margins <= epsilon))


# --- bound verification -----------------------------------------------------

@dataclass
class BoundReport:
    n_samples: int
    n_labels: int
    T: int
    eta: float
    g_inf_config: float
    observed_max_residual: float
    premise_rounds_ok: bool        # T >= ln(2N)
    premise_eta_ok: bool           # eta * G <= 1
    premise_residuals_ok: bool     # observed max|l| <= configured G
    measured_sup_error: float
    theorem_bound: float
    per_label: list = field(default_factory=list)
    normalizer_inequality_held: bool = True
    history_consistent: bool = True
    prediction_paths_agree: bool = True
    status: str = "pass"           # "pass" | "bound_violation" | "premise_violated"

    @property
    def premises_ok(self) -> bool:
        return self.premise_rounds_ok and self.premise_eta_ok and self.premise_residuals_ok

    @property
    def passed(self):
        """True/False for a claim, None when the premises fail."""
        if self.status == "premise_violated":
            return None
        return self.status == "pass"

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples, "n_labels": self.n_labels, "T": self.T,
            "eta": self.eta, "g_inf_config": self.g_inf_config,
            "observed_max_residual": self.observed_max_residual,
            "premises": {
                "rounds_ok": self.premise_rounds_ok,
                "eta_ok": self.premise_eta_ok,
                "residuals_ok": self.premise_residuals_ok,
            },
            "measured_sup_error": self.measured_sup_error,
            "theorem_bound": self.theorem_bound,
            "per_label": self.per_label,
            "normalizer_inequality_held": self.normalizer_inequality_held,
            "history_consistent": self.history_consistent,
            "prediction_paths_agree": self.prediction_paths_agree,
            "status": self.status,
        }


def _close(a: float, b: float, tol: float = 1e-9) -> bool:
    return abs(a - b) <= tol + tol * max(abs(a), abs(b))


def verify_bound(history_rows: list, ens: Ensemble, x: np.ndarray,
                 teacher_logits: np.ndarray, g_inf_config: float) -> BoundReport:
    """Replay a run from its artifacts and check the convergence accounting.

    Residuals are recomputed by evaluating the stored members on the training
    data; the weight updates are replayed from scratch; the recorded history
    must match the replay (a tampered log fails verification even when the
    bound itself would hold).  The sup-norm error is checked against both the
    plain bound G*sqrt(ln(2N)/T) and the sharper form with the edge sum
    subtracted.
    """
    if not ens.members:
        raise ValueError("empty ensemble")
    if g_inf_config <= 0:
        raise ValueError("g_inf_config must be > 0")
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(teacher_logits, dtype=np.float64)
    n, n_labels = g.shape
    t_rounds = len(ens.members)
    etas = {row["eta"] for row in history_rows}
    if len(etas) == 1:
        eta = etas.pop()
        consistent = _close(eta, ens.eta, 1e-12)
    else:
        # missing or self-contradictory eta column: replay with the ensemble's
        eta = ens.eta
        consistent = False

    # recompute residuals, threading caches exactly as prediction does
    cache = {}
    residuals = []
    for member_index, params in enumerate(ens.members):
        logits, acts = forward(params, x, cache)
        for layer_index, act in enumerate(acts):
            cache[(member_index, layer_index)] = act
        residuals.append(logits - g)
    mean_resid = sum(residuals) / t_rounds
    paths_agree = bool(np.max(np.abs(
        (ensemble_predict(ens, x, t_rounds) - g) - mean_resid)) <= 1e-9)
    measured_per_label = np.abs(mean_resid).max(axis=0)
    measured = float(measured_per_label.max())
    observed = float(max(np.max(np.abs(r)) for r in residuals))

    # replay the weight player
    state = init_uniform(n, n_labels)
    gammas, zs = [], []
    normalizer_held = True
    for round_index, resid in enumerate(residuals, start=1):
        state, record = md_update(state, resid, eta, round_index=round_index)
        gammas.append(record.edge_gamma)
        zs.append(record.z)
        if eta * g_inf_config <= 1.0 + 1e-12 and not normalizer_inequality_ok(
                record.edge_gamma, record.z, eta, g_inf_config):
            normalizer_held = False

    expected_rows = t_rounds * n_labels
    if len(history_rows) != expected_rows:
        consistent = False
    for row in history_rows:
        t, j = row["round"], row["label"]
        if not 1 <= t <= t_rounds or not 0 <= j < n_labels:
            consistent = False
            continue
        if not _close(row["edge_gamma"], float(gammas[t - 1][j])):
            consistent = False
        if not _close(row["z"], float(zs[t - 1][j])):
            consistent = False

    premise_rounds = t_rounds >= math.log(2.0 * n)
    premise_eta = eta * g_inf_config <= 1.0 + 1e-12
    premise_resid = observed <= g_inf_config + 1e-12
    theorem_bound = g_inf_config * math.sqrt(math.log(2.0 * n) / t_rounds)
    edge_sums = np.sum(gammas, axis=0)

    per_label = []
    bound_ok = True
    for j in range(n_labels):
        appendix = theorem_bound - float(edge_sums[j]) / t_rounds
        ok = bool(measured_per_label[j] <= theorem_bound + 1e-9
                  and measured_per_label[j] <= appendix + 1e-9)
        bound_ok &= ok
        per_label.append({
            "label": j,
            "measured_sup_error": float(measured_per_label[j]),
            "edge_sum": float(edge_sums[j]),
            "appendix_bound": appendix,
            "ok": ok,
        })

    if not (premise_rounds and premise_eta and premise_resid):
        status = "premise_violated"
    elif bound_ok and consistent and paths_agree and normalizer_held:
        status = "pass"
    else:
        status = "bound_violation"
    return BoundReport(
        n_samples=n, n_labels=n_labels, T=t_rounds, eta=float(eta),
        g_inf_config=float(g_inf_config), observed_max_residual=observed,
        premise_rounds_ok=premise_rounds, premise_eta_ok=premise_eta,
        premise_residuals_ok=premise_resid, measured_sup_error=measured,
        theorem_bound=theorem_bound, per_label=per_label,
        normalizer_inequality_held=normalizer_held, history_consistent=consistent,
        prediction_paths_agree=paths_agree, status=status)


# --- files ------------------------------------------------------------------

def write_curve_csv(path, points: list) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prefix_k", "cum_flops_fraction", "accuracy"])
        for p in points:
            writer.writerow([p.prefix_k, repr(float(p.cum_flops_fraction)),
                             repr(float(p.accuracy))])


def read_curve_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [CurvePoint(int(r["prefix_k"]), float(r["cum_flops_fraction"]),
                           float(r["accuracy"])) for r in reader]


def save_bound_report(path, report: BoundReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
