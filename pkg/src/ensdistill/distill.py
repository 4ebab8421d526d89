"""Outer distillation loop.

Runs boosting rounds against the teacher: search the current class for a weak
learner, append it, update the game weights with its residuals, and escalate
to a larger (connection-expanded) class whenever the search comes back empty.
The ensemble predicts by prefix-averaging member logits, so any prefix is a
usable model.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import RngStream
from .findwl import FindWlConfig, find_weak_learner
from .game import EXP_ARG_LIMIT, init_uniform, md_update
from .nets import (CONNECTION_KINDS, LayerSpec, expand_class, forward,
                   params_from_dict, params_to_dict, validate_spec)

HISTORY_COLUMNS = ("round", "label", "edge_gamma", "z", "eta", "class_r", "clamp_count")


def default_base_class() -> list:
    """Small two-hidden-layer student; sized so a width-24 tap costs < 1% of
    the member's own FLOPs."""
    return [LayerSpec(32, 24), LayerSpec(24, 24), LayerSpec(24, 2, "linear")]


@dataclass
class DistillConfig:
    T: int = 7                       # max ensemble size
    R: int = 2                       # class-escalation budget (1-indexed loop)
    eta: float = 1.0                 # fixed-mode learning rate of the weight player
    eta_mode: str = "fixed"          # "fixed" | "theorem"
    g_inf: float | None = None       # residual sup-norm bound, required in theorem mode
    edge_tol: float = 0.0
    base_class: list = field(default_factory=default_base_class)
    connection_kind: str = "residual_add"
    findwl: FindWlConfig = field(default_factory=FindWlConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.T < 1 or self.R < 1:
            raise ValueError("T and R must be >= 1")
        if self.eta_mode == "fixed":
            if self.eta <= 0:
                raise ValueError("eta must be > 0")
        elif self.eta_mode == "theorem":
            if self.g_inf is None or self.g_inf <= 0:
                raise ValueError("theorem eta mode requires g_inf > 0")
        else:
            raise ValueError(f"unknown eta_mode {self.eta_mode!r}")
        if self.edge_tol < 0:
            raise ValueError("edge_tol must be >= 0")
        if self.connection_kind not in CONNECTION_KINDS:
            raise ValueError(f"unknown connection_kind {self.connection_kind!r}")
        validate_spec(self.base_class)
        self.findwl.validate()


def resolve_eta(cfg: DistillConfig, n_samples: int) -> float:
    """Fixed eta, or the rate the convergence theorem prescribes for (N, T)."""
    if cfg.eta_mode == "fixed":
        return cfg.eta
    return math.sqrt(math.log(2.0 * n_samples) / cfg.T) / cfg.g_inf


@dataclass
class RoundRecord:
    round_index: int          # 1-based position in the ensemble
    class_r: int              # escalation level the member was found at
    edge_gamma: np.ndarray    # per label, measured against the pre-update state
    z: np.ndarray             # per label
    eta: float
    clamp_count: int
    verdict: str              # "pass" or "degenerate"
    train_loss: float


@dataclass
class RunHistory:
    rounds: list = field(default_factory=list)
    escalations: list = field(default_factory=list)  # (members_so_far, new_r)
    residuals: list = field(default_factory=list)    # per accepted round, train residual matrix


@dataclass
class Ensemble:
    members: list = field(default_factory=list)
    class_rs: list = field(default_factory=list)
    seed: int = 0
    eta: float = 1.0
    T: int = 0
    R: int = 0
    teacher_hash: str = ""


def run(cfg: DistillConfig, x: np.ndarray, teacher_logits: np.ndarray,
        teacher_hash: str = "") -> tuple[Ensemble, RunHistory]:
    """The full game: returns the ensemble and its verification trail.

    Escalation is permanent — once the search fails at level r the loop moves
    to r+1 and never revisits smaller classes; the run ends when either the
    ensemble is full or the escalation budget is spent.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(teacher_logits, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty training data")
    if x.shape[0] != g.shape[0]:
        raise ValueError(f"data has {x.shape[0]} rows but teacher logits {g.shape[0]}")
    n, n_labels = g.shape
    eta = resolve_eta(cfg, n)
    state = init_uniform(n, n_labels)
    root = RngStream(cfg.seed)
    ens = Ensemble(seed=cfg.seed, eta=eta, T=cfg.T, R=cfg.R, teacher_hash=teacher_hash)
    hist = RunHistory()
    cache = {}
    r = 1
    attempt = 0
    while len(ens.members) < cfg.T and r < cfg.R:
        spec, conn = expand_class(cfg.base_class, cfg.connection_kind, r - 1, ens.members)
        result = find_weak_learner(state, spec, conn, x, g, cfg.findwl,
                                   root.split(attempt), cache=cache, edge_tol=cfg.edge_tol)
        attempt += 1
        reject = result.params is None
        if not reject:
            logits, acts = forward(result.params, x, cache)
            resid = logits - g
            # a candidate whose residuals would overflow the exponential
            # update is no weak learner, however its edge came out
            reject = eta * float(np.max(np.abs(resid))) > EXP_ARG_LIMIT
        if reject:
            r += 1
            hist.escalations.append((len(ens.members), r))
            if not ens.members and cfg.connection_kind != "none":
                break                 # nothing to tap: no larger class exists
            continue
        member_index = len(ens.members)
        for layer_index, act in enumerate(acts):
            cache[(member_index, layer_index)] = act
        state, record = md_update(state, resid, eta, round_index=member_index + 1)
        state.validate()
        ens.members.append(result.params)
        ens.class_rs.append(r)
        hist.residuals.append(resid)
        hist.rounds.append(RoundRecord(
            round_index=member_index + 1, class_r=r, edge_gamma=record.edge_gamma,
            z=record.z, eta=eta, clamp_count=result.clamp_count,
            verdict=result.verdict, train_loss=result.train_loss))
    return ens, hist


def ensemble_predict(ens: Ensemble, x: np.ndarray, k: int) -> np.ndarray:
    """Prefix average of the first k members' logits, caches threaded in order."""
    if not 1 <= k <= len(ens.members):
        raise ValueError(f"prefix length {k} out of range 1..{len(ens.members)}")
    x = np.asarray(x, dtype=np.float64)
    cache = {}
    total = None
    for member_index, params in enumerate(ens.members[:k]):
        logits, acts = forward(params, x, cache)
        for layer_index, act in enumerate(acts):
            cache[(member_index, layer_index)] = act
        total = logits if total is None else total + logits
    return total / k


# --- files ------------------------------------------------------------------

def ensemble_to_dict(ens: Ensemble) -> dict:
    return {
        "meta": {
            "seed": ens.seed,
            "eta": ens.eta,
            "T": ens.T,
            "R": ens.R,
            "teacher_hash": ens.teacher_hash,
            "member_class_r": list(ens.class_rs),
        },
        "members": [params_to_dict(m) for m in ens.members],
    }


def ensemble_from_dict(doc: dict) -> Ensemble:
    meta = doc["meta"]
    members = [params_from_dict(m) for m in doc["members"]]
    return Ensemble(members=members, class_rs=list(meta["member_class_r"]),
                    seed=meta["seed"], eta=meta["eta"], T=meta["T"], R=meta["R"],
                    teacher_hash=meta["teacher_hash"])


def save_ensemble(path, ens: Ensemble) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ensemble_to_dict(ens), fh, indent=2)
        fh.write("\n")


def load_ensemble(path) -> Ensemble:
    with open(path, encoding="utf-8") as fh:
        return ensemble_from_dict(json.load(fh))


def write_history(path, hist: RunHistory) -> None:
    """One CSV row per (round, label); floats as shortest round-trip decimals."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for rec in hist.rounds:
            for label in range(len(rec.edge_gamma)):
                writer.writerow([rec.round_index, label, repr(float(rec.edge_gamma[label])),
                                 repr(float(rec.z[label])), repr(float(rec.eta)),
                                 rec.class_r, rec.clamp_count])


def read_history(path) -> list:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HISTORY_COLUMNS:
            raise ValueError(f"bad history header: {reader.fieldnames}")
        for row in reader:
            rows.append({
                "round": int(row["round"]), "label": int(row["label"]),
                "edge_gamma": float(row["edge_gamma"]), "z": float(row["z"]),
                "eta": float(row["eta"]), "class_r": int(row["class_r"]),
                "clamp_count": int(row["clamp_count"]),
            })
    return rows
