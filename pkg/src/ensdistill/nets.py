"""Student/teacher network substrate.

Fully connected nets with manual backprop, plus the machinery that lets a new
ensemble member reuse cached activations of earlier members (residual, dense
and feature-delta connections) to grow capacity at near-zero inference cost.
Earlier members are frozen: gradients never flow through a tapped activation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import RngStream, check_finite

ACTIVATIONS = ("relu", "linear")
CONNECTION_KINDS = ("none", "residual_add", "dense_concat", "delta")


class ConfigError(ValueError):
    """Invalid layer/connection configuration."""


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"


@dataclass(frozen=True)
class ConnectionSpec:
    """One tap into a previous member's cached activation.

    `source_layer` names the layer of member `source_round` whose
    post-activation output is consumed; `target_layer` names the layer of the
    new model whose *input* is modified by it.
    """

    kind: str = "none"
    source_round: int = -1
    source_layer: int = -1
    target_layer: int = -1


NO_CONNECTION = ConnectionSpec()

# cache key: (member index, layer index) -> post-activation batch matrix
ActivationCache = dict


@dataclass
class LearnerParams:
    spec: list  # LayerSpec sequence; dims already widened for dense_concat
    connection: ConnectionSpec = NO_CONNECTION
    weights: list = field(default_factory=list)  # weights[l]: (in_dim, out_dim)
    biases: list = field(default_factory=list)


def validate_spec(spec: list) -> None:
    if not spec:
        raise ConfigError("empty layer spec")
    for i, layer in enumerate(spec):
        if layer.in_dim < 1 or layer.out_dim < 1:
            raise ConfigError(f"layer {i}: dims must be >= 1, got {layer.in_dim}x{layer.out_dim}")
        if layer.activation not in ACTIVATIONS:
            raise ConfigError(f"layer {i}: unknown activation {layer.activation!r}")
    if spec[-1].activation != "linear":
        raise ConfigError("output layer must be linear")


def init_params(spec: list, rng: RngStream, connection: ConnectionSpec = NO_CONNECTION) -> LearnerParams:
    """He-style init: weights ~ N(0, 2/in_dim), biases zero."""
    validate_spec(spec)
    weights, biases = [], []
    for layer in spec:
        draw, rng = rng.gaussian(layer.in_dim * layer.out_dim)
        w = draw.reshape(layer.in_dim, layer.out_dim) * np.sqrt(2.0 / layer.in_dim)
        weights.append(w)
        biases.append(np.zeros(layer.out_dim))
    return LearnerParams(spec=list(spec), connection=connection, weights=weights, biases=biases)


def _tap(params: LearnerParams, cache: ActivationCache, n_rows: int) -> np.ndarray:
    conn = params.connection
    key = (conn.source_round, conn.source_layer)
    if key not in cache:
        raise ConfigError(f"missing cached activation for member {key[0]} layer {key[1]}")
    src = cache[key]
    if src.shape[0] != n_rows:
        raise ConfigError(f"cached activation has {src.shape[0]} rows, batch has {n_rows}")
    return src


def _trace(params: LearnerParams, x: np.ndarray, cache: ActivationCache):
    """Forward pass keeping per-layer inputs and pre-activations for backprop."""
    conn = params.connection
    h = np.asarray(x, dtype=np.float64)
    inputs, pre_acts, post_acts = [], [], []
    for idx, layer in enumerate(params.spec):
        if conn.kind != "none" and idx == conn.target_layer:
            src = _tap(params, cache, h.shape[0])
            if conn.kind == "residual_add":
                if src.shape[1] != h.shape[1]:
                    raise ConfigError(f"residual_add width mismatch: source {src.shape[1]} vs {h.shape[1]}")
                h = h + src
            elif conn.kind == "delta":
                if src.shape[1] != h.shape[1]:
                    raise ConfigError(f"delta width mismatch: source {src.shape[1]} vs {h.shape[1]}")
                h = src - h
            elif conn.kind == "dense_concat":
                h = np.concatenate([h, src], axis=1)
        if h.shape[1] != layer.in_dim:
            raise ConfigError(f"layer {idx} expects input width {layer.in_dim}, got {h.shape[1]}")
        inputs.append(h)
        z = h @ params.weights[idx] + params.biases[idx]
        pre_acts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        post_acts.append(h)
    return inputs, pre_acts, post_acts


def forward(params: LearnerParams, x: np.ndarray, cache: ActivationCache | None = None):
    """Batch logits plus this member's per-layer activations (for later taps)."""
    _, _, post_acts = _trace(params, x, cache or {})
    logits = check_finite("logits", post_acts[-1])
    return logits, post_acts


def backward(params: LearnerParams, x: np.ndarray, dlogits: np.ndarray,
             cache: ActivationCache | None = None):
    """Exact gradients of a logits-composed loss w.r.t. every weight and bias.

    Tapped source activations are constants: no gradient is returned (or
    propagated) for earlier members.
    """
    cache = cache or {}
    inputs, pre_acts, _ = _trace(params, x, cache)
    conn = params.connection
    dW = [None] * len(params.spec)
    db = [None] * len(params.spec)
    dh = np.asarray(dlogits, dtype=np.float64)
    for idx in range(len(params.spec) - 1, -1, -1):
        layer = params.spec[idx]
        dz = dh if layer.activation == "linear" else dh * (pre_acts[idx] > 0.0)
        dW[idx] = inputs[idx].T @ dz
        db[idx] = dz.sum(axis=0)
        if idx == 0:
            break
        dh = dz @ params.weights[idx].T
        if conn.kind != "none" and idx == conn.target_layer:
            if conn.kind == "delta":
                dh = -dh
            elif conn.kind == "dense_concat":
                dh = dh[:, : dh.shape[1] - cache[(conn.source_round, conn.source_layer)].shape[1]]
            # residual_add: identity on the current path
    return dW, db


def expand_class(base: list, kind: str, r: int, ensemble_so_far: list):
    """Grow the base class for escalation level r.

    r=0 is the base class itself.  r>=1 adds a single connection of `kind`
    tapping the last hidden layer of the most recent ensemble member, feeding
    the input of the new model's output layer.  Width mismatches are hard
    errors; nothing is silently padded or projected.
    """
    validate_spec(base)
    if kind not in CONNECTION_KINDS:
        raise ConfigError(f"unknown connection kind {kind!r}")
    if r < 0:
        raise ConfigError("expansion level must be >= 0")
    if r == 0 or kind == "none":
        return list(base), NO_CONNECTION
    if not ensemble_so_far:
        raise ConfigError("connection requested but no trained member to tap")
    source_round = len(ensemble_so_far) - 1
    source_spec = ensemble_so_far[source_round].spec
    if len(source_spec) < 2:
        raise ConfigError("source member has no hidden layer to tap")
    source_layer = len(source_spec) - 2
    source_width = source_spec[source_layer].out_dim
    target_layer = len(base) - 1
    conn = ConnectionSpec(kind=kind, source_round=source_round,
                          source_layer=source_layer, target_layer=target_layer)
    if kind == "dense_concat":
        widened = list(base)
        tgt = widened[target_layer]
        widened[target_layer] = replace(tgt, in_dim=tgt.in_dim + source_width)
        return widened, conn
    if source_width != base[target_layer].in_dim:
        raise ConfigError(
            f"{kind} width mismatch: source {source_width} vs target input {base[target_layer].in_dim}")
    return list(base), conn


def flops(params: LearnerParams) -> int:
    """Analytic inference cost: 2*in*out + out per layer, plus the elementwise
    adds a residual/delta tap costs.  dense_concat adds nothing beyond the
    widened matmul, which the layer term already counts."""
    total = 0
    for layer in params.spec:
        total += 2 * layer.in_dim * layer.out_dim + layer.out_dim
    if params.connection.kind in ("residual_add", "delta"):
        total += params.spec[params.connection.target_layer].in_dim
    return total


def connection_flops(params: LearnerParams) -> int:
    """The tap's own cost, separated out for overhead reporting."""
    if params.connection.kind in ("residual_add", "delta"):
        return params.spec[params.connection.target_layer].in_dim
    return 0


# --- model file format ------------------------------------------------------

def params_to_dict(params: LearnerParams) -> dict:
    return {
        "spec": [{"in_dim": s.in_dim, "out_dim": s.out_dim, "activation": s.activation}
                 for s in params.spec],
        "connection": {
            "kind": params.connection.kind,
            "source_round": params.connection.source_round,
            "source_layer": params.connection.source_layer,
            "target_layer": params.connection.target_layer,
        },
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def params_from_dict(doc: dict) -> LearnerParams:
    spec = [LayerSpec(s["in_dim"], s["out_dim"], s["activation"]) for s in doc["spec"]]
    c = doc["connection"]
    conn = ConnectionSpec(c["kind"], c["source_round"], c["source_layer"], c["target_layer"])
    weights = [np.asarray(w, dtype=np.float64) for w in doc["weights"]]
    biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
    params = LearnerParams(spec=spec, connection=conn, weights=weights, biases=biases)
    for idx, layer in enumerate(spec):
        if weights[idx].shape != (layer.in_dim, layer.out_dim) or biases[idx].shape != (layer.out_dim,):
            raise ConfigError(f"layer {idx} arrays do not match spec dims")
        check_finite(f"layer {idx} weights", weights[idx])
        check_finite(f"layer {idx} biases", biases[idx])
    return params
