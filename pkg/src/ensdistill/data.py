"""Synthetic classification data and the teacher that gets distilled.

Two generators: a quadratic-form (ellipsoid) two-class problem and a
nearest-corner-cluster multiclass problem, both on the hypercube.  Everything
is a pure function of its seed; generator parameters land in a metadata
sidecar so labels can be re-derived from files alone.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, softmax
from .findwl import SgdConfig, lr_at_epoch, sgd_epoch
from .nets import LayerSpec, LearnerParams, forward, init_params


@dataclass
class LabeledDataset:
    x: np.ndarray                      # n x d features
    labels: np.ndarray                 # n int class indices
    teacher_logits: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


def _uniform_box(rng: RngStream, n: int, d: int):
    """n x d points uniform in [-1, 1]."""
    u, rng = rng.uniform(n * d)
    return 2.0 * u.reshape(n, d) - 1.0, rng


def ellipsoid_labels(x: np.ndarray, b: np.ndarray, threshold: float) -> np.ndarray:
    """Label rule for the quadratic-form dataset: I[x'(B'B)x >= threshold]."""
    a = b.T @ b
    quad = ((x @ a) * x).sum(axis=1)
    return (quad >= threshold).astype(np.int64)


def gen_ellipsoid(seed: int, n: int, d: int = 32) -> LabeledDataset:
    """Two classes split by a random positive-semidefinite quadratic form.

    The form x'Ax with A = B'B is nonnegative everywhere, so the class
    boundary is drawn at the sample median of the form rather than at zero —
    that yields a balanced, nondegenerate problem.  B and the threshold are
    recorded in metadata.
    """
    if n < 2 or d < 1:
        raise ValueError("need n >= 2 and d >= 1")
    root = RngStream(seed)
    draw, _ = root.split(0).gaussian(d * d)
    b = draw.reshape(d, d)
    x, _ = _uniform_box(root.split(1), n, d)
    quad = ((x @ (b.T @ b)) * x).sum(axis=1)
    threshold = float(np.median(quad))
    labels = ellipsoid_labels(x, b, threshold)
    meta = {"generator": "ellipsoid", "seed": seed, "n": n, "d": d,
            "threshold": threshold, "matrix_b": b.tolist()}
    return LabeledDataset(x=x, labels=labels, meta=meta)


def cube_labels(x: np.ndarray, vertices: np.ndarray, classes: int) -> np.ndarray:
    """Label rule for the nearest-corner dataset.

    The class of a point is the class of its nearest vertex (Euclidean);
    vertices are partitioned sequentially into equal classes, and distance
    ties resolve to the lowest class index (first minimum wins).
    """
    v = np.asarray(vertices, dtype=np.float64)
    d2 = (x * x).sum(axis=1, keepdims=True) - 2.0 * x @ v.T + (v * v).sum(axis=1)
    nearest = np.argmin(d2, axis=1)
    return (nearest // (v.shape[0] // classes)).astype(np.int64)


def gen_cube(seed: int, n: int, d: int = 32, classes: int = 4,
             vertices: int = 16) -> LabeledDataset:
    """Multiclass by nearest corner: `vertices` distinct corners of {-1,1}^d,
    partitioned sequentially into equal classes; each point takes the class of
    its closest corner (Euclidean, ties to the lowest class index)."""
    if n < 1 or d < 1:
        raise ValueError("need n >= 1 and d >= 1")
    if vertices % classes != 0:
        raise ValueError(f"{vertices} vertices do not split into {classes} equal classes")
    root = RngStream(seed)
    vrng = root.split(0)
    corners, seen = [], set()
    attempts = 0
    while len(corners) < vertices:
        attempts += 1
        if attempts > 1000 * vertices:
            raise ValueError("could not sample distinct corners; d too small?")
        u, vrng = vrng.uniform(d)
        corner = np.where(u > 0.5, 1.0, -1.0)
        key = tuple(corner)
        if key not in seen:
            seen.add(key)
            corners.append(corner)
    v = np.stack(corners)                     # vertices x d
    x, _ = _uniform_box(root.split(1), n, d)
    labels = cube_labels(x, v, classes)
    meta = {"generator": "cube", "seed": seed, "n": n, "d": d, "classes": classes,
            "vertices": v.tolist()}
    return LabeledDataset(x=x, labels=labels, meta=meta)


def split(ds: LabeledDataset, fraction: float = 0.8,
          seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic shuffled split; every row lands in exactly one part."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    n = ds.n
    n_train = int(round(n * fraction))
    if n_train < 1 or n - n_train < 1:
        raise ValueError(f"split of {n} rows at {fraction} leaves an empty part")
    perm, _ = RngStream(seed).permutation(n)
    parts = []
    for name, idx in (("train", perm[:n_train]), ("test", perm[n_train:])):
        logits = ds.teacher_logits[idx] if ds.teacher_logits is not None else None
        meta = dict(ds.meta, part=name, split_fraction=fraction, split_seed=seed)
        parts.append(LabeledDataset(x=ds.x[idx], labels=ds.labels[idx],
                                    teacher_logits=logits, meta=meta))
    return parts[0], parts[1]


def mlp_spec(in_dim: int, hidden: list, out_dim: int) -> list:
    """ReLU MLP spec from a list of hidden widths."""
    dims = [in_dim] + list(hidden)
    layers = [LayerSpec(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    layers.append(LayerSpec(dims[-1], out_dim, "linear"))
    return layers


def default_teacher_recipe() -> SgdConfig:
    return SgdConfig(lr=0.1, momentum=0.9, weight_decay=5e-4, epochs=200,
                     batch_size=128, lr_drops=(0.3, 0.6, 0.9), lr_factor=0.2)


def hard_label_loss(labels: np.ndarray, n_classes: int):
    """Cross-entropy against integer labels, for teacher training."""
    onehot = np.eye(n_classes)[labels]

    def fn(logits: np.ndarray, idx: np.ndarray):
        targets = onehot[idx]
        p = softmax(logits)
        n = logits.shape[0]
        loss = -float((targets * np.log(np.maximum(p, 1e-300))).sum()) / n
        return loss, (p - targets) / n
    return fn


def train_teacher(train: LabeledDataset, spec: list, recipe: SgdConfig | None = None,
                  seed: int = 0) -> LearnerParams:
    """Fit the teacher on hard labels with the standard step-decay recipe."""
    recipe = recipe or default_teacher_recipe()
    recipe.validate()
    n_classes = spec[-1].out_dim
    if train.labels.max() >= n_classes:
        raise ValueError(f"labels reach {int(train.labels.max())} but spec has {n_classes} outputs")
    root = RngStream(seed)
    params = init_params(spec, root.split(0))
    loss_fn = hard_label_loss(train.labels, n_classes)
    sgd_rng = root.split(1)
    velocity = None
    for epoch in range(recipe.epochs):
        params, velocity, sgd_rng = sgd_epoch(
            params, train.x, loss_fn, recipe, sgd_rng,
            lr=lr_at_epoch(epoch, recipe), velocity=velocity)
    return params


def teacher_logits(params: LearnerParams, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(params, x, {})
    return logits


# --- files ------------------------------------------------------------------

def save_dataset_csv(path, ds: LabeledDataset) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(ds.d)] + ["label"])
        for row, label in zip(ds.x, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_dataset_csv(path) -> LabeledDataset:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-1] != "label" or header[:-1] != [f"x{i}" for i in range(len(header) - 1)]:
            raise ValueError(f"bad dataset header in {path}")
        xs, labels = [], []
        for row in reader:
            xs.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
    return LabeledDataset(x=np.asarray(xs, dtype=np.float64),
                          labels=np.asarray(labels, dtype=np.int64))


def save_logits_csv(path, logits: np.ndarray) -> None:
    logits = np.asarray(logits, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"l{i}" for i in range(logits.shape[1])])
        for row in logits:
            writer.writerow([repr(float(v)) for v in row])


def load_logits_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != [f"l{i}" for i in range(len(header))]:
            raise ValueError(f"bad logits header in {path}")
        return np.asarray([[float(v) for v in row] for row in reader], dtype=np.float64)


def save_meta(path, meta: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_meta(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
