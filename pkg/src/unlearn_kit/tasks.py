"""Experiment generators and metrics for the three desk-scale settings.

* Data poisoning: sine regression on [-15, 15] with a handful of poisoned
  points pinned at y = 1.5; quality is the sup-norm deviation from sin(x)
  over a fixed fine grid.
* Multi-class label erasure (toy): Gaussian content clusters plus a 3-way
  color channel; the retain set only ever sees gray, and unlearning should
  drive the color head to predict gray everywhere.
* Representation collapse (toy): two shape clusters with a color channel
  that perfectly predicts the label on the retain set; unlearning should
  collapse the model onto the color shortcut.

Retraining on the retained samples alone is exposed as a first-class oracle
and serves as ground truth across tasks.
"""

from __future__ import annotations

import csv

import numpy as np

from unlearn_kit.models import LabeledDataset, NetworkSpec, ParamVector, forward_batch, softmax_heads, train

SINE_DOMAIN = (-15.0, 15.0)
POISON_TARGET = 1.5

ERASURE_COLORS = ("gray", "red", "green")  # channel and color-head index order
ERASURE_CONTENT_MEANS = np.array([[2.0, 2.0], [2.0, -2.0], [-2.0, 2.0], [-2.0, -2.0]])
ERASURE_CONTENT_STD = 0.5

COLLAPSE_SHAPE_MEANS = np.array([[-1.0, 0.0], [1.0, 0.0]])
COLLAPSE_SHAPE_STD = 0.6


# ---------------------------------------------------------------------------
# Data poisoning (sine)
# ---------------------------------------------------------------------------

def gen_sine_poison(n_retain: int, n_forget: int, seed: int) -> LabeledDataset:
    """Retain points on y = sin(x), forget points pinned at y = 1.5."""
    if n_retain < 1 or n_forget < 0:
        raise ValueError("need n_retain >= 1 and n_forget >= 0")
    rng = np.random.default_rng(seed)
    lo, hi = SINE_DOMAIN
    xr = rng.uniform(lo, hi, n_retain)
    xf = rng.uniform(lo, hi, n_forget)
    inputs = np.concatenate([xr, xf])[:, None]
    targets = np.concatenate([np.sin(xr), np.full(n_forget, POISON_TARGET)])[:, None]
    mask = np.concatenate([np.ones(n_retain, dtype=bool), np.zeros(n_forget, dtype=bool)])
    return LabeledDataset(inputs, targets, mask)


def sup_deviation(spec: NetworkSpec, theta: ParamVector, grid_size: int = 2001) -> float:
    """Max |f(theta, x) - sin(x)| over a uniform grid on the sine domain."""
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    grid = np.linspace(SINE_DOMAIN[0], SINE_DOMAIN[1], grid_size)
    out = forward_batch(spec, theta, grid[:, None])[:, 0]
    return float(np.max(np.abs(out - np.sin(grid))))


# ---------------------------------------------------------------------------
# Multi-class label erasure (toy)
# ---------------------------------------------------------------------------

def _erasure_sample(rng, content_class: int, color: int, n: int):
    xy = rng.normal(size=(n, 2)) * ERASURE_CONTENT_STD + ERASURE_CONTENT_MEANS[content_class]
    channel = np.zeros((n, 3))
    channel[:, color] = 1.0
    inputs = np.hstack([xy, channel])
    targets = np.zeros((n, 7))
    targets[:, content_class] = 1.0
    targets[:, 4 + color] = 1.0
    return inputs, targets


def gen_label_erasure_toy(n_per_class: int, seed: int) -> LabeledDataset:
    """4 Gaussian content classes with a 3-way color channel.

    Retain: n_per_class gray samples per content class.  Forget: n_per_class
    colored samples per content class, split red/green.  Inputs are
    [content_xy, color_onehot] (dim 5); targets stack the content one-hot
    (4) and color one-hot (3) for the two prediction heads.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    chunks = []
    for k in range(4):
        chunks.append((*_erasure_sample(rng, k, 0, n_per_class), True))
    for k in range(4):
        n_red = (n_per_class + 1) // 2
        chunks.append((*_erasure_sample(rng, k, 1, n_red), False))
        chunks.append((*_erasure_sample(rng, k, 2, n_per_class - n_red), False))
    inputs = np.vstack([c[0] for c in chunks if len(c[0])])
    targets = np.vstack([c[1] for c in chunks if len(c[0])])
    mask = np.concatenate([np.full(len(c[0]), c[2]) for c in chunks if len(c[0])])
    return LabeledDataset(inputs, targets, mask)


def erasure_spec(hidden: int = 64) -> NetworkSpec:
    """Two-head classifier (content 4-way, color 3-way) for the erasure toy."""
    return NetworkSpec.mlp([5, hidden, hidden, 7], activation="silu", head_sizes=(4, 3))


def erasure_metrics(spec: NetworkSpec, theta: ParamVector, testset: LabeledDataset):
    """(retain_acc, gray_mse).

    retain_acc: content-head accuracy on the gray samples.  gray_mse: mean
    squared gap between the predicted gray probability and 1, over every
    sample regardless of its color (an ideally unlearned model predicts gray
    everywhere).
    """
    logits = forward_batch(spec, theta, testset.inputs)
    probs = softmax_heads(spec, logits)
    gray_in = testset.inputs[:, 2] == 1.0
    content_pred = np.argmax(logits[:, :4], axis=1)
    content_true = np.argmax(testset.targets[:, :4], axis=1)
    retain_acc = float(np.mean(content_pred[gray_in] == content_true[gray_in]))
    gray_prob = probs[:, 4]
    gray_mse = float(np.mean((gray_prob - 1.0) ** 2))
    return retain_acc, gray_mse


# ---------------------------------------------------------------------------
# Representation collapse (toy)
# ---------------------------------------------------------------------------

def gen_representation_collapse_toy(n_per_class: int, forget_frac: float, seed: int):
    """Two shape clusters with a 2-way color channel shortcut.

    Retain samples pair class 0 with green and class 1 with red; a
    forget_frac share of each class carries the swapped color and forms the
    forget set.  Returns (dataset, color_relabeled) where the second has
    every sample relabeled by its color (green -> class 0, red -> class 1).
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if not 0.0 <= forget_frac < 1.0:
        raise ValueError("forget_frac must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    inputs, shape_targets, color_targets, mask = [], [], [], []
    for cls in range(2):
        xy = rng.normal(size=(n_per_class, 2)) * COLLAPSE_SHAPE_STD + COLLAPSE_SHAPE_MEANS[cls]
        n_f = int(round(forget_frac * n_per_class))
        swapped = np.zeros(n_per_class, dtype=bool)
        swapped[rng.permutation(n_per_class)[:n_f]] = True
        color = np.where(swapped, 1 - cls, cls)  # retain color matches the class
        channel = np.zeros((n_per_class, 2))
        channel[np.arange(n_per_class), color] = 1.0
        inputs.append(np.hstack([xy, channel]))
        onehot = np.zeros((n_per_class, 2))
        onehot[:, cls] = 1.0
        shape_targets.append(onehot)
        color_onehot = np.zeros((n_per_class, 2))
        color_onehot[np.arange(n_per_class), color] = 1.0
        color_targets.append(color_onehot)
        mask.append(~swapped)
    inputs = np.vstack(inputs)
    dataset = LabeledDataset(inputs, np.vstack(shape_targets), np.concatenate(mask))
    relabeled = LabeledDataset(inputs.copy(), np.vstack(color_targets), np.concatenate(mask))
    return dataset, relabeled


def collapse_spec(hidden: int = 64) -> NetworkSpec:
    """Binary classifier for the representation-collapse toy."""
    return NetworkSpec.mlp([4, hidden, hidden, 2], activation="silu", head_sizes=(2,))


def color_accuracy(spec: NetworkSpec, theta: ParamVector, color_relabeled: LabeledDataset) -> float:
    """Share of samples classified to their color label."""
    logits = forward_batch(spec, theta, color_relabeled.inputs)
    pred = np.argmax(logits, axis=1)
    true = np.argmax(color_relabeled.targets, axis=1)
    return float(np.mean(pred == true))


# ---------------------------------------------------------------------------
# Retraining oracle
# ---------------------------------------------------------------------------

def retrain(
    spec: NetworkSpec,
    dataset: LabeledDataset,
    loss_kind: str,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    weight_decay: float = 0.01,
    target_loss: float | None = None,
) -> ParamVector:
    """Train from scratch on the retained samples only: the gold standard."""
    return train(
        spec,
        dataset.retain_subset(),
        loss_kind,
        epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        seed=seed,
        weight_decay=weight_decay,
        target_loss=target_loss,
    )


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------

def dataset_to_csv(dataset: LabeledDataset, path):
    """One row per sample: features..., targets..., retain flag."""
    m = dataset.inputs.shape[1]
    l = dataset.targets.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(m)] + [f"y{i}" for i in range(l)] + ["retain"])
        for i in range(len(dataset)):
            row = [format(v, ".17g") for v in dataset.inputs[i]]
            row += [format(v, ".17g") for v in dataset.targets[i]]
            row.append(str(int(dataset.retain_mask[i])))
            writer.writerow(row)


def dataset_from_csv(path) -> LabeledDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        m = sum(1 for h in header if h.startswith("x"))
        l = sum(1 for h in header if h.startswith("y"))
        inputs, targets, mask = [], [], []
        for row in reader:
            inputs.append([float(v) for v in row[:m]])
            targets.append([float(v) for v in row[m : m + l]])
            mask.append(bool(int(row[m + l])))
    return LabeledDataset(np.array(inputs), np.array(targets), np.array(mask))
