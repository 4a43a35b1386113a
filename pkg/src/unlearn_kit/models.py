"""Model classes with exact forward passes and hand-derived gradients.

Four parameterized families share one flat-parameter representation:

* ``linear``       f(theta, x) = theta^T x
* ``deep_linear``  f(theta, x) = c^T A_{L-1} ... A_1 x, partition [c; vec(A_1); ...]
* ``perceptron``   f(theta, x) = c^T phi(A x), partition [c; vec(A)]
* ``mlp``          dense net with biases and optional classification heads

Gradients are derived per family (no autodiff).  vec() is columnwise
throughout, so matrix blocks reshape with Fortran order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from unlearn_kit import numkit


class ModelError(ValueError):
    """Bad spec/parameter/input combination."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Clipping at 60 is exact for float64 (sigmoid saturates near |z| = 37)
    # and keeps the single vectorized exp overflow-free.
    out = np.clip(-z, None, 60.0)
    np.exp(out, out=out)
    out += 1.0
    np.divide(1.0, out, out=out)
    return out


def activation(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "silu":
        return z * _sigmoid(z)
    raise ModelError(f"unknown activation {kind!r}")


def activation_prime(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        # Subgradient at exactly 0 is taken as 0 for determinism.
        return np.where(z > 0.0, 1.0, 0.0)
    if kind == "silu":
        s = _sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    raise ModelError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# Specs and parameter vectors
# ---------------------------------------------------------------------------

KINDS = ("linear", "deep_linear", "perceptron", "mlp")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture descriptor that fixes how a flat ParamVector is read."""

    kind: str
    input_dim: int
    output_dim: int
    widths: tuple[int, ...] = ()
    activation: str | None = None
    head_sizes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ModelError("dimensions must be positive")
        if any(w < 1 for w in self.widths):
            raise ModelError("widths must be positive")
        if self.kind == "deep_linear" and len(self.widths) < 2:
            raise ModelError("deep_linear needs at least 2 layers (widths h_0..h_{L-1})")
        if self.kind == "mlp":
            if len(self.widths) < 2:
                raise ModelError("mlp needs at least input and output widths")
            if self.head_sizes and sum(self.head_sizes) != self.output_dim:
                raise ModelError("head_sizes must sum to output_dim")
            if any(h < 1 for h in self.head_sizes):
                raise ModelError("head sizes must be positive")

    # -- constructors -------------------------------------------------------

    @classmethod
    def linear(cls, input_dim: int) -> "NetworkSpec":
        return cls("linear", input_dim, 1)

    @classmethod
    def deep_linear(cls, widths) -> "NetworkSpec":
        """L-layer linear net; widths = (h_0, ..., h_{L-1}) with h_0 the input dim."""
        widths = tuple(int(w) for w in widths)
        return cls("deep_linear", widths[0], 1, widths)

    @classmethod
    def perceptron(cls, input_dim: int, hidden: int, activation: str = "relu") -> "NetworkSpec":
        return cls("perceptron", input_dim, 1, (int(input_dim), int(hidden)), activation)

    @classmethod
    def mlp(cls, widths, activation: str = "silu", head_sizes=None) -> "NetworkSpec":
        """Dense net with biases; head_sizes marks softmax groups (classification)."""
        widths = tuple(int(w) for w in widths)
        heads = tuple(int(h) for h in head_sizes) if head_sizes else ()
        return cls("mlp", widths[0], widths[-1], widths, activation, heads)

    # -- layout --------------------------------------------------------------

    @property
    def num_layers(self) -> int:
        """L for deep_linear (number of layers counting the head c)."""
        if self.kind != "deep_linear":
            raise ModelError("num_layers only defined for deep_linear")
        return len(self.widths)

    @property
    def heads(self) -> int:
        return len(self.head_sizes) if self.head_sizes else 0

    def partition(self) -> tuple[tuple[str, int, tuple[int, ...]], ...]:
        blocks: list[tuple[str, tuple[int, ...]]] = []
        if self.kind == "linear":
            blocks = [("w", (self.input_dim,))]
        elif self.kind == "deep_linear":
            w = self.widths
            blocks = [("c", (w[-1],))]
            blocks += [(f"A{i}", (w[i], w[i - 1])) for i in range(1, len(w))]
        elif self.kind == "perceptron":
            m, h = self.widths
            blocks = [("c", (h,)), ("A", (h, m))]
        else:  # mlp
            w = self.widths
            for i in range(1, len(w)):
                blocks.append((f"W{i}", (w[i], w[i - 1])))
                blocks.append((f"b{i}", (w[i],)))
        out = []
        offset = 0
        for name, shape in blocks:
            out.append((name, offset, shape))
            offset += int(np.prod(shape))
        return tuple(out)

    def num_params(self) -> int:
        name, offset, shape = self.partition()[-1]
        return offset + int(np.prod(shape))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "widths": list(self.widths),
            "activation": self.activation,
            "head_sizes": list(self.head_sizes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            d["kind"],
            int(d["input_dim"]),
            int(d["output_dim"]),
            tuple(d.get("widths") or ()),
            d.get("activation"),
            tuple(d.get("head_sizes") or ()),
        )


@dataclass
class ParamVector:
    """Flat float64 parameter vector plus the (name, offset, shape) map."""

    data: np.ndarray
    partition: tuple[tuple[str, int, tuple[int, ...]], ...]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).ravel()
        end = 0
        for name, offset, shape in self.partition:
            if offset != end:
                raise ModelError(f"partition block {name} does not tile the data")
            end = offset + int(np.prod(shape))
        if end != self.data.shape[0]:
            raise ModelError(f"partition covers {end} entries, data has {self.data.shape[0]}")

    def block(self, name: str) -> np.ndarray:
        """View of one block, reshaped columnwise (Fortran order)."""
        for n, offset, shape in self.partition:
            if n == name:
                flat = self.data[offset : offset + int(np.prod(shape))]
                return flat.reshape(shape, order="F")
        raise ModelError(f"no block named {name!r}")

    def block_slice(self, name: str) -> slice:
        for n, offset, shape in self.partition:
            if n == name:
                return slice(offset, offset + int(np.prod(shape)))
        raise ModelError(f"no block named {name!r}")

    def with_block(self, name: str, value: np.ndarray) -> "ParamVector":
        out = self.copy()
        np.copyto(out.block(name), np.asarray(value, dtype=np.float64))
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.partition)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def __len__(self) -> int:
        return self.data.shape[0]


def zeros_like_params(spec: NetworkSpec) -> ParamVector:
    return ParamVector(np.zeros(spec.num_params()), spec.partition())


def params_from_flat(spec: NetworkSpec, flat: np.ndarray) -> ParamVector:
    flat = np.asarray(flat, dtype=np.float64).ravel()
    if flat.shape[0] != spec.num_params():
        raise ModelError(f"expected {spec.num_params()} params, got {flat.shape[0]}")
    return ParamVector(flat.copy(), spec.partition())


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) per block, in partition order."""
    theta = zeros_like_params(spec)
    for name, offset, shape in spec.partition():
        if spec.kind == "linear":
            fan_in = spec.input_dim
        elif spec.kind == "deep_linear":
            fan_in = shape[1] if len(shape) == 2 else spec.widths[-1]
        elif spec.kind == "perceptron":
            fan_in = shape[1] if len(shape) == 2 else spec.widths[1]
        else:  # mlp: W_i and b_i share the layer's fan-in
            idx = int(name[1:])
            fan_in = spec.widths[idx - 1]
        bound = 1.0 / math.sqrt(fan_in)
        size = int(np.prod(shape))
        theta.data[offset : offset + size] = rng.uniform(-bound, bound, size)
    return theta


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _check_inputs(spec: NetworkSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != spec.input_dim:
        raise ModelError(f"input dim {X.shape[1]} != spec input dim {spec.input_dim}")
    return X


def _mlp_caches(spec: NetworkSpec, theta: ParamVector, X: np.ndarray):
    """Layer activations and pre-activations for backprop."""
    acts = [X]
    pres = []
    a = X
    K = len(spec.widths) - 1
    for i in range(1, K + 1):
        z = a @ theta.block(f"W{i}").T + theta.block(f"b{i}")
        pres.append(z)
        a = activation(z, spec.activation) if i < K else z
        acts.append(a)
    return acts, pres


def forward_batch(spec: NetworkSpec, theta: ParamVector, X) -> np.ndarray:
    """Model outputs for a batch, shape (n, output_dim)."""
    X = _check_inputs(spec, X)
    if spec.kind == "linear":
        return (X @ theta.block("w"))[:, None]
    if spec.kind == "deep_linear":
        z = X
        for i in range(1, spec.num_layers):
            z = z @ theta.block(f"A{i}").T
        return (z @ theta.block("c"))[:, None]
    if spec.kind == "perceptron":
        z = activation(X @ theta.block("A").T, spec.activation)
        return (z @ theta.block("c"))[:, None]
    acts, _ = _mlp_caches(spec, theta, X)
    return acts[-1]


def forward(spec: NetworkSpec, theta: ParamVector, x) -> np.ndarray:
    """Model output for a single input, shape (output_dim,)."""
    return forward_batch(spec, theta, np.asarray(x, dtype=np.float64)[None, :])[0]


def effective_predictor(spec: NetworkSpec, theta: ParamVector) -> np.ndarray:
    """w(theta) = A_1^T ... A_{L-1}^T c, the linear map a deep_linear net implements."""
    if spec.kind != "deep_linear":
        raise ModelError("effective_predictor only defined for deep_linear")
    w = theta.block("c").copy()
    for i in range(spec.num_layers - 1, 0, -1):
        w = theta.block(f"A{i}").T @ w
    return w


def tail_product(spec: NetworkSpec, theta: ParamVector) -> np.ndarray:
    """A_2^T ... A_{L-1}^T c for a deep_linear net (equals c when L = 2)."""
    if spec.kind != "deep_linear":
        raise ModelError("tail_product only defined for deep_linear")
    u = theta.block("c").copy()
    for i in range(spec.num_layers - 1, 1, -1):
        u = theta.block(f"A{i}").T @ u
    return u


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def _mlp_backprop(spec: NetworkSpec, theta: ParamVector, acts, pres, seeds: np.ndarray) -> np.ndarray:
    """Flat gradient of sum_n seeds[n] . out[n] for an mlp."""
    K = len(spec.widths) - 1
    grad = np.zeros(len(theta))
    gview = ParamVector(grad, theta.partition)
    G = seeds
    for i in range(K, 0, -1):
        if i < K:
            G = G * activation_prime(pres[i - 1], spec.activation)
        np.copyto(gview.block(f"W{i}"), G.T @ acts[i - 1])
        np.copyto(gview.block(f"b{i}"), G.sum(axis=0))
        if i > 1:
            G = G @ theta.block(f"W{i}")
    return grad


def _mlp_per_sample_grads(spec: NetworkSpec, theta: ParamVector, X: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """Per-sample flat gradients of seeds[n] . out[n], shape (n, d)."""
    acts, pres = _mlp_caches(spec, theta, X)
    K = len(spec.widths) - 1
    n = X.shape[0]
    out = np.zeros((n, len(theta)))
    G = seeds
    tmp = ParamVector(np.zeros(len(theta)), theta.partition)
    for i in range(K, 0, -1):
        if i < K:
            G = G * activation_prime(pres[i - 1], spec.activation)
        sl_w = tmp.block_slice(f"W{i}")
        sl_b = tmp.block_slice(f"b{i}")
        w_shape = theta.block(f"W{i}").shape
        # vec() is columnwise: flatten the (rows, cols) outer product in F order.
        outer = np.einsum("nj,ni->nji", acts[i - 1], G)  # (n, cols, rows)
        out[:, sl_w] = outer.reshape(n, w_shape[0] * w_shape[1])
        out[:, sl_b] = G
        if i > 1:
            G = G @ theta.block(f"W{i}")
    return out


def _deep_linear_layer_inputs(spec: NetworkSpec, theta: ParamVector, X: np.ndarray):
    """Z_0 = X, Z_l = Z_{l-1} A_l^T for l = 1..L-1."""
    zs = [X]
    for i in range(1, spec.num_layers):
        zs.append(zs[-1] @ theta.block(f"A{i}").T)
    return zs


def _scalar_per_sample_grads(spec: NetworkSpec, theta: ParamVector, X: np.ndarray) -> np.ndarray:
    """Per-sample gradients of the scalar output, shape (n, d)."""
    n = X.shape[0]
    out = np.zeros((n, len(theta)))
    tmp = ParamVector(np.zeros(len(theta)), theta.partition)
    if spec.kind == "linear":
        out[:, :] = X
        return out
    if spec.kind == "deep_linear":
        zs = _deep_linear_layer_inputs(spec, theta, X)
        out[:, tmp.block_slice("c")] = zs[-1]
        u = theta.block("c").copy()  # running tail product A_{l+1}^T ... c
        for i in range(spec.num_layers - 1, 0, -1):
            shape = theta.block(f"A{i}").shape
            sl = tmp.block_slice(f"A{i}")
            outer = np.einsum("nj,i->nji", zs[i - 1], u)  # (n, cols, rows), F order
            out[:, sl] = outer.reshape(n, shape[0] * shape[1])
            u = theta.block(f"A{i}").T @ u
        return out
    if spec.kind == "perceptron":
        A = theta.block("A")
        c = theta.block("c")
        Z = X @ A.T
        phi = activation(Z, spec.activation)
        out[:, tmp.block_slice("c")] = phi
        D = activation_prime(Z, spec.activation) * c  # (n, h)
        shape = A.shape
        outer = np.einsum("nj,ni->nji", X, D)
        out[:, tmp.block_slice("A")] = outer.reshape(n, shape[0] * shape[1])
        return out
    raise ModelError("scalar gradients need a scalar-output model")


def model_gradient(spec: NetworkSpec, theta: ParamVector, x, head: int | None = None) -> ParamVector:
    """Exact gradient of the model output at a single input.

    For scalar-output models this is grad_theta f(theta, x).  For
    classification mlps it is the gradient of the unnormalized logit at the
    predicted argmax class of the given head, with the argmax index held
    constant.
    """
    grads = model_gradients_batch(spec, theta, np.asarray(x, dtype=np.float64)[None, :], head=head)
    return ParamVector(grads[0].copy(), theta.partition)


def model_gradients_batch(
    spec: NetworkSpec, theta: ParamVector, X, head: int | None = None
) -> np.ndarray:
    """Per-sample model gradients as rows of an (n_grads, d) array.

    Scalar models give one row per sample.  Classification mlps give the
    argmax-logit gradient; with several heads and head=None the rows are
    sample-major over heads (sample 0 head 0, sample 0 head 1, ...).
    """
    X = _check_inputs(spec, X)
    if spec.kind != "mlp":
        return _scalar_per_sample_grads(spec, theta, X)
    if not spec.head_sizes:
        if spec.output_dim != 1:
            raise ModelError("model_gradient needs a scalar output or classification heads")
        seeds = np.ones((X.shape[0], 1))
        return _mlp_per_sample_grads(spec, theta, X, seeds)
    heads = list(range(spec.heads)) if head is None else [head]
    logits = forward_batch(spec, theta, X)
    n = X.shape[0]
    per_head = []
    for h in heads:
        lo, hi = _head_bounds(spec, h)
        seeds = np.zeros((n, spec.output_dim))
        seeds[np.arange(n), lo + np.argmax(logits[:, lo:hi], axis=1)] = 1.0
        per_head.append(_mlp_per_sample_grads(spec, theta, X, seeds))
    # Sample-major ordering: sample 0 head 0, sample 0 head 1, sample 1 head 0, ...
    stacked = np.stack(per_head, axis=1)
    return stacked.reshape(n * len(heads), -1)


def _head_bounds(spec: NetworkSpec, head: int) -> tuple[int, int]:
    if head < 0 or head >= spec.heads:
        raise ModelError(f"head {head} out of range")
    lo = sum(spec.head_sizes[:head])
    return lo, lo + spec.head_sizes[head]


def backprop_from_seeds(
    spec: NetworkSpec, theta: ParamVector, X, seeds: np.ndarray, caches=None
) -> ParamVector:
    """Gradient of sum_n seeds[n] . f(theta, x_n) as a ParamVector.

    The hook every composite loss (MSE, cross-entropy, KL, preference terms)
    reduces to after differentiating through the outputs.  Pass mlp forward
    caches to avoid recomputing the forward pass.
    """
    X = _check_inputs(spec, X)
    seeds = np.asarray(seeds, dtype=np.float64)
    if seeds.shape != (X.shape[0], spec.output_dim):
        raise ModelError(f"seeds must have shape {(X.shape[0], spec.output_dim)}")
    if spec.kind == "mlp":
        acts, pres = caches if caches is not None else _mlp_caches(spec, theta, X)
        return ParamVector(_mlp_backprop(spec, theta, acts, pres, seeds), theta.partition)
    per = _scalar_per_sample_grads(spec, theta, X)
    return ParamVector(per.T @ seeds[:, 0], theta.partition)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

LOSS_KINDS = ("mse", "cross_entropy")


def softmax_heads(spec: NetworkSpec, logits: np.ndarray) -> np.ndarray:
    """Per-head softmax over the logit groups of a classification mlp."""
    if not spec.head_sizes:
        raise ModelError("softmax_heads needs classification heads")
    probs = np.empty_like(logits)
    for h in range(spec.heads):
        lo, hi = _head_bounds(spec, h)
        z = logits[:, lo:hi]
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs[:, lo:hi] = e / e.sum(axis=1, keepdims=True)
    return probs


def loss_and_grad(spec: NetworkSpec, theta: ParamVector, X, Y, loss_kind: str):
    """Mean batch loss and its exact gradient.

    mse: sample loss ||f(theta, x) - y||^2.  cross_entropy: softmax
    cross-entropy per head (targets one-hot per head group), summed over
    heads.  Both averaged over the batch.
    """
    X = _check_inputs(spec, X)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = X.shape[0]
    if n == 0:
        raise ModelError("empty batch")
    if Y.shape != (n, spec.output_dim):
        raise ModelError(f"targets must have shape {(n, spec.output_dim)}")
    caches = None
    if spec.kind == "mlp":
        caches = _mlp_caches(spec, theta, X)
        out = caches[0][-1]
    else:
        out = forward_batch(spec, theta, X)
    if loss_kind == "mse":
        diff = out - Y
        loss = float(np.mean(np.sum(diff * diff, axis=1)))
        grad = backprop_from_seeds(spec, theta, X, (2.0 / n) * diff, caches=caches)
        return loss, grad
    if loss_kind == "cross_entropy":
        if not spec.head_sizes:
            raise ModelError("cross_entropy needs classification heads")
        probs = softmax_heads(spec, out)
        total = 0.0
        for h in range(spec.heads):
            lo, hi = _head_bounds(spec, h)
            p = probs[:, lo:hi]
            y = Y[:, lo:hi]
            logp = np.log(np.clip(p, 1e-300, None))
            total += float(np.mean(-np.sum(y * logp, axis=1)))
        grad = backprop_from_seeds(spec, theta, X, (probs - Y) / n, caches=caches)
        return total, grad
    raise ModelError(f"unknown loss kind {loss_kind!r}")


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    """Ordered (input, target) pairs with a retain/forget split mask."""

    inputs: np.ndarray
    targets: np.ndarray
    retain_mask: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.retain_mask = np.asarray(self.retain_mask, dtype=bool)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ModelError("inputs and targets must be 2-D arrays")
        n = self.inputs.shape[0]
        if self.targets.shape[0] != n or self.retain_mask.shape != (n,):
            raise ModelError("inputs, targets and retain_mask lengths differ")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def retain_indices(self) -> np.ndarray:
        return np.flatnonzero(self.retain_mask)

    @property
    def forget_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.retain_mask)

    def retain_subset(self) -> "LabeledDataset":
        idx = self.retain_indices
        return LabeledDataset(self.inputs[idx], self.targets[idx], np.ones(len(idx), dtype=bool))

    def forget_subset(self) -> "LabeledDataset":
        idx = self.forget_indices
        return LabeledDataset(self.inputs[idx], self.targets[idx], np.zeros(len(idx), dtype=bool))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    """Decoupled-weight-decay Adam with bias correction."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    _scratch: np.ndarray = field(default=None, repr=False)

    def ensure(self, size: int):
        if self.m is None:
            self.m = np.zeros(size)
            self.v = np.zeros(size)
            self._scratch = np.empty(size)


def adamw_step(state: AdamWState, theta: ParamVector, grad: ParamVector) -> ParamVector:
    """One AdamW update; advances the optimizer state, returns new parameters."""
    if len(theta) != len(grad):
        raise ModelError("theta and grad lengths differ")
    state.ensure(len(theta))
    state.step += 1
    g = grad.data
    buf = state._scratch
    state.m *= state.beta1
    np.multiply(g, 1.0 - state.beta1, out=buf)
    state.m += buf
    state.v *= state.beta2
    np.multiply(g, g, out=buf)
    buf *= 1.0 - state.beta2
    state.v += buf
    np.divide(state.v, 1.0 - state.beta2 ** state.step, out=buf)
    np.sqrt(buf, out=buf)
    buf += state.eps
    buf *= 1.0 - state.beta1 ** state.step
    np.divide(state.m, buf, out=buf)
    new = theta.data * (1.0 - state.lr * state.weight_decay)
    buf *= state.lr
    new -= buf
    return ParamVector(new, theta.partition)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(
    spec: NetworkSpec,
    dataset: LabeledDataset,
    loss_kind: str,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    weight_decay: float = 0.01,
    target_loss: float | None = None,
    optimizer: str = "adamw",
    init_theta: ParamVector | None = None,
    lr_min: float | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    on_epoch=None,
) -> ParamVector:
    """Seeded mini-batch training loop; returns the final parameters.

    Batches are reshuffled each epoch from the trial RNG and the final
    partial batch is kept.  With target_loss set, stops early once the epoch
    mean loss reaches it.  With lr_min set, the learning rate follows a
    cosine anneal from lr down to lr_min across the epoch budget.
    optimizer="gd" takes plain gradient steps instead of AdamW.
    on_epoch(epoch, loss, theta) is called after each epoch.
    """
    if epochs < 1:
        raise ModelError("epochs must be >= 1")
    ss = np.random.SeedSequence(seed)
    rng_init, rng_shuffle = (np.random.default_rng(s) for s in ss.spawn(2))
    theta = init_theta.copy() if init_theta is not None else init_params(spec, rng_init)
    state = AdamWState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
    n = len(dataset)
    for epoch in range(epochs):
        if lr_min is not None and epochs > 1:
            state.lr = lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))
        order = rng_shuffle.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grad = loss_and_grad(spec, theta, dataset.inputs[idx], dataset.targets[idx], loss_kind)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            losses.append(loss)
            if optimizer == "adamw":
                theta = adamw_step(state, theta, grad)
            elif optimizer == "gd":
                theta = ParamVector(theta.data - lr * grad.data, theta.partition)
            else:
                raise ModelError(f"unknown optimizer {optimizer!r}")
        epoch_loss = float(np.mean(losses))
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss, theta)
        if target_loss is not None and epoch_loss <= target_loss:
            break
    return theta


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _format_float(x: float) -> str:
    return format(float(x), ".17g")


def dumps_json_17g(obj) -> str:
    """JSON text with every float rendered at 17 significant digits.

    17 decimal digits round-trip any float64 exactly, and the fixed format
    keeps serialized artifacts byte-stable across runs.
    """

    def render(o):
        if isinstance(o, bool) or o is None or isinstance(o, (int, str)):
            return json.dumps(o)
        if isinstance(o, float):
            return _format_float(o)
        if isinstance(o, (np.floating,)):
            return _format_float(float(o))
        if isinstance(o, (np.integer,)):
            return json.dumps(int(o))
        if isinstance(o, np.ndarray):
            return render(o.tolist())
        if isinstance(o, (list, tuple)):
            return "[" + ", ".join(render(v) for v in o) + "]"
        if isinstance(o, dict):
            items = (json.dumps(str(k)) + ": " + render(v) for k, v in o.items())
            return "{" + ", ".join(items) + "}"
        raise TypeError(f"cannot serialize {type(o)!r}")

    return render(obj)


def save_checkpoint(path, spec: NetworkSpec, theta: ParamVector, seed: int, epoch: int):
    doc = {
        "spec": spec.to_dict(),
        "partition": [[name, offset, list(shape)] for name, offset, shape in theta.partition],
        "data": theta.data,
        "seed": int(seed),
        "epoch": int(epoch),
    }
    with open(path, "w") as fh:
        fh.write(dumps_json_17g(doc))
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    spec = NetworkSpec.from_dict(doc["spec"])
    theta = params_from_flat(spec, np.array(doc["data"], dtype=np.float64))
    return spec, theta, int(doc["seed"]), int(doc["epoch"])
