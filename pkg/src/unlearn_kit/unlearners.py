"""Iterative unlearning methods behind one uniform interface.

MinNorm-OG alternates AdamW descent on the retained loss with a closed-form
shrinkage of the parameters toward the span of retained model gradients.
The baselines (gd, ga, ngd, ngp, npo, scrub, ridge) each take one AdamW step
per batch on their own effective loss.

Batching protocol shared by every method: an epoch iterates over shuffled
forget-set batches; for each one, a retain batch is served from the
accessible fraction of the retain set, cycling through a fixed shuffled
order without discarding samples.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from unlearn_kit import numkit
from unlearn_kit.models import (
    AdamWState,
    LabeledDataset,
    NetworkSpec,
    ParamVector,
    adamw_step,
    backprop_from_seeds,
    dumps_json_17g,
    forward_batch,
    loss_and_grad,
    model_gradients_batch,
    softmax_heads,
)

logger = logging.getLogger(__name__)

METHODS = ("minnorm-og", "gd", "ga", "ngd", "ngp", "npo", "scrub", "ridge")
CLASSIFICATION_ONLY = ("npo", "scrub")

ORTHOGONALITY_TOL = 1e-8


class UnlearnConfigError(ValueError):
    """Invalid method/hyperparameter combination."""


class UnlearnDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"unlearning diverged at epoch {epoch}")
        self.epoch = epoch


@dataclass
class UnlearnConfig:
    """Hyperparameters for one unlearning run.

    Field names follow the harness config schema: eta (learning rate),
    lambda_ga (ascent coefficient), lambda_reg (regularization coefficient),
    sigma (gradient noise), t_gd (final descent-only epochs), gamma_reg
    (regularization decay), t_proj (projection period), n_pert (gradient
    subsample size), p_retain (accessible retain fraction).  Fields unused by
    a method are ignored.
    """

    method: str
    epochs: int
    eta: float = 1e-3
    lambda_ga: float = 1.0
    lambda_reg: float = 1.0
    sigma: float = 0.0
    t_gd: int = 0
    gamma_reg: float = 1.0
    t_proj: int = 1
    n_pert: int = 1
    batch_size: int = 32
    p_retain: float = 1.0
    seed: int = 0
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    loss_kind: str = "mse"

    def validate(self, spec: NetworkSpec | None = None):
        if self.method not in METHODS:
            raise UnlearnConfigError(f"unknown method {self.method!r}")
        if self.epochs < 1:
            raise UnlearnConfigError("epochs must be >= 1")
        if not 0.0 < self.gamma_reg <= 1.0:
            raise UnlearnConfigError("gamma_reg must lie in (0, 1]")
        if self.method == "minnorm-og" and not 0.0 < self.lambda_reg <= 1.0:
            raise UnlearnConfigError("lambda_reg must lie in (0, 1] for minnorm-og")
        if self.n_pert < 1:
            raise UnlearnConfigError("n_pert must be >= 1")
        if self.t_proj < 1:
            raise UnlearnConfigError("t_proj must be >= 1")
        if not 0.0 < self.p_retain <= 1.0:
            raise UnlearnConfigError("p_retain must lie in (0, 1]")
        if self.batch_size < 1:
            raise UnlearnConfigError("batch_size must be >= 1")
        if spec is not None and self.method in CLASSIFICATION_ONLY and not spec.head_sizes:
            raise UnlearnConfigError(f"{self.method} requires a classification head")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "epochs": self.epochs,
            "eta": self.eta,
            "lambda_ga": self.lambda_ga,
            "lambda_reg": self.lambda_reg,
            "sigma": self.sigma,
            "t_gd": self.t_gd,
            "gamma_reg": self.gamma_reg,
            "t_proj": self.t_proj,
            "n_pert": self.n_pert,
            "batch_size": self.batch_size,
            "p_retain": self.p_retain,
            "seed": self.seed,
            "weight_decay": self.weight_decay,
            "adam_eps": self.adam_eps,
            "loss_kind": self.loss_kind,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(dumps_json_17g(self.to_dict()).encode()).hexdigest()[:16]


@dataclass
class RunReport:
    """Per-run record: identity, loss trace, metrics, timing, artifacts."""

    method: str
    seed: int
    config_hash: str
    loss_trace: list[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    checkpoint_path: str | None = None
    extras: dict = field(default_factory=dict)
    theta: ParamVector | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "loss_trace": self.loss_trace,
            "metrics": self.metrics,
            "wall_seconds": self.wall_seconds,
            "checkpoint_path": self.checkpoint_path,
            "extras": self.extras,
        }


# ---------------------------------------------------------------------------
# MinNorm-OG projection step
# ---------------------------------------------------------------------------

def minnorm_og_step(
    spec: NetworkSpec, theta: ParamVector, retain_inputs, lam: float, n_pert: int
) -> ParamVector:
    """One regularized minimum-norm update under the orthogonal-gradient constraint.

    Takes the first n_pert samples of the batch, spans their model gradients,
    and moves theta by -(1/(1+lam)) times its component outside that span,
    the unique minimizer of ||theta + d||^2 + lam ||d||^2 over d orthogonal
    to every sampled gradient.  The returned update is checked to be
    orthogonal to each gradient.
    """
    if not (lam >= 0.0 and math.isfinite(lam)):
        raise UnlearnConfigError("lam must be finite and >= 0")
    X = np.atleast_2d(np.asarray(retain_inputs, dtype=np.float64))[: int(n_pert)]
    grads = model_gradients_batch(spec, theta, X)
    basis = numkit.orthonormalize(grads, ambient_dim=len(theta))
    if len(basis) == 0:
        # Literal closed form with an empty span: shrink theta toward zero.
        logger.warning("all sampled gradients vanished; projection shrinks theta globally")
    delta = -(1.0 / (1.0 + lam)) * numkit.project_complement(theta.data, basis)
    if grads.shape[0]:
        worst = float(np.max(np.abs(grads @ delta)))
        if worst > ORTHOGONALITY_TOL:
            raise RuntimeError(f"projection lost gradient orthogonality ({worst:.3e})")
    return ParamVector(theta.data + delta, theta.partition)


# ---------------------------------------------------------------------------
# Shared batched engine
# ---------------------------------------------------------------------------

class _RetainCycler:
    """Serves retain batches from a fixed shuffled pool, wrapping around."""

    def __init__(self, pool: np.ndarray):
        self.pool = pool
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        k = min(k, len(self.pool))
        out = []
        while len(out) < k:
            grab = self.pool[self.pos : self.pos + k - len(out)]
            out.extend(grab.tolist())
            self.pos += len(grab)
            if self.pos >= len(self.pool):
                self.pos = 0
        return np.array(out, dtype=int)


def _kl_seeds_and_loss(spec, theta, X, ref_probs, scale):
    """KL(ref || model) summed over heads, mean over batch, with backprop seeds."""
    logits = forward_batch(spec, theta, X)
    probs = softmax_heads(spec, logits)
    logp = np.log(np.clip(probs, 1e-300, None))
    logref = np.log(np.clip(ref_probs, 1e-300, None))
    kl = float(np.mean(np.sum(ref_probs * (logref - logp), axis=1)))
    seeds = scale * (probs - ref_probs) / X.shape[0]
    return kl * scale, seeds


def _npo_loss_and_grad(spec, theta, X, Y, ref_probs, beta):
    """Preference-style ascent on the forget batch, per head, mean over batch."""
    n = X.shape[0]
    logits = forward_batch(spec, theta, X)
    probs = softmax_heads(spec, logits)
    logp = np.log(np.clip(probs, 1e-300, None))
    logref = np.log(np.clip(ref_probs, 1e-300, None))
    seeds = np.zeros_like(logits)
    total = 0.0
    offset = 0
    for h, size in enumerate(spec.head_sizes):
        sl = slice(offset, offset + size)
        cls = np.argmax(Y[:, sl], axis=1)
        rows = np.arange(n)
        u = logp[:, sl][rows, cls] - logref[:, sl][rows, cls]
        total += float(np.mean((2.0 / beta) * np.logaddexp(0.0, beta * u)))
        sig = 1.0 / (1.0 + np.exp(-beta * u))
        coef = 2.0 * sig / n  # (n,)
        e_y = np.zeros((n, size))
        e_y[rows, cls] = 1.0
        seeds[:, sl] = coef[:, None] * (e_y - probs[:, sl])
        offset += size
    return total, seeds


def _run(spec: NetworkSpec, theta_star: ParamVector, dataset: LabeledDataset, config: UnlearnConfig) -> RunReport:
    config.validate(spec)
    method = config.method
    start = time.perf_counter()
    ss = np.random.SeedSequence(config.seed)
    rng_shuffle, rng_noise, rng_pool = (np.random.default_rng(s) for s in ss.spawn(3))

    retain_idx = dataset.retain_indices
    forget_idx = dataset.forget_indices
    if len(retain_idx) == 0:
        raise UnlearnConfigError("dataset has no retained samples")
    n_accessible = max(1, math.ceil(config.p_retain * len(retain_idx)))
    pool = rng_pool.permutation(retain_idx)[:n_accessible]
    cycler = _RetainCycler(rng_pool.permutation(pool))
    logger.info("accessible retain count: %d of %d", n_accessible, len(retain_idx))

    if method in ("ga", "ngp", "npo") and len(forget_idx) == 0:
        raise UnlearnConfigError(f"{method} needs forget samples")

    ref_probs_cache: dict[bytes, np.ndarray] = {}

    def ref_probs(X):
        key = X.tobytes()
        if key not in ref_probs_cache:
            ref_probs_cache[key] = softmax_heads(spec, forward_batch(spec, theta_star, X))
        return ref_probs_cache[key]

    theta = theta_star.copy()
    opt = AdamWState(lr=config.eta, eps=config.adam_eps, weight_decay=config.weight_decay)
    lam = (1.0 / config.lambda_reg - 1.0) if method == "minnorm-og" else config.lambda_reg
    T = config.epochs
    trace: list[float] = []
    extras: dict = {"accessible_retain": int(n_accessible)}
    if method == "minnorm-og":
        extras["projection_strengths"] = []
    if method == "ridge":
        extras["lambda_trace"] = []

    for t in range(T):
        if len(forget_idx):
            order = rng_shuffle.permutation(forget_idx)
            forget_batches = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        else:
            forget_batches = [np.array([], dtype=int)]
        losses = []
        for fb in forget_batches:
            rb = cycler.take(config.batch_size)
            Xr, Yr = dataset.inputs[rb], dataset.targets[rb]
            Xf, Yf = dataset.inputs[fb], dataset.targets[fb]

            if method in ("gd", "minnorm-og"):
                loss, grad = loss_and_grad(spec, theta, Xr, Yr, config.loss_kind)
            elif method == "ga":
                fl, fg = loss_and_grad(spec, theta, Xf, Yf, config.loss_kind)
                loss, grad = -fl, ParamVector(-fg.data, theta.partition)
            elif method == "ngd":
                loss, grad = loss_and_grad(spec, theta, Xr, Yr, config.loss_kind)
                xi = config.sigma * rng_noise.standard_normal(len(theta))
                loss = loss + float(theta.data @ xi)
                grad = ParamVector(grad.data + xi, theta.partition)
            elif method == "ngp":
                rl, rg = loss_and_grad(spec, theta, Xr, Yr, config.loss_kind)
                fl, fg = loss_and_grad(spec, theta, Xf, Yf, config.loss_kind)
                loss = rl - config.lambda_ga * fl
                grad = ParamVector(rg.data - config.lambda_ga * fg.data, theta.partition)
            elif method == "ridge":
                loss, grad = loss_and_grad(spec, theta, Xr, Yr, config.loss_kind)
                loss = loss + lam * float(theta.data @ theta.data)
                grad = ParamVector(grad.data + 2.0 * lam * theta.data, theta.partition)
            elif method == "npo":
                loss, seeds = _npo_loss_and_grad(spec, theta, Xf, Yf, ref_probs(Xf), config.lambda_ga)
                grad = backprop_from_seeds(spec, theta, Xf, seeds)
            elif method == "scrub":
                if t % 2 == 0 or t >= T - config.t_gd:
                    loss, grad = loss_and_grad(spec, theta, Xr, Yr, config.loss_kind)
                    kl, seeds = _kl_seeds_and_loss(spec, theta, Xr, ref_probs(Xr), config.lambda_reg)
                    loss = loss + kl
                    grad = ParamVector(grad.data + backprop_from_seeds(spec, theta, Xr, seeds).data, theta.partition)
                else:
                    kl, seeds = _kl_seeds_and_loss(spec, theta, Xf, ref_probs(Xf), -config.lambda_ga)
                    loss = kl
                    grad = backprop_from_seeds(spec, theta, Xf, seeds)
            else:  # pragma: no cover
                raise UnlearnConfigError(f"unhandled method {method!r}")

            if not np.isfinite(loss):
                raise UnlearnDiverged(t)
            losses.append(loss)
            theta = adamw_step(opt, theta, grad)

            # Descent first, then the projection (when this epoch projects).
            if method == "minnorm-og" and t % config.t_proj == 0 and t < T - config.t_gd:
                theta = minnorm_og_step(spec, theta, Xr, lam, config.n_pert)
                extras["projection_strengths"].append(1.0 / (1.0 + lam))
                lam = (lam + 1.0) / config.gamma_reg - 1.0
            if method == "ridge":
                lam = config.gamma_reg * lam
                extras["lambda_trace"].append(lam)
        trace.append(float(np.mean(losses)))

    report = RunReport(
        method=method,
        seed=config.seed,
        config_hash=config.config_hash(),
        loss_trace=trace,
        extras=extras,
        theta=theta,
    )
    report.wall_seconds = time.perf_counter() - start
    return report


def run_minnorm_og(spec: NetworkSpec, theta_star: ParamVector, dataset: LabeledDataset, config: UnlearnConfig) -> RunReport:
    """Run MinNorm-OG: AdamW retain descent plus scheduled gradient-span shrinkage.

    The shrinkage strength starts at lambda_reg and is multiplied by
    gamma_reg after every projection; projections fire on epochs divisible
    by t_proj, and the final t_gd epochs are descent only.
    """
    if config.method != "minnorm-og":
        raise UnlearnConfigError("config.method must be 'minnorm-og'")
    return _run(spec, theta_star, dataset, config)


def run_baseline(spec: NetworkSpec, theta_star: ParamVector, dataset: LabeledDataset, config: UnlearnConfig) -> RunReport:
    """Run one of the baseline methods (gd, ga, ngd, ngp, npo, scrub, ridge)."""
    if config.method == "minnorm-og":
        raise UnlearnConfigError("use run_minnorm_og for minnorm-og")
    return _run(spec, theta_star, dataset, config)


def run_unlearn(spec: NetworkSpec, theta_star: ParamVector, dataset: LabeledDataset, config: UnlearnConfig) -> RunReport:
    """Dispatch on config.method."""
    if config.method == "minnorm-og":
        return run_minnorm_og(spec, theta_star, dataset, config)
    return run_baseline(spec, theta_star, dataset, config)


# ---------------------------------------------------------------------------
# Pure loss-gradient updates
# ---------------------------------------------------------------------------

def loss_gradient_run(
    spec: NetworkSpec,
    theta_star: ParamVector,
    dataset: LabeledDataset,
    method: str,
    epochs: int,
    eta: float,
    lambda_ga: float = 1.0,
    sigma: float = 0.0,
    seed: int = 0,
    loss_kind: str = "mse",
):
    """Full-batch loss-gradient unlearning in its definitional form.

    One update per epoch of theta <- theta - P_r grad J_r + P_f grad J_f + xi
    with P = eta * I.  At an interpolator both loss gradients vanish, so
    gd/ga/ngp leave theta fixed and ngd moves it by the injected noise alone.
    Returns (theta, per-epoch movement norms).
    """
    if method not in ("gd", "ga", "ngd", "ngp"):
        raise UnlearnConfigError(f"no pure loss-gradient form for {method!r}")
    rng = np.random.default_rng(seed)
    retain = dataset.retain_subset()
    forget = dataset.forget_subset()
    theta = theta_star.copy()
    movements = []
    for _ in range(epochs):
        step = np.zeros(len(theta))
        if method in ("gd", "ngd", "ngp"):
            _, gr = loss_and_grad(spec, theta, retain.inputs, retain.targets, loss_kind)
            step -= eta * gr.data
        if method in ("ga", "ngp") and len(forget):
            _, gf = loss_and_grad(spec, theta, forget.inputs, forget.targets, loss_kind)
            coef = eta if method == "ga" else eta * lambda_ga
            step += coef * gf.data
        if method == "ngd":
            step -= eta * sigma * rng.standard_normal(len(theta))
        theta = ParamVector(theta.data + step, theta.partition)
        movements.append(float(np.linalg.norm(step)))
    return theta, movements
