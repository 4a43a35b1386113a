"""Closed-form unlearning solvers for the three tractable model classes.

Each solver starts from an interpolating model and returns parameters that
solve (or are feasible for) the minimum-complexity unlearning problem over
the retained samples, perturbing only along directions orthogonal to the
retained model gradients.  Postconditions are asserted numerically inside
each solver, so a returned value is already certified against its contract.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from unlearn_kit import numkit
from unlearn_kit.models import LabeledDataset, NetworkSpec, ParamVector, effective_predictor, forward_batch, tail_product

ACTIVE_NEURON_TOL = 1e-9  # |c_i| * ||a_i|| above this counts as an active neuron
ZERO_SNAP_TOL = 1e-12


class ExactSolveError(ValueError):
    """Solver precondition or asserted postcondition failed."""


def _check(cond: bool, msg: str):
    if not cond:
        raise ExactSolveError(msg)


# ---------------------------------------------------------------------------
# Linear model
# ---------------------------------------------------------------------------

def linear_min_norm_unlearn(theta_star: ParamVector, retain_inputs) -> ParamVector:
    """Minimum-norm unlearned linear model: project theta* onto span of retain inputs.

    Assumes theta* interpolates the full dataset; the projection then equals
    the minimum-norm interpolator of the retained samples alone.
    """
    basis = numkit.orthonormalize(retain_inputs)
    if basis.ambient_dim != len(theta_star):
        raise ExactSolveError(
            f"retain inputs have dim {basis.ambient_dim}, theta has {len(theta_star)}"
        )
    return ParamVector(numkit.project(theta_star.data, basis), theta_star.partition)


# ---------------------------------------------------------------------------
# Deep linear network
# ---------------------------------------------------------------------------

def deep_linear_predictor_unlearn(
    spec: NetworkSpec, theta_star: ParamVector, retain_inputs
) -> ParamVector:
    """Minimum-predictor-norm unlearning for an L-layer linear network.

    Writes the whole update into the first layer:

        dA_1 = -||u||^{-2} u p^T,  u = A_2^T ... A_{L-1}^T c,
                                   p = component of w(theta*) outside span(retain inputs)

    which is orthogonal to every retained model gradient and moves the
    effective predictor to its projection onto the retain input span, the
    minimum-norm predictor that still fits the retained samples.
    """
    if spec.kind != "deep_linear":
        raise ExactSolveError("deep_linear_predictor_unlearn needs a deep_linear spec")
    retain_X = np.atleast_2d(np.asarray(retain_inputs, dtype=np.float64))
    u = tail_product(spec, theta_star)
    u_norm = np.linalg.norm(u)
    if u_norm <= 1e-10:
        raise ExactSolveError("degenerate network: predictor head is zero")
    w = effective_predictor(spec, theta_star)
    basis = numkit.orthonormalize(retain_X)
    p = numkit.project_complement(w, basis)
    theta = theta_star.copy()
    A1 = theta.block("A1")
    A1 -= np.outer(u, p) / (u_norm**2)

    # Postconditions: gradient-orthogonal update, projected predictor,
    # agreement with the pseudoinverse retraining oracle.
    from unlearn_kit.models import model_gradients_batch  # local import avoids cycle at module load

    delta = theta.data - theta_star.data
    grads = model_gradients_batch(spec, theta_star, retain_X)
    inner = grads @ delta
    _check(np.max(np.abs(inner)) <= 1e-8, "update not orthogonal to retained gradients")
    w_new = effective_predictor(spec, theta)
    _check(
        np.max(np.abs(w_new - numkit.project(w, basis))) <= 1e-8,
        "predictor did not land on its retain-span projection",
    )
    y_r = retain_X @ w
    oracle = numkit.min_norm_least_squares(retain_X, y_r)
    _check(np.max(np.abs(w_new - oracle)) <= 1e-8, "predictor differs from min-norm oracle")
    return theta


def deep_linear_param_norm_construct(
    spec: NetworkSpec, w_hat, unit_dirs=None
) -> ParamVector:
    """Minimum total-parameter-norm factorization realizing a given predictor.

    Balanced rank-one layers: with rho = ||w_hat||, the first layer carries
    rho^{(1-L)/L} v_1 w_hat^T and every later factor carries weight rho^{1/L},
    so each of the L blocks contributes exactly rho^{2/L} squared norm, the
    AM-GM optimum over all factorizations of the same predictor.
    """
    if spec.kind != "deep_linear":
        raise ExactSolveError("deep_linear_param_norm_construct needs a deep_linear spec")
    w_hat = numkit.as_vector(w_hat, "w_hat")
    if w_hat.shape[0] != spec.input_dim:
        raise ExactSolveError("w_hat dimension does not match the spec input dim")
    rho = float(np.linalg.norm(w_hat))
    if rho == 0.0:
        raise ExactSolveError("w_hat must be nonzero")
    L = spec.num_layers
    if unit_dirs is None:
        unit_dirs = []
        for ell in range(1, L):
            e = np.zeros(spec.widths[ell])
            e[0] = 1.0
            unit_dirs.append(e)
    dirs = [numkit.as_vector(v, "unit direction") for v in unit_dirs]
    _check(len(dirs) == L - 1, f"need {L - 1} unit directions, got {len(dirs)}")
    for ell, v in enumerate(dirs, start=1):
        _check(v.shape[0] == spec.widths[ell], f"unit direction {ell} has wrong dimension")
        _check(abs(np.linalg.norm(v) - 1.0) <= 1e-12, f"direction {ell} is not unit norm")

    from unlearn_kit.models import zeros_like_params

    theta = zeros_like_params(spec)
    np.copyto(theta.block("A1"), rho ** ((1.0 - L) / L) * np.outer(dirs[0], w_hat))
    for ell in range(2, L):
        np.copyto(theta.block(f"A{ell}"), rho ** (1.0 / L) * np.outer(dirs[ell - 1], dirs[ell - 2]))
    np.copyto(theta.block("c"), rho ** (1.0 / L) * dirs[-1])

    w_real = effective_predictor(spec, theta)
    _check(np.max(np.abs(w_real - w_hat)) <= 1e-10, "construction does not realize w_hat")
    target = L * rho ** (2.0 / L)
    sq = float(theta.data @ theta.data)
    _check(abs(sq - target) <= 1e-10 * max(1.0, target), "construction misses the optimal norm")
    return theta


# ---------------------------------------------------------------------------
# Two-layer perceptron
# ---------------------------------------------------------------------------

def active_neurons(theta: ParamVector, tol: float = ACTIVE_NEURON_TOL) -> int:
    """Number of neurons with |c_i| * ||a_i|| above tol (the network width)."""
    c = theta.block("c")
    A = theta.block("A")
    return int(np.sum(np.abs(c) * np.linalg.norm(A, axis=1) > tol))


def _complement_basis(basis: numkit.OrthonormalBasis) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement, built from e_1, e_2, ... in index order."""
    h = basis.ambient_dim
    vectors = list(basis.vectors)
    comp = []
    for i in range(h):
        u = np.zeros(h)
        u[i] = 1.0
        for _ in range(2):
            for b in vectors:
                u -= (u @ b) * b
            for b in comp:
                u -= (u @ b) * b
        norm = np.linalg.norm(u)
        if norm > numkit.REL_TOL:
            comp.append(u / norm)
        if len(vectors) + len(comp) == h:
            break
    return np.array(comp) if comp else np.zeros((0, h))


def perceptron_prune(
    spec: NetworkSpec, theta_star: ParamVector, retain_inputs, retain_targets
) -> ParamVector:
    """Sparsify the output layer of an interpolating perceptron.

    Builds the feature matrix Phi with columns phi(A* x) over the retained
    inputs, takes a basis of the orthogonal complement of its column span,
    reduces that basis to column echelon form, and cancels one entry of c*
    per leading one.  The perturbation stays orthogonal to every feature
    column, so retained outputs are unchanged, and the surviving width is at
    most rank(Phi) <= number of retained samples.
    """
    if spec.kind != "perceptron":
        raise ExactSolveError("perceptron_prune needs a perceptron spec")
    retain_X = np.atleast_2d(np.asarray(retain_inputs, dtype=np.float64))
    y = np.asarray(retain_targets, dtype=np.float64).ravel()
    n_r = retain_X.shape[0]
    _check(y.shape[0] == n_r, "retain inputs/targets length mismatch")

    out = forward_batch(spec, theta_star, retain_X)[:, 0]
    scale = max(1.0, float(np.max(np.abs(y))) if n_r else 1.0)
    _check(
        np.max(np.abs(out - y)) <= 1e-8 * scale,
        "theta_star does not interpolate the retained samples",
    )

    from unlearn_kit.models import activation as act

    h = spec.widths[1]
    Phi = act(retain_X @ theta_star.block("A").T, spec.activation).T  # (h, n_r)
    feat_basis = numkit.orthonormalize(Phi.T)  # rows are feature vectors
    s = len(feat_basis)
    comp = _complement_basis(feat_basis)  # (h - s, h)
    c_new = theta_star.block("c").copy()
    if comp.shape[0]:
        P = numkit.reduced_column_echelon(comp.T)  # (h, h - s)
        # One cancellation per leading one, accumulated left to right.
        for j in range(P.shape[1]):
            col = P[:, j]
            nz = np.flatnonzero(col)
            if nz.size == 0:
                continue
            lead = nz[0]
            c_new += -c_new[lead] * col
            c_new[lead] = 0.0
    theta = theta_star.with_block("c", c_new)

    # Postconditions: retained outputs preserved, width bound, orthogonality.
    out_new = forward_batch(spec, theta, retain_X)[:, 0]
    _check(np.max(np.abs(out_new - y)) <= 1e-8 * scale, "pruned network lost interpolation")
    _check(active_neurons(theta) <= s, "active neurons exceed the feature rank")
    _check(s <= n_r, "feature rank exceeds the retained sample count")
    delta_c = c_new - theta_star.block("c")
    if n_r:
        _check(
            np.max(np.abs(Phi.T @ delta_c)) <= 1e-8 * max(1.0, float(np.max(np.abs(Phi)))),
            "perturbation not orthogonal to the feature columns",
        )
    return theta


def sparsify_first_layer(spec: NetworkSpec, theta: ParamVector) -> ParamVector:
    """Zero the first-layer rows of neurons whose output weight is zero.

    A_hat = (1_{c != 0} 1^T) * A.  Asserted on the result: function values
    agree with the input on 100 random probes, the active-neuron count is
    unchanged, and the number of nonzero rows of A_hat is at most that
    count.
    """
    if spec.kind != "perceptron":
        raise ExactSolveError("sparsify_first_layer needs a perceptron spec")
    c = theta.block("c")
    A = theta.block("A").copy()
    zero_c = np.abs(c) <= ZERO_SNAP_TOL * max(1.0, float(np.max(np.abs(c))) if c.size else 1.0)
    A[zero_c, :] = 0.0
    out = theta.with_block("A", A)

    probes = np.random.default_rng(0).normal(size=(100, spec.input_dim))
    before = forward_batch(spec, theta, probes)
    after = forward_batch(spec, out, probes)
    _check(np.max(np.abs(before - after)) <= 1e-10, "row sparsification changed function values")
    _check(active_neurons(out) == active_neurons(theta), "row sparsification changed the width")
    nonzero_rows = int(np.sum(np.any(A != 0.0, axis=1)))
    _check(nonzero_rows <= active_neurons(out), "more nonzero rows than active neurons")
    return out


# ---------------------------------------------------------------------------
# Fixed counterexample: linearized constraints alone lose feasibility
# ---------------------------------------------------------------------------

class Counterexample(NamedTuple):
    dataset: LabeledDataset
    theta_star: ParamVector
    delta: ParamVector
    spec: NetworkSpec


def counterexample_c41(ambient_dim: int = 3) -> Counterexample:
    """Two-layer linear instance where a linearized-feasible step breaks retention.

    The dataset is {(e_1, 1), (e_2, 1)} with e_2 forgotten; the perturbation
    (delta_c, delta_A) = (-e_3, e_3 e_1^T - e_2 e_2^T - e_3 e_3^T) satisfies
    the gradient-orthogonality constraint exactly, yet collapses the
    effective predictor to zero, so the updated model no longer fits the
    retained sample.  Demonstrates that drift must be regularized, not just
    constrained to first order.
    """
    m = int(ambient_dim)
    if m < 3:
        raise ExactSolveError("counterexample needs ambient dimension >= 3")
    spec = NetworkSpec.deep_linear((m, m))
    e = np.eye(m)
    inputs = np.stack([e[0], e[1]])
    targets = np.array([[1.0], [1.0]])
    dataset = LabeledDataset(inputs, targets, np.array([True, False]))

    from unlearn_kit.models import zeros_like_params

    theta_star = zeros_like_params(spec)
    np.copyto(theta_star.block("c"), e[0] + e[1])
    np.copyto(theta_star.block("A1"), np.eye(m))

    delta = zeros_like_params(spec)
    np.copyto(delta.block("c"), -e[2])
    np.copyto(delta.block("A1"), np.outer(e[2], e[0]) - np.outer(e[1], e[1]) - np.outer(e[2], e[2]))
    return Counterexample(dataset, theta_star, delta, spec)
