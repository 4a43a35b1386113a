"""Oracle suite behind `unlearn-kit verify`.

Every closed-form solver and structural claim is checked against an
independent reference: pseudoinverse/SVD solves, random feasible-point
sampling, finite differences, or exact hand arithmetic.  Each check reports
its worst residual so regressions are visible before they cross a tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from unlearn_kit import exact, numkit, unlearners
from unlearn_kit.models import (
    LabeledDataset,
    NetworkSpec,
    ParamVector,
    effective_predictor,
    forward_batch,
    init_params,
    loss_and_grad,
    model_gradients_batch,
    train,
    zeros_like_params,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_residual: float
    detail: str = ""


def _svd_project(theta: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Projection of theta onto the row space of `rows`, via SVD (independent path)."""
    if rows.size == 0:
        return np.zeros_like(theta)
    _, s, vt = np.linalg.svd(rows, full_matrices=False)
    rank = int(np.sum(s > 1e-10 * (s[0] if s.size else 1.0)))
    v = vt[:rank]
    return v.T @ (v @ theta)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def check_orthonormal_basis(trials: int = 200) -> CheckResult:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(trials):
        dim = int(rng.integers(2, 33))
        count = int(rng.integers(1, dim + 8))
        basis = numkit.orthonormalize(rng.normal(size=(count, dim)))
        if len(basis):
            gram = basis.vectors @ basis.vectors.T
            worst = max(worst, float(np.max(np.abs(gram - np.eye(len(basis))))))
    return CheckResult("orthonormal-basis", worst <= 1e-10, worst)


def check_projection_identities(trials: int = 200) -> CheckResult:
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(trials):
        dim = int(rng.integers(2, 24))
        basis = numkit.orthonormalize(rng.normal(size=(int(rng.integers(1, dim + 1)), dim)))
        x = rng.normal(size=dim)
        p = numkit.project(x, basis)
        q = numkit.project_complement(x, basis)
        worst = max(worst, float(np.max(np.abs(p + q - x))))
        worst = max(worst, float(np.max(np.abs(numkit.project(p, basis) - p))))
        if len(basis):
            worst = max(worst, float(np.max(np.abs(basis.vectors @ q))))
        worst = max(worst, max(0.0, float(np.linalg.norm(p) - np.linalg.norm(x))))
    return CheckResult("projection-identities", worst <= 1e-10, worst)


def check_min_norm_solver(trials: int = 100) -> CheckResult:
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(trials):
        m = int(rng.integers(3, 24))
        n = int(rng.integers(1, m))
        X = rng.normal(size=(n, m))
        y = rng.normal(size=n)
        w = numkit.min_norm_least_squares(X, y)
        worst = max(worst, float(np.max(np.abs(X @ w - y))))
        # w must live in the row space: component outside it is zero.
        worst = max(worst, float(np.max(np.abs(w - _svd_project(w, X)))))
        # Cross-oracle: the ridgeless limit approaches the min-norm solution.
        # Ridge evaluated through the SVD, the stable route at tiny lambda.
        u, s, vt = np.linalg.svd(X, full_matrices=False)
        ridge = vt.T @ ((s / (s * s + 1e-12)) * (u.T @ y))
        if float(np.max(np.abs(w - ridge))) > 1e-6:
            return CheckResult("min-norm-solver", False, float(np.max(np.abs(w - ridge))), "ridge limit mismatch")
    return CheckResult("min-norm-solver", worst <= 1e-8, worst)


def check_rcef(trials: int = 100) -> CheckResult:
    rng = np.random.default_rng(14)
    worst = 0.0
    for _ in range(trials):
        rows = int(rng.integers(2, 16))
        cols = int(rng.integers(1, 10))
        P = rng.normal(size=(rows, cols))
        if rng.random() < 0.3 and cols >= 2:
            P[:, -1] = P[:, 0] * rng.normal()  # force a dependent column
        R = numkit.reduced_column_echelon(P)
        lead_rows = []
        for j in range(R.shape[1]):
            nz = np.flatnonzero(R[:, j])
            if nz.size == 0:
                continue
            lead = nz[0]
            if abs(R[lead, j] - 1.0) > 1e-12:
                return CheckResult("rcef-structure", False, abs(R[lead, j] - 1.0), "leading entry not 1")
            others = np.delete(R[lead, :], j)
            if others.size and np.max(np.abs(others)) > 0:
                return CheckResult("rcef-structure", False, float(np.max(np.abs(others))), "leading one not alone in row")
            lead_rows.append(lead)
        if any(b <= a for a, b in zip(lead_rows, lead_rows[1:])):
            return CheckResult("rcef-structure", False, 1.0, "leading rows not increasing")
        # Column spaces agree: project each side onto the other.
        for A, B in ((P, R), (R, P)):
            proj = _svd_project_cols(A, B)
            scale = max(1.0, float(np.max(np.abs(A))))
            worst = max(worst, float(np.max(np.abs(A - proj))) / scale)
    return CheckResult("rcef-structure", worst <= 1e-8, worst)


def _svd_project_cols(A: np.ndarray, onto: np.ndarray) -> np.ndarray:
    """Project the columns of A onto the column space of `onto`."""
    return _svd_project_matrix(onto) @ A


def _svd_project_matrix(B: np.ndarray) -> np.ndarray:
    if B.size == 0:
        return np.zeros((B.shape[0], B.shape[0]))
    u, s, _ = np.linalg.svd(B, full_matrices=False)
    rank = int(np.sum(s > 1e-10 * (s[0] if s.size else 1.0)))
    u = u[:, :rank]
    return u @ u.T


def check_linear_unlearn(trials: int = 100) -> CheckResult:
    rng = np.random.default_rng(15)
    spec_cache: dict[int, tuple] = {}
    worst = 0.0
    for _ in range(trials):
        m = int(rng.integers(4, 33))
        n = int(rng.integers(2, min(m, 20)))
        n_f = int(rng.integers(1, n))
        X = rng.normal(size=(n, m))
        y = rng.normal(size=n)
        theta = numkit.min_norm_least_squares(X, y)
        part = spec_cache.setdefault(m, NetworkSpec.linear(m).partition())
        out = exact.linear_min_norm_unlearn(ParamVector(theta, part), X[: n - n_f])
        oracle = numkit.min_norm_least_squares(X[: n - n_f], y[: n - n_f])
        worst = max(worst, float(np.linalg.norm(out.data - oracle)))
    return CheckResult("linear-unlearn-oracle", worst <= 1e-8, worst)


def check_deep_linear_unlearn(trials: int = 60) -> CheckResult:
    rng = np.random.default_rng(16)
    worst = 0.0
    for _ in range(trials):
        L = int(rng.integers(2, 5))
        m = int(rng.integers(5, 11))
        widths = [m] + [int(rng.integers(2, 7)) for _ in range(L - 1)]
        spec = NetworkSpec.deep_linear(widths)
        theta = init_params(spec, rng)
        if np.linalg.norm(exact.tail_product(spec, theta)) <= 1e-6:
            continue
        n_r = int(rng.integers(1, min(m, 5)))
        Xr = rng.normal(size=(n_r, m))
        w = effective_predictor(spec, theta)
        updated = exact.deep_linear_predictor_unlearn(spec, theta, Xr)
        # Feasibility against the models-module gradients (cross-module check).
        grads = model_gradients_batch(spec, theta, Xr)
        worst = max(worst, float(np.max(np.abs(grads @ (updated.data - theta.data)))))
        oracle = numkit.min_norm_least_squares(Xr, Xr @ w)
        worst = max(worst, float(np.max(np.abs(effective_predictor(spec, updated) - oracle))))
    return CheckResult("deep-linear-unlearn", worst <= 1e-8, worst)


def check_param_norm_construction(trials: int = 30, samples: int = 100) -> CheckResult:
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(trials):
        L = int(rng.integers(2, 5))
        m = int(rng.integers(3, 9))
        widths = [m] + [int(rng.integers(2, 6)) for _ in range(L - 1)]
        spec = NetworkSpec.deep_linear(widths)
        w_hat = rng.normal(size=m)
        theta = exact.deep_linear_param_norm_construct(spec, w_hat)
        target = L * float(np.linalg.norm(w_hat)) ** (2.0 / L)
        sq = float(theta.data @ theta.data)
        worst = max(worst, abs(sq - target) / max(1.0, target))
        # Random feasible factorizations must not beat the construction.
        for _ in range(samples):
            other = _random_feasible_factorization(spec, theta, rng)
            if float(other.data @ other.data) < sq - 1e-9:
                return CheckResult(
                    "param-norm-construction", False, sq - float(other.data @ other.data),
                    "sampled factorization beat the construction",
                )
    return CheckResult("param-norm-construction", worst <= 1e-10, worst)


def _random_feasible_factorization(spec: NetworkSpec, theta: ParamVector, rng) -> ParamVector:
    """Same effective predictor, different layer split, via invertible reparameterization."""
    out = theta.copy()
    L = spec.num_layers
    prev_inv = None
    for ell in range(1, L):
        h = spec.widths[ell]
        G = np.eye(h) + 0.3 * rng.normal(size=(h, h))
        A = out.block(f"A{ell}")
        new_A = G @ A if prev_inv is None else G @ A @ prev_inv
        np.copyto(A, new_A)
        prev_inv = np.linalg.inv(G)
    np.copyto(out.block("c"), prev_inv.T @ out.block("c"))
    return out


def check_perceptron_prune(trials: int = 60) -> CheckResult:
    rng = np.random.default_rng(18)
    worst = 0.0
    for _ in range(trials):
        m = int(rng.integers(3, 9))
        h = int(rng.integers(4, 33))
        n_r = int(rng.integers(1, min(h, 9)))
        spec = NetworkSpec.perceptron(m, h, "relu")
        A = rng.normal(size=(h, m))
        Xr = rng.normal(size=(n_r, m))
        Phi = np.maximum(Xr @ A.T, 0.0)
        if np.linalg.matrix_rank(Phi) < min(n_r, h):
            continue
        y = rng.normal(size=n_r)
        c = numkit.min_norm_least_squares(Phi, y)
        theta = zeros_like_params(spec)
        np.copyto(theta.block("c"), c)
        np.copyto(theta.block("A"), A)
        pruned = exact.perceptron_prune(spec, theta, Xr, y)
        out = forward_batch(spec, pruned, Xr)[:, 0]
        worst = max(worst, float(np.max(np.abs(out - y))))
        if exact.active_neurons(pruned) > n_r:
            return CheckResult("perceptron-prune", False, float(exact.active_neurons(pruned)), "width bound broken")
        sparse = exact.sparsify_first_layer(spec, pruned)
        out2 = forward_batch(spec, sparse, Xr)[:, 0]
        worst = max(worst, float(np.max(np.abs(out2 - y))))
    return CheckResult("perceptron-prune", worst <= 1e-8, worst)


def check_counterexample() -> CheckResult:
    ce = exact.counterexample_c41()
    retain = ce.dataset.retain_subset()
    grads = model_gradients_batch(ce.spec, ce.theta_star, retain.inputs)
    constraint = float(np.max(np.abs(grads @ ce.delta.data)))
    perturbed = ParamVector(ce.theta_star.data + ce.delta.data, ce.theta_star.partition)
    predictor_norm = float(np.linalg.norm(effective_predictor(ce.spec, perturbed)))
    retained_out = float(forward_batch(ce.spec, perturbed, retain.inputs)[0, 0])
    ok = constraint == 0.0 and predictor_norm == 0.0 and retained_out != 1.0
    detail = f"constraint={constraint}, predictor_norm={predictor_norm}, retained_out={retained_out}"
    return CheckResult("linearized-counterexample", ok, max(constraint, predictor_norm), detail)


def check_loss_gradient_vacuous() -> CheckResult:
    """At an exact interpolator every loss-gradient method reduces to noise."""
    rng = np.random.default_rng(19)
    m, n = 24, 10
    X = rng.normal(size=(n, m))
    y = rng.normal(size=n)
    theta = ParamVector(numkit.min_norm_least_squares(X, y), NetworkSpec.linear(m).partition())
    mask = np.zeros(n, dtype=bool)
    mask[: n - 3] = True
    dataset = LabeledDataset(X, y[:, None], mask)
    spec = NetworkSpec.linear(m)
    worst = 0.0
    for method in ("gd", "ga", "ngp"):
        _, moves = unlearners.loss_gradient_run(spec, theta, dataset, method, epochs=10, eta=0.1)
        worst = max(worst, float(np.sum(moves)))
    if worst > 1e-6:
        return CheckResult("loss-gradient-vacuous", False, worst, "gd/ga/ngp moved an interpolator")
    sigma, eta = 0.5, 0.1
    _, moves = unlearners.loss_gradient_run(spec, theta, dataset, "ngd", epochs=10, eta=eta, sigma=sigma, seed=3)
    expected = eta * sigma * np.sqrt(m)
    ratio_err = float(np.max(np.abs(np.array(moves) / expected - 1.0)))
    return CheckResult("loss-gradient-vacuous", ratio_err <= 0.5, worst, f"ngd ratio err {ratio_err:.3f}")


def check_gd_span_invariance() -> CheckResult:
    """Plain gradient descent from zero never leaves the input span."""
    rng = np.random.default_rng(20)
    m, n = 16, 6
    X = rng.normal(size=(n, m))
    y = rng.normal(size=n)
    dataset = LabeledDataset(X, y[:, None], np.ones(n, dtype=bool))
    spec = NetworkSpec.linear(m)
    residuals = []

    def on_epoch(epoch, loss, theta):
        outside = theta.data - _svd_project(theta.data, X)
        residuals.append(float(np.linalg.norm(outside)))

    train(spec, dataset, "mse", epochs=50, batch_size=n, lr=0.05, seed=0,
          optimizer="gd", init_theta=zeros_like_params(spec), on_epoch=on_epoch)
    worst = max(residuals)
    return CheckResult("gd-span-invariance", worst <= 1e-8, worst)


def check_projection_closed_form(trials: int = 300) -> CheckResult:
    rng = np.random.default_rng(21)
    worst_formula = 0.0
    worst_orth = 0.0
    for _ in range(trials):
        d = int(rng.integers(3, 30))
        k = int(rng.integers(1, d))
        spec = NetworkSpec.linear(d)
        theta = ParamVector(rng.normal(size=d), spec.partition())
        Xs = rng.normal(size=(k, d))
        lam = float(rng.uniform(0.0, 5.0))
        stepped = unlearners.minnorm_og_step(spec, theta, Xs, lam, n_pert=k)
        proj = _svd_project(theta.data, Xs)
        expected = theta.data - (1.0 / (1.0 + lam)) * (theta.data - proj)
        worst_formula = max(worst_formula, float(np.max(np.abs(stepped.data - expected))))
        worst_orth = max(worst_orth, float(np.max(np.abs(Xs @ (stepped.data - theta.data)))))
    passed = worst_formula <= 1e-12 and worst_orth <= 1e-8
    return CheckResult("projection-closed-form", passed, max(worst_formula, worst_orth),
                       f"formula {worst_formula:.2e}, orthogonality {worst_orth:.2e}")


ALL_CHECKS = (
    check_orthonormal_basis,
    check_projection_identities,
    check_min_norm_solver,
    check_rcef,
    check_linear_unlearn,
    check_deep_linear_unlearn,
    check_param_norm_construction,
    check_perceptron_prune,
    check_counterexample,
    check_loss_gradient_vacuous,
    check_gd_span_invariance,
    check_projection_closed_form,
)


def run_all(echo=print) -> list[CheckResult]:
    """Run every check, print a pass/fail table, return the results."""
    results = []
    for fn in ALL_CHECKS:
        try:
            res = fn()
        except Exception as err:  # a crashed check is a failed check
            res = CheckResult(fn.__name__.removeprefix("check_").replace("_", "-"), False, float("nan"), f"{type(err).__name__}: {err}")
        results.append(res)
        status = "PASS" if res.passed else "FAIL"
        echo(f"{status:4s}  {res.name:28s} max residual {res.max_residual:.3e}  {res.detail}")
    return results
