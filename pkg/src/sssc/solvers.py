"""Inner numerical solvers for sparse coding.

Two workhorses shared by training and test-time encoding:

* :func:`feature_sign_search` solves the L1-regularized least-squares
  (lasso) problem  min_s ||t - D s||_2^2 + alpha ||s||_1  exactly with the
  feature-sign search active-set method (Lee et al., "Efficient sparse
  coding algorithms", NIPS 2006).
* :func:`lagrange_dual_dictionary` fits a codeword matrix under per-column
  squared-norm bounds,  min_B ||X - B S||_F^2  s.t. ||b_k||_2^2 <= radius,
  by maximizing the Lagrange dual over nonnegative per-column multipliers.

Both operate on plain float64 arrays and are deterministic.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

__all__ = [
    "Dictionary",
    "SparseCode",
    "SolverOptions",
    "NumericalError",
    "feature_sign_search",
    "batch_encode",
    "lagrange_dual_dictionary",
    "sc_objective",
    "lasso_optimality_gaps",
    "dictionary_kkt_residual",
]

# Coefficients below this magnitude are snapped to exact zeros so support
# sets are well defined.
ZERO_SNAP = 1e-12

# Ridge added to S S^T when its condition number makes the dual singular
# (dead codewords produce exactly this).
RIDGE_JITTER = 1e-8
CONDITION_LIMIT = 1e12


class NumericalError(RuntimeError):
    """An inner solver broke down numerically."""


@dataclass(frozen=True)
class SolverOptions:
    """Knobs shared by the inner solvers.

    alpha is the L1 weight of the coding problem; the tolerances bound the
    accepted optimality residual and constraint violation.
    """

    alpha: float = 0.0
    max_iterations: int = 1000
    tol_optimality: float = 1e-6
    tol_constraint: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.tol_optimality <= 0 or self.tol_constraint <= 0:
            raise ValueError("tolerances must be strictly positive")


@dataclass
class Dictionary:
    """A codeword matrix with a shared per-column squared-norm bound.

    columns has shape (p, m): m codewords of dimension p.  Instances built
    by :func:`lagrange_dual_dictionary` satisfy
    ||columns[:, k]||_2^2 <= radius + tol for every k.
    """

    columns: np.ndarray
    radius: float

    def __post_init__(self):
        self.columns = np.asarray(self.columns, dtype=float)
        if self.columns.ndim != 2:
            raise ValueError("dictionary columns must form a 2-D array")
        if self.columns.shape[0] < 1 or self.columns.shape[1] < 1:
            raise ValueError("dictionary must have at least one row and column")
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def dim(self):
        return self.columns.shape[0]

    @property
    def n_codewords(self):
        return self.columns.shape[1]

    def column_sq_norms(self):
        return np.sum(self.columns**2, axis=0)

    def validate(self, tol_constraint=1e-8):
        """Raise if any column exceeds the squared-norm bound beyond tol."""
        excess = float(np.max(self.column_sq_norms()) - self.radius)
        if excess > tol_constraint:
            raise NumericalError(
                f"dictionary column exceeds norm bound by {excess:.3e}"
            )


@dataclass
class SparseCode:
    """Result of one lasso solve: coefficients with an explicit support."""

    coefficients: np.ndarray
    support: np.ndarray
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        self.support = np.asarray(self.support, dtype=int)


def _check_finite(array, name):
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains non-finite entries")


def sc_objective(targets, dictionary, codes, alpha):
    """Sparse-coding objective: sum_i ||x_i - B s_i||^2 + alpha ||s_i||_1."""
    X = np.asarray(targets, dtype=float)
    S = np.asarray(codes, dtype=float)
    B = dictionary.columns
    residual = X - B @ S
    return float(np.sum(residual**2) + alpha * np.sum(np.abs(S)))


def lasso_optimality_gaps(dictionary, target, coefficients, alpha):
    """Residuals of the lasso subgradient conditions.

    Returns ``(gap_nonzero, gap_zero)`` where ``gap_nonzero`` is the largest
    violation of  |2 D^T(Ds - t)_j + alpha sign(s_j)|  over the support and
    ``gap_zero`` the largest violation of  |2 D^T(Ds - t)_j| <= alpha  over
    zero coefficients.  Both are 0 for an exact optimum.
    """
    D = dictionary.columns
    s = np.asarray(coefficients, dtype=float)
    g = 2.0 * (D.T @ (D @ s - np.asarray(target, dtype=float)))
    nonzero = s != 0.0
    gap_nonzero = 0.0
    if np.any(nonzero):
        gap_nonzero = float(np.max(np.abs(g[nonzero] + alpha * np.sign(s[nonzero]))))
    gap_zero = 0.0
    if np.any(~nonzero):
        gap_zero = float(max(0.0, np.max(np.abs(g[~nonzero])) - alpha))
    return gap_nonzero, gap_zero


def feature_sign_search(dictionary, target, options=None, warm_start=None,
                        callback=None, gram=None):
    """Solve  min_s ||target - D s||^2 + alpha ||s||_1  exactly.

    Active-set feature-sign search: grow a working set of nonzero
    coefficients with guessed signs, solve the resulting unconstrained
    quadratic analytically, and line-search through sign crossings so the
    true objective never increases.

    Parameters
    ----------
    dictionary : Dictionary
        Codeword matrix; only the columns are used here.
    target : array, shape (p,)
    options : SolverOptions, optional
        alpha and termination tolerances.
    warm_start : SparseCode or array, optional
        Starting coefficients, typically the previous iterate.
    callback : callable, optional
        Called with the objective value after every internal step;
        the reported sequence is non-increasing.
    gram : array, optional
        Precomputed D^T D, shared across a batch.

    Returns
    -------
    SparseCode
        Coefficients with exact zeros off the support.  ``converged`` is
        False when the iteration budget was exhausted; the best iterate is
        still returned.
    """
    options = options or SolverOptions()
    D = dictionary.columns
    t = np.asarray(target, dtype=float).ravel()
    p, m = D.shape
    if t.shape[0] != p:
        raise ValueError(f"target has dimension {t.shape[0]}, expected {p}")
    _check_finite(D, "dictionary")
    _check_finite(t, "target")
    alpha = options.alpha

    if alpha == 0.0:
        # Plain least squares; lstsq handles rank deficiency (minimum-norm
        # solution satisfies the normal equations, hence the optimality
        # conditions with alpha = 0).
        x = np.linalg.lstsq(D, t, rcond=None)[0]
        x[np.abs(x) < ZERO_SNAP] = 0.0
        if callback is not None:
            callback(float(np.sum((t - D @ x) ** 2)))
        return SparseCode(x, np.flatnonzero(x), True, 1)

    G = D.T @ D if gram is None else gram
    b = D.T @ t

    def true_objective(v):
        r = t - D @ v
        return float(r @ r + alpha * np.sum(np.abs(v)))

    if warm_start is not None:
        coeffs = warm_start.coefficients if isinstance(warm_start, SparseCode) else warm_start
        x = np.array(coeffs, dtype=float).ravel().copy()
        if x.shape[0] != m:
            raise ValueError("warm start has wrong length")
        x[np.abs(x) < ZERO_SNAP] = 0.0
    else:
        x = np.zeros(m)
    theta = np.sign(x)
    active = x != 0.0

    current_obj = true_objective(x)
    converged = False
    stalls = 0
    iterations = 0
    # Terminate at half the advertised tolerance so marginal coordinates
    # cannot leave the result just over the documented conditions.
    inner_tol = 0.5 * options.tol_optimality
    while iterations < options.max_iterations:
        iterations += 1
        g = 2.0 * (G @ x - b)

        # Optimality over the active set; when it holds, either finish or
        # activate the worst zero-coefficient violator.
        if np.any(active):
            act_viol = np.max(np.abs(g[active] + alpha * theta[active]))
        else:
            act_viol = 0.0
        if act_viol <= inner_tol:
            zero_idx = np.flatnonzero(~active)
            if zero_idx.size == 0 or np.max(np.abs(g[zero_idx])) <= alpha + inner_tol:
                converged = True
                break
            i = zero_idx[np.argmax(np.abs(g[zero_idx]))]
            theta[i] = -np.sign(g[i])
            active[i] = True

        # Analytic solve over the active set with the guessed signs.
        act = np.flatnonzero(active)
        Ga = G[np.ix_(act, act)]
        rhs = b[act] - 0.5 * alpha * theta[act]
        try:
            xa_new = np.linalg.solve(Ga, rhs)
        except np.linalg.LinAlgError:
            xa_new = np.linalg.lstsq(Ga, rhs, rcond=None)[0]

        xa_old = x[act]
        candidates = [xa_new]
        crossing = xa_old * xa_new < 0.0
        if np.any(crossing):
            ts = xa_old[crossing] / (xa_old[crossing] - xa_new[crossing])
            cross_idx = np.flatnonzero(crossing)
            for t_step, ci in zip(ts, cross_idx):
                v = xa_old + t_step * (xa_new - xa_old)
                v[ci] = 0.0
                candidates.append(v)

        best_vec = None
        best_obj = current_obj
        full = x.copy()
        for v in candidates:
            full[act] = v
            obj = true_objective(full)
            if obj < best_obj:
                best_obj = obj
                best_vec = v.copy()

        if best_vec is None:
            # No candidate improves the objective: either the warm start is
            # already optimal on its support, or the step is numerically
            # degenerate.  Re-checking optimality at the loop head decides;
            # repeated stalls abort.
            stalls += 1
            if stalls >= 3:
                break
        else:
            stalls = 0
            x[act] = best_vec
            current_obj = best_obj
        active = x != 0.0
        theta = np.sign(x)
        if callback is not None:
            callback(current_obj)

    x[np.abs(x) < ZERO_SNAP] = 0.0
    return SparseCode(x, np.flatnonzero(x), converged, iterations)


def _encode_column(dictionary, column, options, warm, gram):
    return feature_sign_search(dictionary, column, options, warm_start=warm, gram=gram)


def batch_encode(dictionary, targets, options=None, warm_starts=None, n_jobs=1):
    """Sparse-code every column of ``targets`` against one dictionary.

    Columns are independent; with ``n_jobs != 1`` they are solved by a
    joblib thread pool and merged back in column order, so results do not
    depend on the worker count.  Returns the (m, n) coefficient matrix.
    """
    options = options or SolverOptions()
    X = np.asarray(targets, dtype=float)
    if X.ndim != 2:
        raise ValueError("targets must be a 2-D array with samples as columns")
    p, n = X.shape
    if p != dictionary.dim:
        raise ValueError(f"targets have dimension {p}, dictionary expects {dictionary.dim}")
    m = dictionary.n_codewords
    if n == 0:
        return np.zeros((m, 0))
    bad = np.flatnonzero(~np.all(np.isfinite(X), axis=0))
    if bad.size:
        raise ValueError(f"targets contain non-finite entries in columns {bad.tolist()}")
    if warm_starts is not None:
        warm_starts = np.asarray(warm_starts, dtype=float)
        if warm_starts.shape != (m, n):
            raise ValueError(f"warm starts must have shape {(m, n)}")

    gram = dictionary.columns.T @ dictionary.columns

    def solve_one(i):
        warm = warm_starts[:, i] if warm_starts is not None else None
        try:
            return _encode_column(dictionary, X[:, i], options, warm, gram)
        except Exception as exc:
            raise NumericalError(f"encoding failed for column {i}: {exc}") from exc

    if n_jobs == 1:
        results = [solve_one(i) for i in range(n)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(solve_one)(i) for i in range(n)
        )

    stuck = [i for i, r in enumerate(results) if not r.converged]
    if stuck:
        warnings.warn(f"feature-sign search hit the iteration cap for columns {stuck}")
    return np.column_stack([r.coefficients for r in results])


def _dual_system(gram_work, lam, cross):
    """Cholesky pieces of M = G + diag(lam) and B(lam)^T = M^{-1} X S^T^T."""
    M = gram_work + np.diag(lam)
    bump = 0.0
    for _ in range(6):
        try:
            cho = cho_factor(M + bump * np.eye(M.shape[0]), lower=True)
            break
        except np.linalg.LinAlgError:
            bump = max(bump * 10.0, 1e-14)
    else:
        raise NumericalError("dual system matrix is not positive definite")
    Bt = cho_solve(cho, cross.T)  # (m, p): rows are dictionary columns
    return cho, Bt


def lagrange_dual_dictionary(targets, codes, radius, options=None):
    """Fit  min_B ||targets - B codes||_F^2  s.t.  ||b_k||^2 <= radius.

    The constrained fit is solved through its Lagrange dual: for
    multipliers lam >= 0 the inner minimization is analytic,
    B(lam) = X S^T (S S^T + diag(lam))^{-1}, and the concave dual is
    maximized with a quasi-Newton loop (L-BFGS-B) followed by a Newton
    polish on the active multipliers.  A projected-gradient ascent fallback
    handles ill-conditioned cases.

    Dead codewords (all-zero rows of ``codes``) leave the objective
    unchanged, so those columns are re-initialized to the worst
    reconstructed target column, scaled to the constraint boundary.
    """
    options = options or SolverOptions()
    X = np.asarray(targets, dtype=float)
    S = np.asarray(codes, dtype=float)
    if X.ndim != 2 or S.ndim != 2:
        raise ValueError("targets and codes must be 2-D arrays")
    p, n = X.shape
    m, n_codes = S.shape
    if n != n_codes:
        raise ValueError(f"targets have {n} columns but codes have {n_codes}")
    if not radius > 0:
        raise ValueError("radius must be positive")
    _check_finite(X, "targets")
    _check_finite(S, "codes")
    if n == 0:
        return Dictionary(np.zeros((p, m)), radius)

    gram = S @ S.T
    cross = X @ S.T
    dead = np.flatnonzero(np.diag(gram) == 0.0)

    gram_work = gram
    cond = np.linalg.cond(gram) if m > 0 else 1.0
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        gram_work = gram + RIDGE_JITTER * np.eye(m)

    def negative_dual(lam):
        _, Bt = _dual_system(gram_work, lam, cross)
        value = float(np.sum(cross * Bt.T)) + radius * float(np.sum(lam))
        grad = radius - np.sum(Bt**2, axis=1)
        return value, grad

    result = minimize(
        negative_dual,
        np.zeros(m),
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, None)] * m,
        options={"maxiter": 500, "ftol": 1e-18, "gtol": 1e-12},
    )
    lam = np.maximum(result.x, 0.0)

    def kkt_parts(lam):
        _, Bt = _dual_system(gram_work, lam, cross)
        norms2 = np.sum(Bt**2, axis=1)
        h = norms2 - radius
        primal = max(0.0, float(np.max(h))) if m else 0.0
        comp = float(np.max(np.abs(lam * h))) if m else 0.0
        return Bt, norms2, h, max(primal, comp)

    Bt, norms2, h, residual = kkt_parts(lam)

    # Newton polish: drive ||b_k||^2 - radius to zero on the active set.
    tighten = 0.1 * options.tol_optimality
    for _ in range(40):
        if residual <= tighten:
            break
        act = np.flatnonzero((lam > 0.0) | (h > 0.0))
        if act.size == 0:
            break
        cho, Bt = _dual_system(gram_work, lam, cross)
        Minv = cho_solve(cho, np.eye(m))
        jac = -2.0 * (Bt @ Bt.T) * Minv
        jac_act = jac[np.ix_(act, act)]
        try:
            step = np.linalg.solve(jac_act, h[act])
        except np.linalg.LinAlgError:
            break
        new_lam = lam.copy()
        new_lam[act] = np.maximum(lam[act] - step, 0.0)
        _, _, new_h, new_residual = kkt_parts(new_lam)
        if new_residual < residual:
            lam, h, residual = new_lam, new_h, new_residual
        else:
            break

    if residual > options.tol_optimality:
        # Projected gradient ascent on the dual as a last resort.
        step = 1.0 / (1.0 + float(np.max(np.abs(h))))
        value = negative_dual(lam)[0]
        for _ in range(5000):
            candidate = np.maximum(lam + step * h, 0.0)
            cand_value, cand_grad = negative_dual(candidate)
            if cand_value < value:
                lam, value = candidate, cand_value
                h = -(cand_grad)  # grad of -dual is radius - norms^2
                step *= 1.2
            else:
                step *= 0.5
                if step < 1e-16:
                    break
            _, _, h, residual = kkt_parts(lam)
            if residual <= options.tol_optimality:
                break

    _, Bt = _dual_system(gram_work, lam, cross)
    B = Bt.T.copy()

    # Hard guarantee on the norm bound: rescale any column still beyond the
    # constraint tolerance (inactive for a converged dual).
    norms2 = np.sum(B**2, axis=0)
    over = norms2 > radius + options.tol_constraint
    if np.any(over):
        B[:, over] *= np.sqrt(radius / norms2[over])

    if dead.size:
        residual_norms = np.sum((X - B @ S) ** 2, axis=0)
        order = np.argsort(-residual_norms, kind="stable")
        for slot, k in enumerate(dead):
            source = X[:, order[slot % n]]
            norm = float(np.linalg.norm(source))
            if norm == 0.0:
                column = np.zeros(p)
                column[0] = np.sqrt(radius)
            else:
                column = source * (np.sqrt(radius) / norm)
            B[:, k] = column

    return Dictionary(B, radius)


def dictionary_kkt_residual(targets, codes, dictionary):
    """KKT residual of the norm-bounded dictionary fit at ``dictionary``.

    Infers the multiplier for each column from stationarity and returns the
    largest of: the stationarity residual  2||(X S^T - B S S^T)_k -
    lam_k b_k||,  the complementary-slackness residual  lam_k |(||b_k||^2 -
    radius)|,  and the constraint violation  max(0, ||b_k||^2 - radius).
    """
    X = np.asarray(targets, dtype=float)
    S = np.asarray(codes, dtype=float)
    B = dictionary.columns
    radius = dictionary.radius
    R = X @ S.T - B @ (S @ S.T)
    norms2 = np.sum(B**2, axis=0)
    residual = 0.0
    for k in range(B.shape[1]):
        if norms2[k] > 0:
            lam = max(0.0, float(B[:, k] @ R[:, k]) / norms2[k])
        else:
            lam = 0.0
        stationarity = 2.0 * float(np.linalg.norm(R[:, k] - lam * B[:, k]))
        complementary = lam * abs(norms2[k] - radius)
        feasibility = max(0.0, norms2[k] - radius)
        residual = max(residual, stationarity, complementary, feasibility)
    return residual
