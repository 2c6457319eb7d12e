"""Closed-form and alternating minimizers for the CRC family of costs.

Every method here minimizes a convex quadratic in the coefficients
(RCRC: for fixed feature-group weights). Each one is solved through one
symmetric positive-definite system ``H a = b`` factorized with Cholesky.
Each cost has an explicit evaluator and analytic gradient, so the closed
forms can be checked against :func:`oracle_descent_solve` and finite
differences.

Shapes follow the dictionary convention: ``X`` is ``d x N`` and queries
are length-``d`` vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .dictionary import CovarianceModel, FeatureDictionary


class SolverError(np.linalg.LinAlgError):
    """A system matrix could not be factorized."""


class DescentBudgetExceeded(RuntimeError):
    """Raised by :func:`oracle_descent_solve` when it runs out of iterations."""


# --------------------------------------------------------------------------
# configuration and result types


@dataclass(frozen=True)
class KernelSpec:
    """Kernel used by KCRC: ``linear`` (``x^T y``) or ``rbf``
    (``exp(-||x - y||^2 / (2 sigma^2))``)."""

    kind: str = "linear"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and not self.bandwidth > 0:
            raise ValueError("rbf kernel requires bandwidth > 0")

    def __call__(self, A, B):
        """Kernel matrix between the columns of ``A`` and ``B``."""
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        if A.ndim == 1:
            A = A[:, None]
        if B.ndim == 1:
            B = B[:, None]
        if self.kind == "linear":
            return A.T @ B
        sq = (np.sum(A * A, axis=0)[:, None] + np.sum(B * B, axis=0)[None, :]
              - 2.0 * (A.T @ B))
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-sq / (2.0 * self.bandwidth ** 2))


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters shared by every solver.

    ``lam`` shrinks coefficients, ``gamma`` weights the collaboration or
    coupling penalty, ``tau`` and ``eta`` drive RCRC's relaxation term and
    the smoothing of its feature-group weights.
    """

    lam: float = 1e-3
    gamma: float = 1e-3
    tau: float = 0.0
    eta: float = 1e-2
    kernel: KernelSpec = field(default_factory=KernelSpec)
    tolerance: float = 1e-10
    max_iters: int = 200

    def __post_init__(self):
        for name in ("lam", "gamma", "tau", "eta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class CoefficientSolution:
    alpha: np.ndarray
    achieved_cost: float
    grad_norm: float
    beta: np.ndarray | None = None
    weights: np.ndarray | None = None
    n_iter: int = 0
    converged: bool = True
    cost_history: list | None = None


@dataclass(frozen=True)
class ClassPriorWeights:
    """Per-class weights scaling the EProCRC collaboration terms (mean 1)."""

    beta_c: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta_c, dtype=np.float64)
        if b.ndim != 1 or b.size == 0 or not np.all(np.isfinite(b)) or np.any(b < 0):
            raise ValueError("class prior weights must be a non-empty finite non-negative vector")
        object.__setattr__(self, "beta_c", b)

    @classmethod
    def uniform(cls, n_classes):
        return cls(np.ones(n_classes))


# --------------------------------------------------------------------------
# helpers


def _as_matrix(x):
    if isinstance(x, FeatureDictionary):
        return x.data
    if hasattr(x, "Y"):
        return x.Y
    return np.asarray(x, dtype=np.float64)


def _vector(y, d, name="y"):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] != d:
        raise ValueError(f"{name} must be a length-{d} vector, got shape {y.shape}")
    return y


def _cho(H, what):
    try:
        return linalg.cho_factor(H, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SolverError(f"{what} system is not positive definite") from exc


def _spd_solve(H, b, what):
    return linalg.cho_solve(_cho(H, what), b, check_finite=False)


def _finish(alpha, cost, grad, rhs, **extra):
    g = grad(alpha)
    return CoefficientSolution(alpha=alpha, achieved_cost=float(cost(alpha)),
                               grad_norm=float(np.linalg.norm(g)), **extra)


def collaboration_matrix(gram, labels, n_classes, weights=None):
    """``sum_k w_k (I - S_k) G (I - S_k)`` for class selectors ``S_k``.

    Entry ``(s, t)`` equals ``G[s, t]`` times the total weight of the
    classes that contain neither column ``s`` nor column ``t``.
    """
    w = np.ones(n_classes) if weights is None else np.asarray(weights, dtype=np.float64)
    wl = w[labels]
    same = labels[:, None] == labels[None, :]
    coef = w.sum() - wl[:, None] - wl[None, :] + np.where(same, wl[:, None], 0.0)
    return gram * coef


# --------------------------------------------------------------------------
# costs and gradients (plain transcriptions, independent of the system
# assembly used by the solvers)


def crc_cost(X, y, alpha, lam):
    r = y - X @ alpha
    return float(r @ r + lam * alpha @ alpha)


def crc_grad(X, y, alpha, lam):
    return 2.0 * (X.T @ (X @ alpha - y) + lam * alpha)


def ecrc_cost(X, R, y, alpha, lam):
    r = y - X @ alpha
    return float(r @ np.linalg.solve(R, r) + lam * alpha @ alpha)


def ecrc_grad(X, R, y, alpha, lam):
    r = y - X @ alpha
    return 2.0 * (-X.T @ np.linalg.solve(R, r) + lam * alpha)


def procrc_cost(X, labels, n_classes, y, alpha, lam, gamma, weights=None):
    """``||y - Xa||^2 + lam ||a||^2 + gamma/c sum_k w_k ||Xa - X_k a_k||^2``."""
    w = np.ones(n_classes) if weights is None else np.asarray(weights)
    full = X @ alpha
    total = 0.0
    for k in range(n_classes):
        mk = labels == k
        diff = full - X[:, mk] @ alpha[mk]
        total += w[k] * diff @ diff
    r = y - full
    return float(r @ r + lam * alpha @ alpha + gamma / n_classes * total)


def procrc_grad(X, labels, n_classes, y, alpha, lam, gamma, weights=None):
    w = np.ones(n_classes) if weights is None else np.asarray(weights)
    full = X @ alpha
    g = X.T @ (full - y) + lam * alpha
    for k in range(n_classes):
        keep = labels != k
        diff = X[:, keep] @ alpha[keep]  # X(I - S_k) a
        gk = np.where(keep, X.T @ diff, 0.0)
        g = g + gamma / n_classes * w[k] * gk
    return 2.0 * g


def _rcrc_anchor_weights(labels, n_classes):
    sizes = np.bincount(labels, minlength=n_classes)
    return 1.0 / (n_classes * sizes[labels])


def rcrc_deviations(alpha, labels, n_classes):
    """Per-class ``||a_i - abar||^2`` with ``abar`` the mean of the class-block means."""
    means = np.array([alpha[labels == i].mean() for i in range(n_classes)])
    anchor = means.mean()
    return np.array([np.sum((alpha[labels == i] - anchor) ** 2) for i in range(n_classes)])


def rcrc_cost(X, labels, n_classes, y, alpha, weights, lam, tau, eta):
    r = y - X @ alpha
    dev = rcrc_deviations(alpha, labels, n_classes)
    return float(r @ r + lam * alpha @ alpha + tau * weights @ dev + eta * weights @ weights)


def rcrc_grad(X, labels, n_classes, y, alpha, weights, lam, tau):
    """Gradient in ``alpha`` for fixed group weights."""
    means = np.array([alpha[labels == i].mean() for i in range(n_classes)])
    anchor = means.mean()
    centered = alpha - anchor
    wl = weights[labels]
    a = _rcrc_anchor_weights(labels, n_classes)
    # d/da of sum_i w_i ||a_i - m||^2 with m = a^T alpha
    sums = np.array([weights[i] * centered[labels == i].sum() for i in range(n_classes)])
    g_dev = 2.0 * wl * centered - 2.0 * sums.sum() * a
    return 2.0 * (X.T @ (X @ alpha - y) + lam * alpha) + tau * g_dev


def kcrc_cost(K, ky, kyy, alpha, lam):
    """Feature-space ``||phi(y) - Phi a||^2 + lam ||a||^2``."""
    return float(kyy - 2.0 * ky @ alpha + alpha @ K @ alpha + lam * alpha @ alpha)


def kcrc_grad(K, ky, alpha, lam):
    return 2.0 * (K @ alpha - ky + lam * alpha)


def gpcrc_cost(M, y, p, location_cols, lam, gamma):
    """``||y - Mp||^2 + lam ||p||^2 + gamma ||Mp - M_j p_jj||^2``."""
    full = M @ p
    r = y - full
    pen = full - M[:, location_cols] @ p[location_cols]
    return float(r @ r + lam * p @ p + gamma * pen @ pen)


def gpcrc_grad(M, y, p, location_cols, lam, gamma):
    off = np.ones(p.shape[0], dtype=bool)
    off[location_cols] = False
    pen = M[:, off] @ p[off]
    g = M.T @ (M @ p - y) + lam * p + gamma * np.where(off, M.T @ pen, 0.0)
    return 2.0 * g


def pprocrc_cost(X, Y, y_i, alpha, beta, lam, gamma):
    """Patch-level probabilistic cost, summing the three squared residual terms.

    ``||y_i - Xa||^2 + ||y_i - Yb||^2 + lam ||a||^2 + gamma ||b||^2
    + ||Yb - Xa||^2``
    """
    X, Y = _as_matrix(X), _as_matrix(Y)
    if X.shape[0] != Y.shape[0] or y_i.shape[0] != X.shape[0]:
        raise ValueError("X, Y and y_i must share the feature dimension")
    if alpha.shape[0] != X.shape[1] or beta.shape[0] != Y.shape[1]:
        raise ValueError("coefficient lengths do not match X and Y")
    xa, yb = X @ alpha, Y @ beta
    r1, r2, r3 = y_i - xa, y_i - yb, yb - xa
    return float(r1 @ r1 + r2 @ r2 + lam * alpha @ alpha + gamma * beta @ beta + r3 @ r3)


def pprocrc_grad(X, Y, y_i, alpha, beta, lam, gamma):
    """Gradient ``(d/da, d/db)`` of :func:`pprocrc_cost`."""
    X, Y = _as_matrix(X), _as_matrix(Y)
    xa, yb = X @ alpha, Y @ beta
    ga = 2.0 * (-X.T @ (y_i - xa) + lam * alpha - X.T @ (yb - xa))
    gb = 2.0 * (-Y.T @ (y_i - yb) + gamma * beta + Y.T @ (yb - xa))
    return ga, gb


# --------------------------------------------------------------------------
# system assembly, shared by the single-query solvers and the batch
# classifiers


def crc_system(dictionary, lam):
    return dictionary.gram + lam * np.eye(dictionary.n_samples)


def ecrc_operators(dictionary, cov, lam):
    """``(H, B)`` with ``H = X^T R^-1 X + lam I`` and ``B = X^T R^-1`` (``N x d``)."""
    X = dictionary.data
    if cov.R.shape != (X.shape[0], X.shape[0]):
        raise ValueError("covariance size does not match the feature dimension")
    try:
        cf = cov.factor()
    except linalg.LinAlgError as exc:
        raise SolverError("covariance R is not positive definite") from exc
    rinv_x = linalg.cho_solve(cf, X, check_finite=False)
    H = X.T @ rinv_x
    H = 0.5 * (H + H.T) + lam * np.eye(X.shape[1])
    return H, rinv_x.T


def procrc_system(dictionary, lam, gamma, weights=None):
    c = dictionary.n_classes
    G = dictionary.gram
    H = G + lam * np.eye(dictionary.n_samples)
    if gamma:
        H = H + (gamma / c) * collaboration_matrix(G, dictionary.labels, c, weights)
    return H


def rcrc_system(dictionary, lam, tau, weights):
    """``X^T X + lam I + tau sum_i w_i D_i^T D_i`` with ``D_i a = a_i - abar 1``."""
    labels, c = dictionary.labels, dictionary.n_classes
    H = crc_system(dictionary, lam)
    if tau:
        a = _rcrc_anchor_weights(labels, c)
        u = weights[labels]
        mass = float(weights @ dictionary.class_sizes)
        D = np.diag(u) - np.outer(u, a) - np.outer(a, u) + mass * np.outer(a, a)
        H = H + tau * D
    return H


def kernel_gram(dictionary, kernel):
    K = kernel(dictionary.data, dictionary.data)
    K = 0.5 * (K + K.T)
    return K


def check_psd(K, tol=1e-10):
    ev = np.linalg.eigvalsh(K)
    if ev[0] < -tol * max(1.0, abs(ev[-1])):
        raise SolverError(f"kernel Gram matrix is not PSD (most negative eigenvalue {ev[0]:.3e})")


def gpcrc_system(local_dict, location_cols, lam, gamma):
    G = local_dict.gram
    H = G + lam * np.eye(G.shape[0])
    if gamma:
        off = np.ones(G.shape[0], dtype=bool)
        off[location_cols] = False
        H = H + gamma * (G * np.outer(off, off))
    return H


def pprocrc_system(X, Y, lam, gamma):
    """Assembled ``(N + q)`` SPD block matrix of the coupled stationarity equations."""
    X, Y = _as_matrix(X), _as_matrix(Y)
    n, q = X.shape[1], Y.shape[1]
    xty = X.T @ Y
    H = np.empty((n + q, n + q))
    H[:n, :n] = 2.0 * (X.T @ X) + lam * np.eye(n)
    H[:n, n:] = -xty
    H[n:, :n] = -xty.T
    H[n:, n:] = 2.0 * (Y.T @ Y) + gamma * np.eye(q)
    return 0.5 * (H + H.T)


# --------------------------------------------------------------------------
# single-query solvers


def crc_solve(dictionary, y, lam):
    """Ridge collaborative code ``a = (X^T X + lam I)^-1 X^T y``.

    >>> import numpy as np
    >>> from crckit.dictionary import build_dictionary
    >>> D = build_dictionary(np.eye(2), [0, 1])
    >>> crc_solve(D, np.array([1.0, 0.0]), 1.0).alpha
    array([0.5, 0. ])
    """
    X = dictionary.data
    y = _vector(y, X.shape[0])
    rhs = X.T @ y
    try:
        alpha = dictionary.cache.solve(lam, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"CRC system singular at lam={lam}") from exc
    return _finish(alpha, lambda a: crc_cost(X, y, a, lam),
                   lambda a: crc_grad(X, y, a, lam), rhs)


def ecrc_solve(dictionary, cov: CovarianceModel, y, lam):
    X = dictionary.data
    y = _vector(y, X.shape[0])
    H, B = ecrc_operators(dictionary, cov, lam)
    rhs = B @ y
    alpha = _spd_solve(H, rhs, "ECRC")
    return _finish(alpha, lambda a: ecrc_cost(X, cov.R, y, a, lam),
                   lambda a: ecrc_grad(X, cov.R, y, a, lam), rhs)


def procrc_solve(dictionary, y, lam, gamma):
    """ProCRC: CRC plus ``gamma/c sum_k ||Xa - X_k a_k||^2``."""
    return _procrc(dictionary, y, lam, gamma, None, "ProCRC")


def eprocrc_solve(dictionary, y, lam, gamma, priors=None):
    """ProCRC with per-class collaboration weights (defaults to centroid priors)."""
    if priors is None:
        priors = compute_class_priors(dictionary)
    w = priors.beta_c
    if w.shape[0] != dictionary.n_classes:
        raise ValueError("one prior weight per class is required")
    return _procrc(dictionary, y, lam, gamma, w, "EProCRC")


def _procrc(dictionary, y, lam, gamma, weights, what):
    X, labels, c = dictionary.data, dictionary.labels, dictionary.n_classes
    y = _vector(y, X.shape[0])
    rhs = X.T @ y
    alpha = _spd_solve(procrc_system(dictionary, lam, gamma, weights), rhs, what)
    return _finish(alpha,
                   lambda a: procrc_cost(X, labels, c, y, a, lam, gamma, weights),
                   lambda a: procrc_grad(X, labels, c, y, a, lam, gamma, weights), rhs)


def compute_class_priors(dictionary):
    """Distances from each class centroid to the global centroid, scaled to mean 1."""
    X = dictionary.data
    center = X.mean(axis=1)
    raw = np.array([np.linalg.norm(center - X[:, ix].mean(axis=1))
                    for ix in dictionary.class_offsets])
    if not np.any(raw > 0):
        return ClassPriorWeights.uniform(dictionary.n_classes)
    return ClassPriorWeights(raw / raw.mean())


def project_simplex(v):
    """Euclidean projection of ``v`` onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _rcrc_weights(dev, tau, eta, current):
    if tau == 0:
        return current
    if eta == 0:
        w = np.zeros_like(dev)
        w[int(np.argmin(dev))] = 1.0
        return w
    return project_simplex(-tau * dev / (2.0 * eta))


def rcrc_solve(dictionary, y, lam, tau, eta=1e-2, tolerance=1e-10, max_iters=200):
    """RCRC by alternating minimization over coefficients and simplex weights.

    With the weights fixed the coefficient step is a ridge-type SPD solve;
    with the coefficients fixed the weights minimize
    ``tau * w.dev + eta ||w||^2`` over the simplex. Both steps are exact,
    so the recorded cost never increases. Hitting ``max_iters`` returns the
    last iterate with ``converged=False``.
    """
    X, labels, c = dictionary.data, dictionary.labels, dictionary.n_classes
    y = _vector(y, X.shape[0])
    if lam <= 0:
        raise ValueError("RCRC requires lam > 0")
    rhs = X.T @ y
    w = np.full(c, 1.0 / c)

    def cost(a, w):
        return rcrc_cost(X, labels, c, y, a, w, lam, tau, eta)

    if tau == 0:
        alpha = dictionary.cache.solve(lam, rhs)
        history = [cost(alpha, w)]
        n_iter, converged = 1, True
    else:
        history = []
        converged = False
        for n_iter in range(1, max_iters + 1):
            alpha = _spd_solve(rcrc_system(dictionary, lam, tau, w), rhs, "RCRC")
            w = _rcrc_weights(rcrc_deviations(alpha, labels, c), tau, eta, w)
            history.append(cost(alpha, w))
            if n_iter > 1 and history[-2] - history[-1] <= tolerance * (1.0 + abs(history[-1])):
                converged = True
                break
        # refresh alpha for the final weights so stationarity holds exactly
        alpha = _spd_solve(rcrc_system(dictionary, lam, tau, w), rhs, "RCRC")
        final = cost(alpha, w)
        if final <= history[-1]:
            history.append(final)
    g = rcrc_grad(X, labels, c, y, alpha, w, lam, tau)
    return CoefficientSolution(alpha=alpha, achieved_cost=history[-1],
                               grad_norm=float(np.linalg.norm(g)), weights=w,
                               n_iter=n_iter, converged=converged, cost_history=history)


def kcrc_solve(dictionary, y, lam, kernel=None):
    """Kernel CRC, ``a = (K + lam I)^-1 k(y)`` with ``k(y)_t = kernel(x_t, y)``."""
    kernel = KernelSpec() if kernel is None else kernel
    if lam <= 0:
        raise ValueError("KCRC requires lam > 0")
    X = dictionary.data
    y = _vector(y, X.shape[0])
    K = kernel_gram(dictionary, kernel)
    check_psd(K)
    ky = kernel(X, y)[:, 0]
    kyy = float(kernel(y, y)[0, 0])
    alpha = _spd_solve(K + lam * np.eye(K.shape[0]), ky, "KCRC")
    return _finish(alpha, lambda a: kcrc_cost(K, ky, kyy, a, lam),
                   lambda a: kcrc_grad(K, ky, a, lam), ky)


def pcrc_patch_solve(local, test, j, lam):
    """Ridge code of test patch ``j`` over the location-matched dictionary ``M_j``."""
    if not 0 <= j < local.q:
        raise IndexError(f"location {j} out of range for q={local.q}")
    return crc_solve(local.location_dictionary(j), test.Y[:, j], lam)


def gpcrc_solve(local, test, j, lam, gamma):
    """GP-CRC code of test patch ``j`` over the augmented all-patch dictionary.

    Minimizes ``||y_j - Mp||^2 + lam ||p||^2 + gamma ||Mp - M_j p_jj||^2``
    where ``p_jj`` keeps only the location-``j`` entries of ``p``.
    """
    if not 0 <= j < local.q:
        raise IndexError(f"location {j} out of range for q={local.q}")
    aug = local.augmented_dictionary()
    M = aug.data
    y = _vector(test.Y[:, j], M.shape[0])
    cols = local.location_columns(j)
    rhs = M.T @ y
    p = _spd_solve(gpcrc_system(aug, cols, lam, gamma), rhs, "GP-CRC")
    return _finish(p, lambda a: gpcrc_cost(M, y, a, cols, lam, gamma),
                   lambda a: gpcrc_grad(M, y, a, cols, lam, gamma), rhs)


def pprocrc_solve(X, Y, y_i, lam, gamma):
    """Jointly optimal ``(alpha, beta)`` for one test patch.

    Solves the coupled system

        [2X^T X + lam I    -X^T Y     ] [a]   [X^T y_i]
        [  -Y^T X       2Y^T Y + gamma I] [b] = [Y^T y_i]

    which is SPD for ``lam, gamma > 0``.
    """
    if not (lam > 0 and gamma > 0):
        raise ValueError("PProCRC requires lam > 0 and gamma > 0")
    Xm, Ym = _as_matrix(X), _as_matrix(Y)
    y_i = _vector(y_i, Xm.shape[0], "y_i")
    if Ym.shape[0] != Xm.shape[0]:
        raise ValueError("X and Y must share the feature dimension")
    n = Xm.shape[1]
    rhs = np.concatenate([Xm.T @ y_i, Ym.T @ y_i])
    sol = _spd_solve(pprocrc_system(Xm, Ym, lam, gamma), rhs, "PProCRC")
    alpha, beta = sol[:n], sol[n:]
    ga, gb = pprocrc_grad(Xm, Ym, y_i, alpha, beta, lam, gamma)
    return CoefficientSolution(
        alpha=alpha, beta=beta,
        achieved_cost=pprocrc_cost(Xm, Ym, y_i, alpha, beta, lam, gamma),
        grad_norm=float(np.hypot(np.linalg.norm(ga), np.linalg.norm(gb))))


@dataclass
class PProCRCFactor:
    """Reusable half of the PProCRC block system for a fixed training ``X``.

    Holds the Cholesky factor of ``A = 2 X^T X + lam I`` and ``W = A^-1 X^T``
    so every test image only needs a ``q x q`` Schur complement solve.
    """

    X: np.ndarray
    lam: float
    W: np.ndarray

    @classmethod
    def build(cls, X, lam):
        X = _as_matrix(X)
        if not lam > 0:
            raise ValueError("PProCRC requires lam > 0")
        d, n = X.shape
        if d < n:
            # push-through: (2 X^T X + lam I)^-1 X^T = X^T (2 X X^T + lam I)^-1
            cf = _cho(2.0 * (X @ X.T) + lam * np.eye(d), "PProCRC")
            W = linalg.cho_solve(cf, X, check_finite=False).T
        else:
            cf = _cho(2.0 * (X.T @ X) + lam * np.eye(n), "PProCRC")
            W = linalg.cho_solve(cf, X.T, check_finite=False)
        return cls(X=X, lam=float(lam), W=W)

    def solve_patches(self, Y, gamma):
        """Solve the block system for every column of ``Y`` as ``y_i``.

        Returns ``alpha`` (``N x q``) and ``beta`` (``q x q``); column ``i``
        belongs to test patch ``i``.
        """
        if not gamma > 0:
            raise ValueError("PProCRC requires gamma > 0")
        Y = _as_matrix(Y)
        q = Y.shape[1]
        wy = self.W @ Y                      # A^-1 X^T Y
        xty = self.X.T @ Y
        yty = Y.T @ Y
        coupling = xty.T @ wy                # Y^T X A^-1 X^T Y
        S = 2.0 * yty + gamma * np.eye(q) - coupling
        S = 0.5 * (S + S.T)
        rhs = yty + coupling
        beta = _spd_solve(S, rhs, "PProCRC Schur complement")
        alpha = wy + wy @ beta
        return alpha, beta


# --------------------------------------------------------------------------
# validation oracle


def oracle_descent_solve(cost, grad, x0, tolerance=1e-10, max_iters=200_000):
    """Gradient descent with Armijo backtracking, run until ``||grad|| <= tolerance``.

    Intended only for validating the closed forms on small convex problems.
    ``x0`` is a starting point or an integer dimension (start at zero).
    """
    x = np.zeros(int(x0)) if np.isscalar(x0) else np.array(x0, dtype=np.float64)
    f, g = cost(x), grad(x)
    step = 1.0
    for _ in range(max_iters):
        gn2 = float(g @ g)
        if np.sqrt(gn2) <= tolerance:
            return x
        step *= 2.0
        while True:
            x_new = x - step * g
            f_new = cost(x_new)
            if f_new <= f - 0.5 * step * gn2:
                g_new = grad(x_new)
                break
            # near the optimum the decrease drowns in roundoff of the cost;
            # fall back to the slope along -g, which is still accurate
            if abs(f_new - f) <= 1e-12 * max(1.0, abs(f)):
                g_new = grad(x_new)
                if g_new @ g >= 0.0:
                    break
            step *= 0.5
            if step < 1e-300:
                return x
        x, f, g = x_new, f_new, g_new
    raise DescentBudgetExceeded(
        f"gradient norm {np.linalg.norm(g):.3e} > {tolerance:.1e} after {max_iters} iterations")
