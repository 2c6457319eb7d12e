"""Residual rules, argmin decisions and patch majority voting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import solvers
from .solvers import PProCRCFactor, SolverConfig

GLOBAL_METHODS = ("crc", "ecrc", "rcrc", "kcrc", "procrc", "eprocrc")
PATCH_METHODS = ("pcrc", "gpcrc", "pprocrc")
METHODS = GLOBAL_METHODS + PATCH_METHODS
RESIDUAL_RULES = ("normalized", "collaborative")

# residuals this close (relative) to the minimum count as tied
TIE_RTOL = 1e-10


class ClassificationError(RuntimeError):
    """No class can represent the query (every residual is infinite)."""


def argmin_tiebreak(r, rtol=TIE_RTOL):
    """Index of the smallest entry; near-ties go to the smallest index."""
    r = np.asarray(r, dtype=np.float64)
    finite = np.isfinite(r)
    if not finite.any():
        raise ClassificationError("all class residuals are infinite")
    best = r[finite].min()
    return int(np.flatnonzero(r <= best + rtol * abs(best))[0])


@dataclass(frozen=True)
class ResidualVector:
    r: np.ndarray
    argmin_class: int
    margin: float

    @classmethod
    def from_residuals(cls, r):
        r = np.asarray(r, dtype=np.float64)
        k = argmin_tiebreak(r)
        others = np.delete(r, k)
        margin = float(others.min() - r[k]) if others.size else np.inf
        return cls(r=r, argmin_class=k, margin=margin)


@dataclass(frozen=True)
class VoteTally:
    counts: np.ndarray
    residual_sums: np.ndarray
    winner: int
    patch_labels: np.ndarray

    @property
    def q(self):
        return int(self.counts.sum())


def normalized_residuals(X, class_offsets, Y, A):
    """Batch ``r_k = ||y - X_k a_k||^2 / ||a_k||^2``.

    ``Y`` is ``d x m`` queries, ``A`` is ``N x m`` codes; returns ``c x m``.
    A class whose coefficients are all zero gets ``+inf``.
    """
    out = np.empty((len(class_offsets), Y.shape[1]))
    for k, ix in enumerate(class_offsets):
        ak = A[ix]
        err = Y - X[:, ix] @ ak
        num = np.einsum("ij,ij->j", err, err)
        den = np.einsum("ij,ij->j", ak, ak)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[k] = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return out


def collaborative_residuals(X, class_offsets, A):
    """Batch ``||X a - X_k a_k||^2`` (the alternative ProCRC decision rule)."""
    full = X @ A
    out = np.empty((len(class_offsets), A.shape[1]))
    for k, ix in enumerate(class_offsets):
        diff = full - X[:, ix] @ A[ix]
        out[k] = np.einsum("ij,ij->j", diff, diff)
    return out


def kernel_residuals(K, class_offsets, KY, kyy, A):
    """Feature-space normalized residuals for KCRC.

    ``||phi(y) - Phi_k a_k||^2 = k(y,y) - 2 k_k(y)^T a_k + a_k^T K_kk a_k``,
    divided by ``||a_k||^2``.
    """
    out = np.empty((len(class_offsets), A.shape[1]))
    for k, ix in enumerate(class_offsets):
        ak = A[ix]
        num = (kyy - 2.0 * np.einsum("ij,ij->j", KY[ix], ak)
               + np.einsum("ij,ij->j", ak, K[np.ix_(ix, ix)] @ ak))
        num = np.maximum(num, 0.0)
        den = np.einsum("ij,ij->j", ak, ak)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[k] = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return out


def class_residuals(dictionary, y, solution):
    """Per-class normalized residuals of one query for a given code."""
    X = dictionary.data
    y = np.asarray(y, dtype=np.float64)
    alpha = np.asarray(solution.alpha)
    if y.shape != (X.shape[0],) or alpha.shape != (X.shape[1],):
        raise ValueError("query or coefficient length does not match the dictionary")
    r = normalized_residuals(X, dictionary.class_offsets, y[:, None], alpha[:, None])[:, 0]
    return ResidualVector.from_residuals(r)


def solve_global(dictionary, y, method, config, cov=None, priors=None):
    if method == "crc":
        return solvers.crc_solve(dictionary, y, config.lam)
    if method == "ecrc":
        if cov is None:
            from .dictionary import build_covariance
            cov = build_covariance(dictionary)
        return solvers.ecrc_solve(dictionary, cov, y, config.lam)
    if method == "rcrc":
        return solvers.rcrc_solve(dictionary, y, config.lam, config.tau, config.eta,
                                  config.tolerance, config.max_iters)
    if method == "kcrc":
        return solvers.kcrc_solve(dictionary, y, config.lam, config.kernel)
    if method == "procrc":
        return solvers.procrc_solve(dictionary, y, config.lam, config.gamma)
    if method == "eprocrc":
        return solvers.eprocrc_solve(dictionary, y, config.lam, config.gamma, priors)
    raise ValueError(f"method {method!r} is not a whole-image method; choose from {GLOBAL_METHODS}")


def classify_global(dictionary, y, method="crc", config=None, cov=None, priors=None,
                    residual="normalized"):
    """Classify one feature vector with a whole-image CRC variant.

    Returns ``(class_index, ResidualVector)``; ties go to the smallest
    class index.
    """
    config = SolverConfig() if config is None else config
    if residual not in RESIDUAL_RULES:
        raise ValueError(f"residual must be one of {RESIDUAL_RULES}")
    sol = solve_global(dictionary, y, method, config, cov, priors)
    a = sol.alpha[:, None]
    if method == "kcrc":
        kern = config.kernel
        X = dictionary.data
        K = solvers.kernel_gram(dictionary, kern)
        r = kernel_residuals(K, dictionary.class_offsets, kern(X, y),
                             kern(y, y)[0], a)[:, 0]
    elif residual == "collaborative":
        r = collaborative_residuals(dictionary.data, dictionary.class_offsets, a)[:, 0]
    else:
        r = normalized_residuals(dictionary.data, dictionary.class_offsets,
                                 np.asarray(y, dtype=np.float64)[:, None], a)[:, 0]
    rv = ResidualVector.from_residuals(r)
    return rv.argmin_class, rv


def classify_patch(local, test, j, method="pcrc", config=None):
    """Label test patch ``j`` by the residual argmin over its own code.

    ``pcrc`` codes over the location-matched ``M_j``; ``gpcrc`` codes over
    the augmented dictionary and restricts by class across all locations.
    """
    config = SolverConfig() if config is None else config
    if method == "pcrc":
        d = local.location_dictionary(j)
        sol = solvers.pcrc_patch_solve(local, test, j, config.lam)
    elif method == "gpcrc":
        d = local.augmented_dictionary()
        sol = solvers.gpcrc_solve(local, test, j, config.lam, config.gamma)
    else:
        raise ValueError("classify_patch supports 'pcrc' and 'gpcrc'")
    rv = class_residuals(d, test.Y[:, j], sol)
    return rv.argmin_class, rv


def majority_vote(labels, residuals=None, n_classes=None):
    """Deterministic plurality vote over patch labels.

    Ties on vote count go to the class with the smallest summed residual
    (``residuals`` is ``q x c``, one residual vector per patch), remaining
    ties to the smallest class index.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot vote over an empty label set")
    if residuals is not None:
        residuals = np.asarray([getattr(r, "r", r) for r in residuals], dtype=np.float64)
        if residuals.shape[0] != labels.size:
            raise ValueError("need one residual vector per patch")
        c = residuals.shape[1]
    else:
        c = int(labels.max()) + 1 if n_classes is None else int(n_classes)
    if n_classes is not None:
        c = max(c, int(n_classes))
    counts = np.bincount(labels, minlength=c)
    if residuals is None:
        sums = np.zeros(c)
    else:
        sums = np.zeros(c)
        sums[:residuals.shape[1]] = residuals.sum(axis=0)
    top = np.flatnonzero(counts == counts.max())
    if top.size > 1:
        best = sums[top].min()
        top = top[sums[top] == best]
    return VoteTally(counts=counts, residual_sums=sums, winner=int(top[0]),
                     patch_labels=labels)


def vote_from_residuals(R):
    """Label each patch from a ``c x q`` residual matrix, then vote."""
    labels = np.array([argmin_tiebreak(R[:, i]) for i in range(R.shape[1])])
    return majority_vote(labels, R.T, n_classes=R.shape[0])


def classify_pprocrc(local, test, lam, gamma, factor=None):
    """PProCRC image label: per-patch coupled codes, normalized residuals, vote.

    Each test patch ``y_i`` is coded jointly over the augmented training
    patch dictionary and the test image's own patch matrix ``Y``; patches
    are labelled from their training-side code and the image takes the
    majority label.
    """
    aug = local.augmented_dictionary()
    if factor is None:
        factor = PProCRCFactor.build(aug.data, lam)
    alpha, _ = factor.solve_patches(test.Y, gamma)
    R = normalized_residuals(aug.data, aug.class_offsets, test.Y, alpha)
    tally = vote_from_residuals(R)
    return tally.winner, tally
