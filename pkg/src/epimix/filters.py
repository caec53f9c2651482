"""Gaussian filtering recursions and marginal log-likelihoods.

Two filters share the update/marginal machinery and differ in prediction:

* prevalence -- textbook Kalman recursion on the AR(1) state
  X_{k+1} = F_{k+1} + A_k X_k + V_{k+1};
* incidence -- recursion on increments DX_k with prediction
  DX_{k+1} = G_{k+1} + (A_k - I) * (sum of updated means so far) and
  prediction covariance (A_k - I) (sum of updated covariances) (A_k - I)' +
  T_{k+1}.

The incidence prediction treats the updated increments as conditionally
independent given past observations.  That holds exactly for the first two
steps only; from the third observation on it is an approximation of the
model's true predictive distribution (later observations carry information
about earlier increments through the memory term, which the recursion never
revisits).  ``exact_loglik_oracle`` computes the exact marginal likelihood
of the same model for comparison.

Missing observations (NaN rows in y) trigger a prediction-only step: no
update, no likelihood contribution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .compartments import StateSpaceQuantities, variance_floor
from .errors import DomainError, NumericalError

LOG2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class FilterTrace:
    """Per-step filter output; row k corresponds to observation k+1."""

    pred_mean: np.ndarray   # (n, d)
    pred_cov: np.ndarray    # (n, d, d)
    upd_mean: np.ndarray    # (n, d)
    upd_cov: np.ndarray     # (n, d, d)
    marg_mean: np.ndarray   # (n, q)
    marg_cov: np.ndarray    # (n, q, q)
    loglik: float
    floored: int            # innovation variances raised to the floor
    sum_mean: np.ndarray | None = None  # incidence only: running updated-mean sum
    sum_cov: np.ndarray | None = None   # incidence only: running updated-cov sum

    def predicted(self, k: int) -> GaussianBelief:
        return GaussianBelief(self.pred_mean[k], self.pred_cov[k])

    def updated(self, k: int) -> GaussianBelief:
        return GaussianBelief(self.upd_mean[k], self.upd_cov[k])


@njit(cache=True)
def _gaussian_step(pred_m, pred_c, B, Pk, yk, observed, floor,
                   marg_m, marg_c, upd_m, upd_c):
    """Marginal density + update for one observation; returns (ll, floored)."""
    d = pred_m.shape[0]
    q = B.shape[0]
    marg_m[:] = B @ pred_m
    Om = B @ pred_c @ B.T + Pk
    floored = 0
    for i in range(q):
        if Om[i, i] < floor:
            Om[i, i] = floor
            floored += 1
    marg_c[:] = Om
    if not observed:
        upd_m[:] = pred_m
        upd_c[:] = pred_c
        return 0.0, floored
    L = np.linalg.cholesky(Om)
    innov = yk - marg_m
    z = np.linalg.solve(Om, innov)
    logdet = 0.0
    for i in range(q):
        logdet += np.log(L[i, i])
    ll = -0.5 * (q * LOG2PI + innov @ z) - logdet
    K = np.linalg.solve(Om, B @ pred_c).T
    upd_m[:] = pred_m + K @ innov
    C = pred_c - K @ (B @ pred_c)
    for i in range(d):
        for j in range(d):
            upd_c[i, j] = 0.5 * (C[i, j] + C[j, i])
    return ll, floored


@njit(cache=True)
def _prevalence_kernel(A, F, T, B, P, y, obs_mask, x0, T0, floor):
    n, d = F.shape
    q = B.shape[0]
    pred_m = np.empty((n, d))
    pred_c = np.empty((n, d, d))
    upd_m = np.empty((n, d))
    upd_c = np.empty((n, d, d))
    marg_m = np.empty((n, q))
    marg_c = np.empty((n, q, q))
    cur_m = x0.copy()
    cur_c = T0.copy()
    loglik = 0.0
    floored = 0
    for k in range(n):
        pred_m[k] = F[k] + A[k] @ cur_m
        pred_c[k] = A[k] @ cur_c @ A[k].T + T[k]
        ll, fl = _gaussian_step(
            pred_m[k], pred_c[k], B, P[k], y[k], obs_mask[k], floor,
            marg_m[k], marg_c[k], upd_m[k], upd_c[k],
        )
        loglik += ll
        floored += fl
        cur_m = upd_m[k]
        cur_c = upd_c[k]
    return loglik, floored, pred_m, pred_c, upd_m, upd_c, marg_m, marg_c


@njit(cache=True)
def _incidence_kernel(A, G, T, B, P, y, obs_mask, floor):
    n, d = G.shape
    q = B.shape[0]
    pred_m = np.empty((n, d))
    pred_c = np.empty((n, d, d))
    upd_m = np.empty((n, d))
    upd_c = np.empty((n, d, d))
    marg_m = np.empty((n, q))
    marg_c = np.empty((n, q, q))
    s_mean = np.zeros(d)
    s_cov = np.zeros((d, d))
    eye = np.eye(d)
    loglik = 0.0
    floored = 0
    pred_m[0] = G[0]
    pred_c[0] = T[0]
    for k in range(n):
        ll, fl = _gaussian_step(
            pred_m[k], pred_c[k], B, P[k], y[k], obs_mask[k], floor,
            marg_m[k], marg_c[k], upd_m[k], upd_c[k],
        )
        loglik += ll
        floored += fl
        s_mean += upd_m[k]
        s_cov += upd_c[k]
        if k + 1 < n:
            Am = A[k + 1] - eye
            pred_m[k + 1] = G[k + 1] + Am @ s_mean
            pred_c[k + 1] = Am @ s_cov @ Am.T + T[k + 1]
    return loglik, floored, pred_m, pred_c, upd_m, upd_c, marg_m, marg_c, s_mean, s_cov


def _as_obs(y: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if y.shape[1] != q:
        raise DomainError(f"observations have dimension {y.shape[1]}, expected {q}")
    mask = np.all(np.isfinite(y), axis=1)
    y = np.where(np.isfinite(y), y, 0.0)
    return y, mask


def prevalence_filter(
    q: StateSpaceQuantities,
    y: np.ndarray,
    init: tuple[np.ndarray, np.ndarray] | None = None,
) -> FilterTrace:
    """Kalman filter and marginal log-likelihood for prevalence observations.

    ``init`` is the (mean, covariance) of X_0; by default X_0 = x0 is known
    exactly (zero covariance).
    """
    yy, mask = _as_obs(y, q.B.shape[0])
    if yy.shape[0] != q.n:
        raise DomainError(f"{yy.shape[0]} observations but quantities cover n={q.n}")
    if init is None:
        x0, T0 = q.x0, np.zeros((q.d, q.d))
    else:
        x0 = np.asarray(init[0], dtype=np.float64)
        T0 = np.asarray(init[1], dtype=np.float64)
    floor = variance_floor(q.n_pop)
    try:
        ll, floored, pm, pc, um, uc, mm, mc = _prevalence_kernel(
            q.A, q.F, q.T, q.B, q.P, yy, mask, x0, T0, floor
        )
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"innovation covariance singular after flooring: {exc}")
    return FilterTrace(pm, pc, um, uc, mm, mc, float(ll), int(floored))


def incidence_filter(
    q: StateSpaceQuantities,
    y: np.ndarray,
    init: tuple[np.ndarray, np.ndarray] | None = None,
) -> FilterTrace:
    """Increment filter and marginal log-likelihood for incidence observations.

    ``init`` overrides the (mean, covariance) of the first increment; the
    default is (G_1, T_1).
    """
    yy, mask = _as_obs(y, q.B.shape[0])
    if yy.shape[0] != q.n:
        raise DomainError(f"{yy.shape[0]} observations but quantities cover n={q.n}")
    G = q.G
    T = q.T
    if init is not None:
        G = G.copy()
        T = T.copy()
        G[0] = np.asarray(init[0], dtype=np.float64)
        T[0] = np.asarray(init[1], dtype=np.float64)
    floor = variance_floor(q.n_pop)
    try:
        ll, floored, pm, pc, um, uc, mm, mc, sm, sc = _incidence_kernel(
            q.A, G, T, q.B, q.P, yy, mask, floor
        )
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"innovation covariance singular after flooring: {exc}")
    return FilterTrace(pm, pc, um, uc, mm, mc, float(ll), int(floored),
                       sum_mean=sm, sum_cov=sc)


# ---------------------------------------------------------------------------
# exact oracle


def _mvn_logpdf(r: np.ndarray, cov: np.ndarray) -> float:
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        scale = max(np.abs(cov).max(), 1e-300)
        try:
            L = np.linalg.cholesky(cov + 1e-14 * scale * np.eye(len(r)))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"joint covariance not positive definite: {exc}")
    z = np.linalg.solve(L, r)
    return float(-0.5 * (len(r) * LOG2PI + z @ z) - np.log(np.diag(L)).sum())


def exact_loglik_oracle(
    q: StateSpaceQuantities,
    y: np.ndarray,
    scheme: str | None = None,
    init: tuple[np.ndarray, np.ndarray] | None = None,
) -> float:
    """Exact marginal log-density of y under the joint Gaussian model.

    Unrolls the linear state (or increment) recursion to express every latent
    vector as an affine function of the independent noise terms, builds the
    dense joint covariance of all observations, and evaluates the Gaussian
    log-density by a Cholesky solve.  Intended for testing at small n
    (n * d <= 200 or so).
    """
    scheme = scheme or q.scheme
    yy, mask = _as_obs(y, q.B.shape[0])
    if not mask.all():
        raise DomainError("the oracle does not support missing observations")
    n, d = q.n, q.d
    qdim = q.B.shape[0]
    if scheme == "prevalence":
        if init is None:
            x0, T0 = q.x0, np.zeros((d, d))
        else:
            x0 = np.asarray(init[0], dtype=np.float64)
            T0 = np.asarray(init[1], dtype=np.float64)
        # X_k = mean_k + coef[k,0] (X_0 - x0) + sum_{l>=1} coef[k,l] V_l
        mean = np.zeros((n, d))
        coef = np.zeros((n, n + 1, d, d))
        prev_mean = x0
        for k in range(n):
            mean[k] = q.F[k] + q.A[k] @ prev_mean
            if k == 0:
                coef[0, 0] = q.A[0]
            else:
                for l in range(k + 1):
                    coef[k, l] = q.A[k] @ coef[k - 1, l]
            coef[k, k + 1] = np.eye(d)
            prev_mean = mean[k]
        noise_cov = [T0] + [q.T[k] for k in range(n)]
    elif scheme == "incidence":
        # DX_k = mean_k + sum_{l>=1} coef[k,l] V_l with V_l ~ N(0, T_l)
        G = q.G.copy()
        T = q.T.copy()
        if init is not None:
            G[0] = np.asarray(init[0], dtype=np.float64)
            T[0] = np.asarray(init[1], dtype=np.float64)
        mean = np.zeros((n, d))
        coef = np.zeros((n, n + 1, d, d))
        for k in range(n):
            if k == 0:
                mean[0] = G[0]
            else:
                Am = q.A[k] - np.eye(d)
                mean[k] = G[k] + Am @ mean[:k].sum(axis=0)
                for l in range(1, k + 1):
                    coef[k, l] = Am @ coef[:k, l].sum(axis=0)
            coef[k, k + 1] = np.eye(d)
        noise_cov = [np.zeros((d, d))] + [T[k] for k in range(n)]
    else:
        raise DomainError(f"unknown scheme {scheme!r}")
    mu = (mean @ q.B.T).reshape(-1)
    cov = np.zeros((n * qdim, n * qdim))
    for k in range(n):
        for j in range(k + 1):
            C = np.zeros((d, d))
            for l in range(j + 2):
                C += coef[k, l] @ noise_cov[l] @ coef[j, l].T
            blk = q.B @ C @ q.B.T
            cov[k * qdim:(k + 1) * qdim, j * qdim:(j + 1) * qdim] = blk
            cov[j * qdim:(j + 1) * qdim, k * qdim:(k + 1) * qdim] = blk.T
        cov[k * qdim:(k + 1) * qdim, k * qdim:(k + 1) * qdim] += q.P[k]
    return _mvn_logpdf(yy.reshape(-1) - mu, cov)


def simulate_statespace(
    q: StateSpaceQuantities, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one latent path and observation series from the Gaussian model.

    Returns (latents, y): for the prevalence scheme latents are the states
    X_1..X_n, for the incidence scheme the increments DX_1..DX_n.
    """
    n, d = q.n, q.d
    qdim = q.B.shape[0]
    latents = np.empty((n, d))
    y = np.empty((n, qdim))
    chol_T = [_safe_chol(q.T[k]) for k in range(n)]
    if q.scheme == "prevalence":
        x = q.x0.copy()
        for k in range(n):
            x = q.F[k] + q.A[k] @ x + chol_T[k] @ rng.standard_normal(d)
            latents[k] = x
    else:
        acc = np.zeros(d)
        for k in range(n):
            if k == 0:
                m = q.G[0]
            else:
                m = q.G[k] + (q.A[k] - np.eye(d)) @ acc
            latents[k] = m + chol_T[k] @ rng.standard_normal(d)
            acc += latents[k]
    for k in range(n):
        w = np.sqrt(np.maximum(np.diag(q.P[k]), 0.0)) * rng.standard_normal(qdim)
        y[k] = q.B @ latents[k] + w
    return latents, y


def _safe_chol(mat: np.ndarray) -> np.ndarray:
    from .compartments import _psd_cholesky

    return _psd_cholesky(mat)


def _augmented_incidence_loglik(q: StateSpaceQuantities, y: np.ndarray) -> float:
    """Exact incidence likelihood via a Kalman filter on the stacked state
    (X_k, X_{k-1}).  Independent cross-check of ``exact_loglik_oracle``."""
    yy, mask = _as_obs(y, q.B.shape[0])
    n, d = q.n, q.d
    qdim = q.B.shape[0]
    Bz = np.hstack([q.B, -q.B])
    # with x0 absorbed (state measured as deviation X_k - x0), F_k == G_k
    m = np.zeros(2 * d)
    S = np.zeros((2 * d, 2 * d))
    ll = 0.0
    floor = variance_floor(q.n_pop)
    for k in range(n):
        Fz = np.zeros((2 * d, 2 * d))
        Fz[:d, :d] = q.A[k]
        Fz[d:, :d] = np.eye(d)
        m = np.concatenate([q.G[k], np.zeros(d)]) + Fz @ m
        S = Fz @ S @ Fz.T
        S[:d, :d] += q.T[k]
        Om = Bz @ S @ Bz.T + q.P[k]
        Om[np.diag_indices(qdim)] = np.maximum(np.diag(Om), floor)
        if mask[k]:
            r = yy[k] - Bz @ m
            ll += _mvn_logpdf(r, Om)
            K = S @ Bz.T @ np.linalg.inv(Om)
            m = m + K @ r
            S = S - K @ Bz @ S
            S = 0.5 * (S + S.T)
    return float(ll)
