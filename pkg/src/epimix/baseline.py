"""Two-step per-unit baseline: simplex maximum likelihood, then empirical moments.

Each unit's filter log-likelihood is maximized independently by multi-start
Nelder-Mead over the unconstrained psi scale (the links enforce all natural
constraints), and the population summary is the empirical mean and standard
deviation of the per-unit estimates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError
from .popmodel import LinkSpec, link_apply


@dataclass
class SimplexConfig:
    reflection: float = 1.0
    expansion: float = 2.0
    contraction: float = 0.5
    shrink: float = 0.5
    max_evals: int = 400
    tol: float = 1e-6          # stop when the simplex objective spread drops below this
    n_starts: int = 10
    start_box: dict[str, tuple[float, float]] | None = None  # psi-scale start draws


def nelder_mead(
    objective: Callable[[np.ndarray], float],
    start: np.ndarray,
    cfg: SimplexConfig | None = None,
) -> tuple[np.ndarray, float, int]:
    """Minimize with the standard simplex moves; returns (argmin, value, evals).

    Non-finite objective values are treated as +inf, so candidate steps into
    an invalid region are simply rejected.
    """
    cfg = cfg or SimplexConfig()
    start = np.asarray(start, dtype=np.float64)
    dim = len(start)

    evals = 0

    def f(x):
        nonlocal evals
        evals += 1
        v = objective(x)
        return float(v) if np.isfinite(v) else np.inf

    f0 = f(start)
    if not np.isfinite(f0):
        raise ConfigurationError("objective is not finite at the starting point")
    simplex = [start]
    values = [f0]
    for i in range(dim):
        x = start.copy()
        x[i] += 0.05 * abs(x[i]) + 0.1
        simplex.append(x)
        values.append(f(x))
    simplex = np.array(simplex)
    values = np.array(values)

    while evals < cfg.max_evals:
        order = np.argsort(values, kind="stable")
        simplex = simplex[order]
        values = values[order]
        finite = values[np.isfinite(values)]
        if len(finite) == dim + 1 and finite[-1] - finite[0] < cfg.tol:
            break
        centroid = simplex[:-1].mean(axis=0)
        xr = centroid + cfg.reflection * (centroid - simplex[-1])
        fr = f(xr)
        if fr < values[0]:
            xe = centroid + cfg.expansion * (xr - centroid)
            fe = f(xe)
            if fe < fr:
                simplex[-1], values[-1] = xe, fe
            else:
                simplex[-1], values[-1] = xr, fr
        elif fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
        else:
            if fr < values[-1]:
                xc = centroid + cfg.contraction * (xr - centroid)
            else:
                xc = centroid + cfg.contraction * (simplex[-1] - centroid)
            fc = f(xc)
            if fc < min(fr, values[-1]):
                simplex[-1], values[-1] = xc, fc
            else:
                for i in range(1, dim + 1):
                    simplex[i] = simplex[0] + cfg.shrink * (simplex[i] - simplex[0])
                    values[i] = f(simplex[i])
    best = int(np.argmin(values))
    return simplex[best].copy(), float(values[best]), evals


@dataclass
class UnitFit:
    phi: np.ndarray | None
    psi: np.ndarray | None
    loglik: float
    start_index: int
    n_evals: int
    ok: bool
    extreme: bool = False


def fit_unit_mle(
    y: np.ndarray,
    loglik_fn: Callable[[np.ndarray, np.ndarray], float],
    link: LinkSpec,
    cfg: SimplexConfig,
    rng: np.random.Generator,
    r0_cap: float = 20.0,
) -> UnitFit:
    """Multi-start simplex maximum likelihood for one unit.

    Starts are drawn uniformly from ``cfg.start_box`` (psi scale); the best
    final log-likelihood wins.  A fitted reproduction number beyond
    ``r0_cap`` flags the unit as extreme (kept, but reported).
    """
    if cfg.start_box is None:
        raise ConfigurationError("cfg.start_box is required (psi-scale intervals)")
    lo = np.array([cfg.start_box[name][0] for name in link.names])
    hi = np.array([cfg.start_box[name][1] for name in link.names])

    def objective(psi):
        return -loglik_fn(link_apply(link, psi), y)

    best: UnitFit | None = None
    total_evals = 0
    for s in range(cfg.n_starts):
        start = rng.uniform(lo, hi)
        if not np.isfinite(objective(start)):
            continue
        psi_hat, val, evals = nelder_mead(objective, start, cfg)
        total_evals += evals
        if np.isfinite(val) and (best is None or -val > best.loglik):
            best = UnitFit(
                phi=link_apply(link, psi_hat),
                psi=psi_hat,
                loglik=-val,
                start_index=s,
                n_evals=total_evals,
                ok=True,
            )
    if best is None:
        return UnitFit(phi=None, psi=None, loglik=-np.inf, start_index=-1,
                       n_evals=total_evals, ok=False)
    if "r0" in link.names and best.phi[link.index("r0")] > r0_cap:
        best.extreme = True
    best.n_evals = total_evals
    return best


@dataclass
class MomentSummary:
    names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray
    trimmed_mean: np.ndarray
    trimmed_sd: np.ndarray
    n_fit: int
    n_unfit: int
    n_extreme: int


def empirical_moments(fits: Sequence[UnitFit], link: LinkSpec) -> MomentSummary:
    """Sample mean and standard deviation (n-1 denominator) of per-unit fits.

    The trimmed variant additionally drops units flagged extreme; both are
    reported.  Order of the fits does not matter.
    """
    ok = [f for f in fits if f.ok]
    if len(ok) < 2:
        raise ConfigurationError("need at least two fitted units for moments")
    phis = np.array([f.phi for f in ok])
    kept = np.array([not f.extreme for f in ok])
    if kept.sum() >= 2:
        tphis = phis[kept]
        tmean, tsd = tphis.mean(axis=0), tphis.std(axis=0, ddof=1)
    else:
        tmean, tsd = phis.mean(axis=0), phis.std(axis=0, ddof=1)
    return MomentSummary(
        names=link.names,
        mean=phis.mean(axis=0),
        sd=phis.std(axis=0, ddof=1),
        trimmed_mean=tmean,
        trimmed_sd=tsd,
        n_fit=len(ok),
        n_unfit=len(fits) - len(ok),
        n_extreme=int((~kept).sum()),
    )


def fit_km(
    ys: Sequence[np.ndarray],
    loglik_fn: Callable[[np.ndarray, np.ndarray], float],
    link: LinkSpec,
    cfg: SimplexConfig,
    seed: int = 0,
) -> tuple[list[UnitFit], MomentSummary]:
    """Fit every unit independently and summarize (the full two-step baseline)."""
    ss = np.random.SeedSequence(seed)
    fits = [
        fit_unit_mle(y, loglik_fn, link, cfg, np.random.default_rng(ch))
        for y, ch in zip(ys, ss.spawn(len(ys)))
    ]
    return fits, empirical_moments(fits, link)
