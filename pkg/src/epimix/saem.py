"""Stochastic-approximation EM with a Metropolis-Hastings simulation step.

One iteration: (S) refresh each unit's unconstrained effects psi_u by MH
with the population marginal as proposal, so the acceptance probability
reduces to the filter-likelihood ratio; (SA) relax the sufficient statistics
S1 = sum_u psi_u and S2 = sum_u psi_u^2 toward the current chain with step
size alpha_m; (M) closed-form update beta = S1/U, Gamma = S2/U - (S1/U)^2,
with simulated-annealing lower bounds on the variances during burn-in and a
geometric variance decay for fixed-effect components afterwards.

Step sizes follow alpha_m = 1 for m <= m0, then (m - m0)^(-nu0); the
divergence / square-summability conditions hold for nu0 in (0.5, 1].
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, NumericalError
from .popmodel import LinkSpec, PopulationParams, effects_logdensity, link_apply

VAR_FLOOR = 1e-12


@dataclass
class SaemConfig:
    m0: int = 500                 # burn-in iterations (alpha = 1)
    nu0: float = 0.6              # step-size exponent, must lie in (0.5, 1]
    k0: float = 0.87              # per-iteration variance decay of fixed effects
    mu0: float = 1e-3             # relative-change stopping threshold
    m_max: int = 1000
    tau0: float = 0.98            # simulated-annealing variance retention
    consecutive_hits: int = 3     # stopping criterion must hold this many times in a row
    mh_iters: int = 1
    seed: int = 0
    init_box: dict[str, tuple[float, float]] | None = None  # psi-scale draw box for beta0
    gamma0: float = 1.0
    anneal_random: bool = True
    decay_fixed: bool = True
    proposal: str = "prior"       # "prior" | "walk"
    walk_scale: float = 0.25

    def validate(self) -> None:
        if not (0.5 < self.nu0 <= 1.0):
            raise ConfigurationError(f"nu0 must lie in (0.5, 1], got {self.nu0}")
        for name in ("k0", "tau0"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ConfigurationError(f"{name} must lie in (0,1), got {v}")
        if self.proposal not in ("prior", "walk"):
            raise ConfigurationError(f"unknown proposal {self.proposal!r}")
        if self.m_max < 1 or self.m0 < 0:
            raise ConfigurationError("m_max must be >= 1 and m0 >= 0")


@dataclass
class SufficientStats:
    s1: np.ndarray
    s2: np.ndarray


@dataclass
class SaemTrace:
    names: tuple[str, ...]
    betas: np.ndarray         # (m, c)
    variances: np.ndarray     # (m, c) working variances (Gamma / annealed omega)
    accept_rate: np.ndarray   # (m,)
    mean_loglik: np.ndarray   # (m,)
    converged: bool
    n_var_floored: int = 0

    @property
    def n_iterations(self) -> int:
        return len(self.accept_rate)


@dataclass
class SaemResult:
    theta: PopulationParams
    trace: SaemTrace
    final_psi: np.ndarray     # (U, c) last chain state
    final_loglik: np.ndarray  # (U,) cached unit log-likelihoods


def step_size(m: int, cfg: SaemConfig) -> float:
    """alpha_m = 1 during burn-in, then (m - m0)^(-nu0)."""
    if m < 1:
        raise ConfigurationError(f"iteration index must be >= 1, got {m}")
    if m <= cfg.m0:
        return 1.0
    return float((m - cfg.m0) ** (-cfg.nu0))


def sa_update(stats: SufficientStats, chain: np.ndarray, alpha: float) -> SufficientStats:
    """Relax the statistics toward the current chain sums."""
    target1 = chain.sum(axis=0)
    target2 = (chain**2).sum(axis=0)
    return SufficientStats(
        s1=stats.s1 + alpha * (target1 - stats.s1),
        s2=stats.s2 + alpha * (target2 - stats.s2),
    )


def m_step(
    stats: SufficientStats,
    var_prev: np.ndarray,
    link: LinkSpec,
    cfg: SaemConfig,
    m: int,
    n_units: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Closed-form maximization; returns (beta, working variances, n_floored)."""
    if n_units < 2:
        raise ConfigurationError("need at least two units for the variance update")
    beta = stats.s1 / n_units
    gamma_hat = stats.s2 / n_units - beta**2
    floored = int(np.sum(gamma_hat < VAR_FLOOR))
    gamma_hat = np.maximum(gamma_hat, VAR_FLOOR)
    var = np.empty_like(var_prev)
    random = link.random_mask
    if m <= cfg.m0:
        # burn-in: every component is treated as random, with annealing
        if cfg.anneal_random:
            var[:] = np.maximum(cfg.tau0 * var_prev, gamma_hat)
        else:
            var[:] = gamma_hat
    else:
        var[random] = gamma_hat[random]
        if cfg.decay_fixed:
            var[~random] = cfg.k0 * var_prev[~random]
        else:
            var[~random] = var_prev[~random]
    return beta, var, floored


def mh_step(
    psi: np.ndarray,
    loglik: float,
    beta: np.ndarray,
    var: np.ndarray,
    link: LinkSpec,
    y: np.ndarray,
    loglik_fn: Callable[[np.ndarray, np.ndarray], float],
    rng: np.random.Generator,
    cfg: SaemConfig,
) -> tuple[np.ndarray, float, bool]:
    """One Metropolis-Hastings move for a single unit; returns (psi, ll, accepted).

    With the marginal prior as proposal the acceptance probability is the
    likelihood ratio; the random-walk variant keeps the prior-density ratio.
    A candidate with non-finite likelihood is rejected outright.
    """
    sd = np.sqrt(var)
    if cfg.proposal == "prior":
        cand = beta + sd * rng.standard_normal(len(beta))
        prior_corr = 0.0
    else:
        cand = psi + cfg.walk_scale * sd * rng.standard_normal(len(beta))
        theta = PopulationParams(beta, np.maximum(var, VAR_FLOOR))
        prior_corr = effects_logdensity(theta, link, cand) - effects_logdensity(
            theta, link, psi
        )
        fixed = ~link.random_mask
        if fixed.any():
            g = np.maximum(var[fixed], VAR_FLOOR)
            r_c = cand[fixed] - beta[fixed]
            r_p = psi[fixed] - beta[fixed]
            prior_corr += float(-0.5 * np.sum((r_c**2 - r_p**2) / g))
    ll_cand = loglik_fn(link_apply(link, cand), y)
    if not np.isfinite(ll_cand):
        return psi, loglik, False
    if not np.isfinite(loglik):
        return cand, ll_cand, True
    if np.log(rng.random()) < ll_cand - loglik + prior_corr:
        return cand, ll_cand, True
    return psi, loglik, False


def run_saem(
    ys: Sequence[np.ndarray],
    loglik_fn: Callable[[np.ndarray, np.ndarray], float],
    link: LinkSpec,
    cfg: SaemConfig,
) -> SaemResult:
    """Maximum-likelihood estimation of theta = (beta, Gamma) on a multi-unit set.

    ``loglik_fn(phi, y)`` must return the observation log-likelihood of one
    unit given natural-scale parameters (minus infinity signals an invalid
    candidate).  Stops when the componentwise relative change of theta falls
    below mu0 for ``consecutive_hits`` iterations in a row, or at m_max.
    """
    cfg.validate()
    n_units = len(ys)
    if n_units == 0:
        raise ConfigurationError("dataset is empty")
    if cfg.init_box is None:
        raise ConfigurationError("cfg.init_box is required (psi-scale intervals)")
    c = link.dim
    ss = np.random.SeedSequence(cfg.seed)
    children = ss.spawn(n_units + 1)
    rng0 = np.random.default_rng(children[0])
    unit_rngs = [np.random.default_rng(ch) for ch in children[1:]]

    lo = np.array([cfg.init_box[name][0] for name in link.names])
    hi = np.array([cfg.init_box[name][1] for name in link.names])
    beta = rng0.uniform(lo, hi)
    var = np.full(c, cfg.gamma0)

    psi = np.empty((n_units, c))
    ll = np.full(n_units, -np.inf)
    for u in range(n_units):
        for _ in range(100):
            psi[u] = beta + np.sqrt(var) * unit_rngs[u].standard_normal(c)
            ll[u] = loglik_fn(link_apply(link, psi[u]), ys[u])
            if np.isfinite(ll[u]):
                break

    stats = SufficientStats(s1=psi.sum(axis=0), s2=(psi**2).sum(axis=0))
    random = link.random_mask
    betas, variances, rates, mean_lls = [], [], [], []
    hits = 0
    converged = False
    n_floored = 0
    dead_iters = 0
    theta_prev = np.concatenate([beta, var[random]])
    for m in range(1, cfg.m_max + 1):
        accepted = 0
        for u in range(n_units):
            for _ in range(cfg.mh_iters):
                psi[u], ll[u], acc = mh_step(
                    psi[u], ll[u], beta, var, link, ys[u], loglik_fn, unit_rngs[u], cfg
                )
                accepted += acc
        dead_iters = dead_iters + 1 if accepted == 0 else 0
        if dead_iters >= 100:
            raise NumericalError(
                "Metropolis-Hastings chains rejected every candidate for 100 "
                "consecutive iterations; check the model or the init box"
            )
        stats = sa_update(stats, psi, step_size(m, cfg))
        beta, var, fl = m_step(stats, var, link, cfg, m, n_units)
        n_floored += fl
        betas.append(beta.copy())
        variances.append(var.copy())
        rates.append(accepted / (n_units * cfg.mh_iters))
        finite = ll[np.isfinite(ll)]
        mean_lls.append(float(finite.mean()) if len(finite) else -np.inf)
        theta_now = np.concatenate([beta, var[random]])
        rel = np.abs(theta_now - theta_prev) / np.maximum(np.abs(theta_now), 1e-300)
        theta_prev = theta_now
        hits = hits + 1 if rel.max() < cfg.mu0 else 0
        if hits >= cfg.consecutive_hits:
            converged = True
            break
    if n_floored:
        warnings.warn(f"{n_floored} variance estimates were floored at {VAR_FLOOR}")
    gamma = np.where(random, var, 0.0)
    trace = SaemTrace(
        names=link.names,
        betas=np.array(betas),
        variances=np.array(variances),
        accept_rate=np.array(rates),
        mean_loglik=np.array(mean_lls),
        converged=converged,
        n_var_floored=n_floored,
    )
    return SaemResult(
        theta=PopulationParams(beta=beta, gamma=gamma),
        trace=trace,
        final_psi=psi.copy(),
        final_loglik=ll.copy(),
    )
