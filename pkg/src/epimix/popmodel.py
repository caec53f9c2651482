"""Mixed-effects layer: link functions, population parameters, unit effects.

Unit parameters live on two scales.  The unconstrained scale psi = beta + xi
(xi Gaussian, zero for fixed components) is where the SAEM machinery works;
the natural scale phi = link_apply(psi) is what the epidemic model consumes.
Each link component maps the real line onto the legal range of its natural
parameter:

* ``exp_plus_one``  -- phi = exp(psi) + 1, for reproduction numbers (> 1);
* ``exp``           -- phi = exp(psi), for durations and dispersion (> 0);
* ``logistic``      -- phi = 1 / (1 + exp(-psi)), for rates in (0, 1);
* ``simplex_pair``  -- two psi entries (a, b) to a pair (first, second) with
  first = 1 / (1 + e^-a + e^-b), second = e^-a * first, so that both are in
  (0, 1) and their sum stays below 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

EXP_CLAMP = 700.0  # exp argument bound; beyond this the float64 range overflows


@dataclass(frozen=True)
class LinkComponent:
    names: tuple[str, ...]
    kind: str
    random: tuple[bool, ...]

    def __post_init__(self):
        width = 2 if self.kind == "simplex_pair" else 1
        if self.kind not in ("exp_plus_one", "exp", "logistic", "simplex_pair"):
            raise ConfigurationError(f"unknown link kind {self.kind!r}")
        if len(self.names) != width or len(self.random) != width:
            raise ConfigurationError(
                f"link {self.kind!r} needs {width} name(s)/flag(s), got {self.names}"
            )


def component(name, kind, random=True) -> LinkComponent:
    names = tuple(name) if isinstance(name, (tuple, list)) else (name,)
    flags = tuple(random) if isinstance(random, (tuple, list)) else (random,) * len(names)
    return LinkComponent(names, kind, flags)


@dataclass(frozen=True)
class LinkSpec:
    components: tuple[LinkComponent, ...]

    @property
    def dim(self) -> int:
        return sum(len(c.names) for c in self.components)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for c in self.components for n in c.names)

    @property
    def random_mask(self) -> np.ndarray:
        return np.array([r for c in self.components for r in c.random])

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_config(self) -> list[dict]:
        return [
            {"name": list(c.names) if len(c.names) > 1 else c.names[0],
             "kind": c.kind,
             "random": list(c.random) if len(c.random) > 1 else c.random[0]}
            for c in self.components
        ]

    @staticmethod
    def from_config(items: list[dict]) -> "LinkSpec":
        return LinkSpec(tuple(
            component(it["name"], it["kind"], it.get("random", True)) for it in items
        ))


def _cexp(x: np.ndarray | float) -> np.ndarray | float:
    return np.exp(np.clip(x, -EXP_CLAMP, EXP_CLAMP))


def link_apply(link: LinkSpec, psi: np.ndarray) -> np.ndarray:
    """Natural-scale parameters phi from unconstrained psi."""
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape[-1] != link.dim:
        raise DomainError(f"psi has dimension {psi.shape[-1]}, link needs {link.dim}")
    out = np.empty_like(psi)
    j = 0
    for c in link.components:
        if c.kind == "exp_plus_one":
            out[..., j] = _cexp(psi[..., j]) + 1.0
        elif c.kind == "exp":
            out[..., j] = _cexp(psi[..., j])
        elif c.kind == "logistic":
            out[..., j] = 1.0 / (1.0 + _cexp(-psi[..., j]))
        else:  # simplex_pair
            ea = _cexp(-psi[..., j])
            eb = _cexp(-psi[..., j + 1])
            denom = 1.0 + ea + eb
            out[..., j] = 1.0 / denom
            out[..., j + 1] = ea / denom
        j += len(c.names)
    return out


def link_invert(link: LinkSpec, phi: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`link_apply`; phi must be strictly interior."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[-1] != link.dim:
        raise DomainError(f"phi has dimension {phi.shape[-1]}, link needs {link.dim}")
    out = np.empty_like(phi)
    j = 0
    for c in link.components:
        v = phi[..., j]
        if c.kind == "exp_plus_one":
            if np.any(v <= 1.0):
                raise DomainError(f"{c.names[0]} must exceed 1, got {v}")
            out[..., j] = np.log(v - 1.0)
        elif c.kind == "exp":
            if np.any(v <= 0.0):
                raise DomainError(f"{c.names[0]} must be positive, got {v}")
            out[..., j] = np.log(v)
        elif c.kind == "logistic":
            if np.any((v <= 0.0) | (v >= 1.0)):
                raise DomainError(f"{c.names[0]} must lie in (0,1), got {v}")
            out[..., j] = np.log(v) - np.log1p(-v)
        else:
            w = phi[..., j + 1]
            rest = 1.0 - v - w
            if np.any((v <= 0.0) | (w <= 0.0) | (rest <= 0.0)):
                raise DomainError(f"pair {c.names} must be interior to the simplex")
            out[..., j] = -np.log(w / v)
            out[..., j + 1] = -np.log(rest / v)
        j += len(c.names)
    return out


@dataclass
class PopulationParams:
    """theta = (beta, Gamma): fixed effects and diagonal random-effect variances.

    ``gamma`` is stored for every component; entries at fixed components are
    zero (or, inside SAEM, the annealed working variance).
    """

    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if self.beta.shape != self.gamma.shape:
            raise ConfigurationError("beta and gamma must have equal length")
        if np.any(self.gamma < 0.0):
            raise ConfigurationError(f"variances must be nonnegative, got {self.gamma}")

    def validate(self, link: LinkSpec) -> None:
        if len(self.beta) != link.dim:
            raise ConfigurationError(
                f"theta has {len(self.beta)} components, link needs {link.dim}"
            )
        if np.any(self.gamma[link.random_mask] <= 0.0):
            raise ConfigurationError("random components need positive variances")


def sample_unit_params(
    theta: PopulationParams, link: LinkSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw one unit's (xi, psi, phi); xi is zero on fixed components."""
    mask = link.random_mask
    xi = np.zeros(link.dim)
    xi[mask] = rng.standard_normal(mask.sum()) * np.sqrt(theta.gamma[mask])
    psi = theta.beta + xi
    return xi, psi, link_apply(link, psi)


def effects_logdensity(theta: PopulationParams, link: LinkSpec, psi: np.ndarray) -> float:
    """Gaussian log-density of the random components of psi - beta."""
    mask = link.random_mask
    g = theta.gamma[mask]
    if np.any(g <= 0.0):
        raise ConfigurationError("random-effect variances must be positive")
    r = np.asarray(psi, dtype=np.float64)[mask] - theta.beta[mask]
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * g) + r**2 / g))


def natural_moments(
    theta: PopulationParams,
    link: LinkSpec,
    n_draws: int = 1_000_000,
    rng: np.random.Generator | None = None,
) -> dict[str, tuple[float, float]]:
    """Monte-Carlo mean and standard deviation of each natural parameter.

    The logistic-type links have no closed-form moments, so everything goes
    through draws; fixed components come back with zero spread.
    """
    rng = rng or np.random.default_rng(0)
    mask = link.random_mask
    psi = np.tile(theta.beta, (n_draws, 1))
    psi[:, mask] += rng.standard_normal((n_draws, mask.sum())) * np.sqrt(theta.gamma[mask])
    phi = link_apply(link, psi)
    out = {}
    for j, name in enumerate(link.names):
        sd = float(phi[:, j].std(ddof=1)) if mask[j] else 0.0
        out[name] = (float(phi[:, j].mean()), sd)
    return out
