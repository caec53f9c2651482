"""Concrete study configurations binding models, links, and likelihood engines.

A study fixes which natural parameters are unit-specific (phi), how they map
onto the compartmental model and the observation scheme, and sensible
psi-scale boxes for initialization.  Two studies are built in:

* ``sir_prevalence_study`` -- SIR dynamics observed as noisy infectious
  counts; phi = (r0, d, p, i0) with the infectious period d a fixed effect
  and s0 = 1 - i0 (no initially recovered individuals);
* ``seir_incidence_study`` -- SEIR dynamics observed as over-dispersed
  counts of newly infectious individuals; phi = (r0, p, i0, tau2) with the
  dispersion tau2 a fixed effect, known incubation/infectious periods and a
  known initially-immune fraction, e0 = i0 and s0 = 1 - immune - 2 i0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .compartments import (
    DEFAULT_SUBSTEPS,
    IncidenceObs,
    ModelSpec,
    ObservationScheme,
    PrevalenceObs,
    StateSpaceQuantities,
    check_params,
    seir_model,
    sir_model,
    statespace_quantities,
)
from .errors import ConfigurationError, DomainError, NumericalError
from .filters import incidence_filter, prevalence_filter
from .popmodel import LinkSpec, PopulationParams, component


@dataclass(frozen=True)
class Study:
    name: str
    model: ModelSpec
    link: LinkSpec
    scheme_kind: str                     # "prevalence" | "incidence"
    constants: dict
    params_for: Callable[[np.ndarray], dict]
    scheme_for: Callable[[np.ndarray], ObservationScheme]
    default_init_box: dict[str, tuple[float, float]]


def sir_prevalence_study() -> Study:
    link = LinkSpec((
        component("r0", "exp_plus_one", random=True),
        component("d", "exp", random=False),
        component("p", "logistic", random=True),
        component("i0", "logistic", random=True),
    ))

    def params_for(phi):
        return {"r0": phi[0], "d": phi[1], "s0": 1.0 - phi[3], "i0": phi[3]}

    def scheme_for(phi):
        return PrevalenceObs(p=phi[2], compartment="i")

    return Study(
        name="sir_prevalence",
        model=sir_model(),
        link=link,
        scheme_kind="prevalence",
        constants={},
        params_for=params_for,
        scheme_for=scheme_for,
        default_init_box={
            "r0": (math.log(0.2), math.log(2.0)),      # r0 in (1.2, 3.0)
            "d": (math.log(1.5), math.log(4.0)),
            "p": (-0.85, 2.94),                        # p in (0.3, 0.95)
            "i0": (-3.89, -0.85),                      # i0 in (0.02, 0.3)
        },
    )


def seir_incidence_study(
    d_e: float = 1.9, d_i: float = 4.1, immune: float = 0.27
) -> Study:
    link = LinkSpec((
        component("r0", "exp_plus_one", random=True),
        component("p", "logistic", random=True),
        component("i0", "logistic", random=True),
        component("tau2", "exp", random=False),
    ))

    def params_for(phi):
        i0 = phi[2]
        return {
            "r0": phi[0], "d_e": d_e, "d_i": d_i,
            "s0": 1.0 - immune - 2.0 * i0, "e0": i0, "i0": i0,
        }

    def scheme_for(phi):
        return IncidenceObs(p=phi[1], compartments=("s", "e"), tau2=phi[3])

    return Study(
        name="seir_incidence",
        model=seir_model(),
        link=link,
        scheme_kind="incidence",
        constants={"d_e": d_e, "d_i": d_i, "immune": immune},
        params_for=params_for,
        scheme_for=scheme_for,
        default_init_box={
            "r0": (math.log(0.3), math.log(3.0)),      # r0 in (1.3, 4.0)
            "p": (-4.6, -0.85),                        # p in (0.01, 0.3)
            "i0": (-6.9, -2.94),                       # i0 in (0.001, 0.05)
            "tau2": (-6.9, 4.6),
        },
    )


def build_study(config: dict) -> Study:
    """Resolve a study from config keys ``model``, ``scheme``, ``constants``."""
    model = config.get("model", "sir")
    scheme = config.get("scheme")
    constants = config.get("constants", {})
    if model == "sir" and scheme in (None, "prevalence"):
        study = sir_prevalence_study()
    elif model == "seir" and scheme in (None, "incidence"):
        study = seir_incidence_study(
            d_e=constants.get("d_e", 1.9),
            d_i=constants.get("d_i", 4.1),
            immune=constants.get("immune", 0.27),
        )
    else:
        raise ConfigurationError(
            f"no study for model={model!r} scheme={scheme!r}; "
            "built-ins: sir/prevalence, seir/incidence"
        )
    if "link" in config:
        link = LinkSpec.from_config(config["link"])
        if link.names != study.link.names:
            raise ConfigurationError(
                f"config link names {link.names} do not match study {study.link.names}"
            )
        study = Study(**{**study.__dict__, "link": link})
    return study


@dataclass
class LikelihoodEngine:
    """Maps natural-scale unit parameters to filter log-likelihoods."""

    study: Study
    n_pop: float
    delta: float
    substeps: int = DEFAULT_SUBSTEPS

    def quantities(self, phi: np.ndarray, n: int) -> StateSpaceQuantities:
        params = self.study.params_for(np.asarray(phi, dtype=np.float64))
        check_params(self.study.model, params)
        return statespace_quantities(
            self.study.model, params, self.n_pop, self.delta, n,
            self.study.scheme_for(phi), substeps=self.substeps,
        )

    def loglik(self, phi: np.ndarray, y: np.ndarray) -> float:
        """Filter log-likelihood of one unit; -inf for invalid parameters."""
        try:
            q = self.quantities(phi, len(y))
            if self.study.scheme_kind == "prevalence":
                return prevalence_filter(q, y).loglik
            return incidence_filter(q, y).loglik
        except (DomainError, NumericalError, np.linalg.LinAlgError):
            return -np.inf


# ---------------------------------------------------------------------------
# benchmark settings


def benchmark_theta(level: str = "high") -> PopulationParams:
    """Population parameters of the SIR benchmark.

    ``high`` / ``moderate`` inter-epidemic variability; both give mean
    reproduction number 1.5, mean infectious period 2.5 days, mean reporting
    around 0.74-0.78 and mean initial infected fraction around 0.11-0.12.
    """
    if level == "high":
        return PopulationParams(
            beta=np.array([-0.81, 0.92, 1.45, -2.20]),
            gamma=np.array([0.47**2, 0.0, 1.50**2, 0.75**2]),
        )
    if level == "moderate":
        return PopulationParams(
            beta=np.array([-0.72, 0.92, 1.45, -2.20]),
            gamma=np.array([0.25**2, 0.0, 0.90**2, 0.50**2]),
        )
    raise ConfigurationError(f"unknown benchmark level {level!r}")


def delta_for_series_length(nbar: int) -> float:
    """Sampling step giving roughly ``nbar`` observations per SIR benchmark unit."""
    presets = {100: 0.425, 50: 0.85, 20: 2.0}
    return presets.get(nbar, 42.5 / nbar)


def flu_analog_theta(n_pop: float, dispersion: float = 0.013) -> PopulationParams:
    """Influenza-like SEIR population: mean r0 2.238 (CV 14%), mean reporting
    0.084 (CV 52%), mean initial infected 0.008 (CV 72%).

    beta/gamma values are moment-matched through the links (shifted-lognormal
    for r0, logistic-normal for p and i0).  The dispersion component is fixed
    and set to the count-scale value blown up by N, which is the scale the
    incidence observation model estimates it on.
    """
    return PopulationParams(
        beta=np.array([0.18249, -2.63213, -5.06868, math.log(dispersion * n_pop)]),
        gamma=np.array([0.061962, 0.252396, 0.446139, 0.0]),
    )
