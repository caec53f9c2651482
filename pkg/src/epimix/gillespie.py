"""Exact jump-process simulation and benchmark dataset generation.

The simulator runs the density-dependent Markov jump process of a
:class:`~epimix.compartments.ModelSpec` in count space (rate of event j is
``coeff_j * N * prod_i (counts_i / N)^powers_ji``), samples trajectories on
a regular grid, applies the observation layer, and assembles multi-unit
datasets with early-extinct units redrawn.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .compartments import IncidenceObs, ModelSpec, PrevalenceObs, sir_model
from .errors import ConfigurationError, DataError
from .popmodel import LinkSpec, PopulationParams, sample_unit_params


@njit(cache=True)
def _count_rates(coeffs, powers, counts, n_pop, out):
    m, d = powers.shape
    total = 0.0
    for j in range(m):
        r = coeffs[j] * n_pop
        for i in range(d):
            for _ in range(powers[j, i]):
                r *= counts[i] / n_pop
        out[j] = r
        total += r
    return total


@njit(cache=True)
def _gillespie_grid(coeffs, powers, jumps, counts0, n_pop, delta, n_max, t_max,
                    inf_mask, seed):
    """Counts sampled right-continuously at k*delta; returns (grid, n_end).

    n_end is the first grid index with zero infectives (n_max if the cap is
    hit first).  After extinction the grid rows repeat the final state.
    """
    np.random.seed(seed)
    m, d = powers.shape
    grid = np.empty((n_max + 1, d), dtype=np.int64)
    cur = counts0.copy()
    grid[0] = cur
    rates = np.empty(m)
    t = 0.0
    k_next = 1
    n_end = n_max
    while k_next <= n_max:
        inf = 0
        for i in range(d):
            if inf_mask[i]:
                inf += cur[i]
        total = 0.0
        if inf > 0:
            total = _count_rates(coeffs, powers, cur, n_pop, rates)
        if inf == 0 or total <= 0.0 or t > t_max:
            while k_next <= n_max:
                grid[k_next] = cur
                k_next += 1
            break
        dt = np.random.exponential(1.0 / total)
        while k_next <= n_max and t + dt > k_next * delta:
            grid[k_next] = cur
            k_next += 1
        t += dt
        u = np.random.random() * total
        acc = 0.0
        pick = m - 1
        for j in range(m):
            acc += rates[j]
            if u < acc:
                pick = j
                break
        for i in range(d):
            cur[i] += jumps[pick, i]
    # locate first grid time with no infectives
    for k in range(1, n_max + 1):
        inf = 0
        for i in range(d):
            if inf_mask[i]:
                inf += grid[k, i]
        if inf == 0:
            n_end = k
            break
    return grid, n_end


@njit(cache=True)
def _gillespie_final_s(coeffs, powers, jumps, counts0, n_pop, inf_mask, seed):
    """Final count of the first compartment (susceptibles); no storage."""
    np.random.seed(seed)
    m, d = powers.shape
    cur = counts0.copy()
    rates = np.empty(m)
    while True:
        inf = 0
        for i in range(d):
            if inf_mask[i]:
                inf += cur[i]
        if inf == 0:
            break
        total = _count_rates(coeffs, powers, cur, n_pop, rates)
        if total <= 0.0:
            break
        u = np.random.random() * total
        acc = 0.0
        pick = m - 1
        for j in range(m):
            acc += rates[j]
            if u < acc:
                pick = j
                break
        for i in range(d):
            cur[i] += jumps[pick, i]
    return cur[0]


@dataclass(frozen=True)
class JumpTrajectory:
    times: np.ndarray    # event times, times[0] = 0
    counts: np.ndarray   # (len(times), d) counts after each event
    n_pop: int


def simulate_jump(
    model: ModelSpec,
    params,
    n_pop: int,
    rng: np.random.Generator,
    t_max: float = 1e9,
) -> JumpTrajectory:
    """Exact stochastic simulation of the jump process until extinction."""
    counts0 = np.rint(model.x0(params) * n_pop).astype(np.int64)
    seed = int(rng.integers(0, 2**31 - 1))
    jumps = model.jumps.astype(np.int64)
    times, counts = _gillespie_events(
        model.coeffs(params), model.powers, jumps, counts0,
        float(n_pop), t_max, model.infective_mask, seed,
    )
    return JumpTrajectory(times=times, counts=counts, n_pop=n_pop)


@njit(cache=True)
def _gillespie_events(coeffs, powers, jumps, counts0, n_pop, t_max, inf_mask, seed):
    np.random.seed(seed)
    m, d = powers.shape
    cap = m * int(n_pop) + 1
    times = np.empty(cap)
    counts = np.empty((cap, d), dtype=np.int64)
    cur = counts0.copy()
    times[0] = 0.0
    counts[0] = cur
    rates = np.empty(m)
    t = 0.0
    n_ev = 0
    while True:
        inf = 0
        for i in range(d):
            if inf_mask[i]:
                inf += cur[i]
        if inf == 0:
            break
        total = _count_rates(coeffs, powers, cur, n_pop, rates)
        if total <= 0.0:
            break
        t += np.random.exponential(1.0 / total)
        if t > t_max or n_ev + 1 >= cap:
            break
        u = np.random.random() * total
        acc = 0.0
        pick = m - 1
        for j in range(m):
            acc += rates[j]
            if u < acc:
                pick = j
                break
        for i in range(d):
            cur[i] += jumps[pick, i]
        n_ev += 1
        times[n_ev] = t
        counts[n_ev] = cur
    return times[: n_ev + 1].copy(), counts[: n_ev + 1].copy()


def sample_grid(model: ModelSpec, traj: JumpTrajectory, delta: float,
                n_max: int | None = None) -> tuple[np.ndarray, int]:
    """Right-continuous counts at t_k = k*delta and the first extinct index.

    Returns (grid counts (n+1, d), n) where n is the first k >= 1 with no
    infectives (the series length used for inference).
    """
    if delta <= 0:
        raise ConfigurationError("delta must be positive")
    t_last = traj.times[-1]
    n_cap = n_max if n_max is not None else int(np.ceil(t_last / delta)) + 1
    idx = np.searchsorted(traj.times, np.arange(n_cap + 1) * delta, side="right") - 1
    grid = traj.counts[idx]
    inf = grid[:, model.infective_mask].sum(axis=1)
    extinct = np.nonzero(inf[1:] == 0)[0]
    n = int(extinct[0]) + 1 if len(extinct) else n_cap
    return grid, n


def observe(
    model: ModelSpec,
    grid_counts: np.ndarray,
    scheme,
    rng: np.random.Generator,
    overdispersion: float | None = None,
) -> np.ndarray:
    """Observation layer on sampled counts; returns y (n, 1), proportions.

    Prevalence: binomial thinning of the observed compartment.  Incidence:
    draining-compartment decrements, binomially thinned, or -- when
    ``overdispersion`` (count-scale tau^2) is given -- Gaussian with variance
    p*inc + tau^2 p^2 inc^2 truncated at zero.
    """
    n = grid_counts.shape[0] - 1
    if isinstance(scheme, PrevalenceObs):
        c = model.compartments.index(scheme.compartment)
        draws = rng.binomial(grid_counts[1:, c], scheme.p)
        y = draws.astype(np.float64)
    elif isinstance(scheme, IncidenceObs):
        cols = [model.compartments.index(c) for c in scheme.compartments]
        pool = grid_counts[:, cols].sum(axis=1)
        inc = pool[:-1] - pool[1:]
        inc = np.maximum(inc, 0)
        if overdispersion is None:
            y = rng.binomial(inc, scheme.p).astype(np.float64)
        else:
            mean = scheme.p * inc
            var = scheme.p * inc + overdispersion * scheme.p**2 * inc.astype(np.float64) ** 2
            y = np.maximum(mean + np.sqrt(var) * rng.standard_normal(n), 0.0)
    else:
        raise ConfigurationError(f"unknown observation scheme {scheme!r}")
    return y.reshape(n, 1)


def major_outbreak_fraction(
    r0: float,
    i0: int,
    reps: int,
    rng: np.random.Generator,
    n_pop: int = 10_000,
    infectious_period: float = 3.0,
    size_threshold: float = 0.05,
) -> float:
    """Fraction of SIR runs whose final size exceeds ``size_threshold * N``.

    Complements the extinction probability; for large N it approaches
    1 - (1/r0)^i0.
    """
    model = sir_model()
    params = {"r0": r0, "d": infectious_period,
              "s0": 1.0 - i0 / n_pop, "i0": i0 / n_pop}
    coeffs = model.coeffs(params)
    jumps = model.jumps.astype(np.int64)
    counts0 = np.array([n_pop - i0, i0], dtype=np.int64)
    major = 0
    seeds = rng.integers(0, 2**31 - 1, size=reps)
    for r in range(reps):
        s_end = _gillespie_final_s(coeffs, model.powers, jumps, counts0,
                                   float(n_pop), model.infective_mask, int(seeds[r]))
        if (counts0[0] - s_end) / n_pop >= size_threshold:
            major += 1
    return major / reps


# ---------------------------------------------------------------------------
# datasets


@dataclass
class UnitData:
    y: np.ndarray                      # (n, q) normalized observations
    n: int
    true_phi: np.ndarray | None = None
    states: np.ndarray | None = None   # (n+1, d) sampled proportions


@dataclass
class SimulatedDataset:
    units: list[UnitData]
    n_pop: float
    delta: float
    scheme: str
    metadata: dict = field(default_factory=dict)

    @property
    def n_units(self) -> int:
        return len(self.units)


def generate_dataset(
    study,
    theta: PopulationParams,
    n_units: int,
    n_pop: int,
    delta: float,
    rng: np.random.Generator,
    extinction_threshold: float = 0.05,
    overdispersion: float | None = None,
    t_max: float = 1000.0,
    max_tries: int | None = None,
) -> SimulatedDataset:
    """Simulate a multi-unit benchmark dataset under a study configuration.

    Units whose outbreak infects less than ``extinction_threshold * N`` of
    the initially susceptible pool are discarded and a fresh phi is drawn,
    until ``n_units`` units are collected.  A redraw acceptance rate below
    1% aborts (the parameters imply near-certain extinction).
    """
    model: ModelSpec = study.model
    link: LinkSpec = study.link
    units: list[UnitData] = []
    tries = 0
    cap = max_tries or max(200, 100 * n_units)
    n_grid_max = int(np.ceil(t_max / delta))
    jumps = model.jumps.astype(np.int64)
    while len(units) < n_units:
        tries += 1
        if tries > cap:
            raise ConfigurationError(
                f"extinction redraw acceptance below {n_units / cap:.1%}: "
                "parameters imply near-certain extinction"
            )
        _, _, phi = sample_unit_params(theta, link, rng)
        params = study.params_for(phi)
        counts0 = np.rint(model.x0(params) * n_pop).astype(np.int64)
        if counts0[model.infective_mask].sum() < 1:
            continue
        seed = int(rng.integers(0, 2**31 - 1))
        grid, n = _gillespie_grid(
            model.coeffs(params), model.powers, jumps, counts0,
            float(n_pop), delta, n_grid_max, t_max, model.infective_mask, seed,
        )
        grid = grid[: n + 1]
        final_frac = (counts0[0] - grid[-1, 0]) / n_pop
        if final_frac < extinction_threshold or n < 1:
            continue
        scheme = study.scheme_for(phi)
        y = observe(model, grid, scheme, rng, overdispersion=overdispersion) / n_pop
        units.append(UnitData(y=y, n=n, true_phi=phi, states=grid / n_pop))
    meta = {
        "theta": {"beta": theta.beta.tolist(), "gamma": theta.gamma.tolist()},
        "link": link.to_config(),
        "n_pop": n_pop,
        "delta": delta,
        "scheme": study.scheme_kind,
        "true_phi": [u.true_phi.tolist() for u in units],
        "phi_names": list(link.names),
        "extinction_threshold": extinction_threshold,
        "overdispersion": overdispersion,
        "redraws": tries - n_units,
    }
    return SimulatedDataset(units=units, n_pop=float(n_pop), delta=delta,
                            scheme=study.scheme_kind, metadata=meta)


def write_dataset(ds: SimulatedDataset, path: str | Path, header: dict | None = None) -> None:
    """Dataset CSV (`unit,k,t,y_1`) plus a `.meta.json` sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for key, val in (header or {}).items():
            fh.write(f"# {key}={val}\n")
        writer = csv.writer(fh)
        writer.writerow(["unit", "k", "t", "y_1"])
        for u, unit in enumerate(ds.units):
            for k in range(unit.n):
                writer.writerow([u, k + 1, repr((k + 1) * ds.delta), repr(float(unit.y[k, 0]))])
    meta = dict(ds.metadata)
    meta["n_units"] = ds.n_units
    with open(path.with_suffix(".meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_dataset(path: str | Path) -> SimulatedDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    rows: dict[int, list[float]] = {}
    with open(path) as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        head = next(reader)
        if head[:3] != ["unit", "k", "t"]:
            raise DataError(f"unexpected dataset header {head} in {path}")
        for row in reader:
            rows.setdefault(int(row[0]), []).append(float(row[3]))
    meta_path = path.with_suffix(".meta.json")
    meta = {}
    if meta_path.exists():
        with open(meta_path) as fh:
            meta = json.load(fh)
    if not rows:
        raise DataError(f"dataset {path} contains no observations")
    true_phi = meta.get("true_phi")
    units = []
    for u in sorted(rows):
        y = np.array(rows[u]).reshape(-1, 1)
        phi = np.array(true_phi[u]) if true_phi is not None else None
        units.append(UnitData(y=y, n=len(y), true_phi=phi))
    return SimulatedDataset(
        units=units,
        n_pop=float(meta.get("n_pop", 0.0)),
        delta=float(meta.get("delta", 1.0)),
        scheme=meta.get("scheme", "prevalence"),
        metadata=meta,
    )
