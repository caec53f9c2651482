"""Compartmental epidemic models and their Gaussian AR(1) state-space quantities.

A model is a list of mass-action events acting on tracked population
proportions x in [0,1]^d.  Each event has a rate density
``coeff * prod_i x_i^powers_i`` (per unit time, already normalized by the
population size) and an integer jump vector in count space.  From the events
we derive the drift b(x), the diffusion matrix Sigma(x) and, per sampling
interval [t_{k-1}, t_k]:

* ``A[k-1]`` -- resolvent of the linearized flow over the interval,
* ``F[k]``   -- affine residual x(t_k) - A[k-1] x(t_{k-1}),
* ``T[k]``   -- (1/N) integral of Phi Sigma Phi' over the interval,
* ``G[k]``   -- incidence drift x(t_k) - x0 - A[k-1] (x(t_{k-1}) - x0),

plus the observation operator and noise variance for either a prevalence or
an incidence observation scheme.  The ODE, the variational (resolvent)
equation and the T quadrature all share one fixed-step RK4 sub-grid with
``substeps`` nodes per sampling interval; T uses the trapezoidal rule on
that sub-grid.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Mapping

import numpy as np
from numba import njit

from .errors import ConfigurationError, DomainError, NumericalError

STATE_TOL = 1e-9  # ODE states may overshoot [0,1] by at most this before aborting
DEFAULT_SUBSTEPS = 20


# ---------------------------------------------------------------------------
# model definition


@dataclass(frozen=True)
class Event:
    name: str
    coeff: str
    powers: tuple[int, ...]
    jump: tuple[int, ...]


@dataclass(frozen=True)
class ModelSpec:
    """A mass-action compartmental model over tracked proportions.

    ``rate_constants`` maps natural-scale parameters to the per-event rate
    coefficients (ordered as ``events``); ``initial_state`` extracts the
    initial proportions of the tracked compartments.  ``infectives`` names
    the compartments whose joint extinction terminates an outbreak.
    """

    name: str
    compartments: tuple[str, ...]
    events: tuple[Event, ...]
    param_names: tuple[str, ...]
    rate_constants: Callable[[Mapping[str, float]], np.ndarray]
    initial_state: Callable[[Mapping[str, float]], np.ndarray]
    infectives: tuple[str, ...] = ("i",)

    @property
    def d(self) -> int:
        return len(self.compartments)

    @cached_property
    def powers(self) -> np.ndarray:
        return np.array([e.powers for e in self.events], dtype=np.int64)

    @cached_property
    def jumps(self) -> np.ndarray:
        return np.array([e.jump for e in self.events], dtype=np.float64)

    @cached_property
    def infective_mask(self) -> np.ndarray:
        return np.array([c in self.infectives for c in self.compartments])

    def coeffs(self, params: Mapping[str, float]) -> np.ndarray:
        return np.asarray(self.rate_constants(params), dtype=np.float64)

    def x0(self, params: Mapping[str, float]) -> np.ndarray:
        return np.asarray(self.initial_state(params), dtype=np.float64)


def sir_model() -> ModelSpec:
    """SIR with tracked proportions (s, i), parameters (r0, d, s0, i0)."""

    def rates(p):
        lam = p["r0"] / p["d"]
        gam = 1.0 / p["d"]
        return np.array([lam, gam])

    return ModelSpec(
        name="sir",
        compartments=("s", "i"),
        events=(
            Event("infection", "lambda", (1, 1), (-1, 1)),
            Event("recovery", "gamma", (0, 1), (0, -1)),
        ),
        param_names=("r0", "d", "s0", "i0"),
        rate_constants=rates,
        initial_state=lambda p: np.array([p["s0"], p["i0"]]),
        infectives=("i",),
    )


def seir_model() -> ModelSpec:
    """SEIR with tracked (s, e, i), parameters (r0, d_e, d_i, s0, e0, i0)."""

    def rates(p):
        lam = p["r0"] / p["d_i"]
        eps = 1.0 / p["d_e"]
        gam = 1.0 / p["d_i"]
        return np.array([lam, eps, gam])

    return ModelSpec(
        name="seir",
        compartments=("s", "e", "i"),
        events=(
            Event("infection", "lambda", (1, 0, 1), (-1, 1, 0)),
            Event("onset", "epsilon", (0, 1, 0), (0, -1, 1)),
            Event("recovery", "gamma", (0, 0, 1), (0, 0, -1)),
        ),
        param_names=("r0", "d_e", "d_i", "s0", "e0", "i0"),
        rate_constants=rates,
        initial_state=lambda p: np.array([p["s0"], p["e0"], p["i0"]]),
        infectives=("e", "i"),
    )

_BUILTIN = {"sir": sir_model, "seir": seir_model}


def get_model(name: str) -> ModelSpec:
    try:
        return _BUILTIN[name]()
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; known: {sorted(_BUILTIN)}")


def model_from_config(cfg: str | Mapping) -> ModelSpec:
    """Build a model from a structured-text description.

    The description is JSON with keys ``name``, ``compartments``, ``params``
    and ``events``; each event is ``{"rate": "<monomial>", "jump": [...]}``
    where the rate is a product of exactly one parameter name and compartment
    names (mass-action, e.g. ``"lam*s*i"``).  Natural parameters of the
    resulting model are the rate coefficients plus ``<comp>0`` initial
    proportions.
    """
    if isinstance(cfg, str):
        try:
            cfg = json.loads(cfg)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"model description is not valid JSON: {exc}")
    try:
        comps = tuple(cfg["compartments"])
        pnames = tuple(cfg["params"])
        raw_events = cfg["events"]
        name = cfg["name"]
    except KeyError as exc:
        raise ConfigurationError(f"model description missing key {exc}")
    events = []
    for idx, ev in enumerate(raw_events):
        factors = [tok.strip() for tok in ev["rate"].split("*")]
        coeff = None
        powers = [0] * len(comps)
        for tok in factors:
            base, _, exp = tok.partition("^")
            k = int(exp) if exp else 1
            if base in pnames:
                if coeff is not None or k != 1:
                    raise ConfigurationError(
                        f"rate {ev['rate']!r} must contain exactly one coefficient"
                    )
                coeff = base
            elif base in comps:
                powers[comps.index(base)] += k
            else:
                raise ConfigurationError(f"unknown factor {base!r} in rate {ev['rate']!r}")
        if coeff is None:
            raise ConfigurationError(f"rate {ev['rate']!r} has no coefficient")
        jump = tuple(int(j) for j in ev["jump"])
        if len(jump) != len(comps):
            raise ConfigurationError(f"event {idx}: jump length != number of compartments")
        events.append(Event(ev.get("name", f"event{idx}"), coeff, tuple(powers), jump))
    order = [e.coeff for e in events]
    infectives = tuple(cfg.get("infectives", comps[-1:]))
    return ModelSpec(
        name=name,
        compartments=comps,
        events=tuple(events),
        param_names=pnames + tuple(f"{c}0" for c in comps),
        rate_constants=lambda p, order=order: np.array([p[c] for c in order]),
        initial_state=lambda p, comps=comps: np.array([p[f"{c}0"] for c in comps]),
        infectives=infectives,
    )


def check_params(model: ModelSpec, params: Mapping[str, float]) -> None:
    """Validate natural parameters: positive rates, proportions on the simplex."""
    x0 = model.x0(params)
    if np.any(x0 <= 0.0) or np.any(x0 >= 1.0):
        raise DomainError(f"initial proportions must lie in (0,1), got {x0}")
    if x0.sum() > 1.0 + 1e-12:
        raise DomainError(f"initial proportions sum to {x0.sum()} > 1")
    coeffs = model.coeffs(params)
    if np.any(coeffs <= 0.0):
        raise DomainError(f"rate constants must be positive, got {coeffs}")
    if "r0" in params and params["r0"] <= 1.0:
        raise DomainError(f"basic reproduction number must exceed 1, got {params['r0']}")


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _drift(coeffs, powers, jumps, x, out):
    m, d = jumps.shape
    for l in range(d):
        out[l] = 0.0
    for j in range(m):
        v = coeffs[j]
        for i in range(d):
            for _ in range(powers[j, i]):
                v *= x[i]
        for l in range(d):
            out[l] += jumps[j, l] * v
    return out


@njit(cache=True)
def _drift_jac(coeffs, powers, jumps, x, out):
    m, d = jumps.shape
    for a in range(d):
        for b in range(d):
            out[a, b] = 0.0
    for j in range(m):
        for i in range(d):
            p = powers[j, i]
            if p == 0:
                continue
            v = coeffs[j] * p
            for l in range(d):
                q = powers[j, l]
                if l == i:
                    q -= 1
                for _ in range(q):
                    v *= x[l]
            for l in range(d):
                out[l, i] += jumps[j, l] * v
    return out


@njit(cache=True)
def _sigma(coeffs, powers, jumps, x, out):
    m, d = jumps.shape
    for a in range(d):
        for b in range(d):
            out[a, b] = 0.0
    for j in range(m):
        v = coeffs[j]
        for i in range(d):
            for _ in range(powers[j, i]):
                v *= x[i]
        for a in range(d):
            for b in range(d):
                out[a, b] += v * jumps[j, a] * jumps[j, b]
    return out


@njit(cache=True)
def _mat_mul(a, b, out):
    d = a.shape[0]
    for i in range(d):
        for j in range(d):
            s = 0.0
            for k in range(d):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


@njit(cache=True)
def _mat_inv(a, out):
    """Invert a small square matrix (closed forms for d<=3, elimination above)."""
    d = a.shape[0]
    if d == 1:
        out[0, 0] = 1.0 / a[0, 0]
    elif d == 2:
        det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
        out[0, 0] = a[1, 1] / det
        out[0, 1] = -a[0, 1] / det
        out[1, 0] = -a[1, 0] / det
        out[1, 1] = a[0, 0] / det
    elif d == 3:
        c00 = a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1]
        c01 = a[1, 2] * a[2, 0] - a[1, 0] * a[2, 2]
        c02 = a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]
        det = a[0, 0] * c00 + a[0, 1] * c01 + a[0, 2] * c02
        out[0, 0] = c00 / det
        out[1, 0] = c01 / det
        out[2, 0] = c02 / det
        out[0, 1] = (a[0, 2] * a[2, 1] - a[0, 1] * a[2, 2]) / det
        out[1, 1] = (a[0, 0] * a[2, 2] - a[0, 2] * a[2, 0]) / det
        out[2, 1] = (a[0, 1] * a[2, 0] - a[0, 0] * a[2, 1]) / det
        out[0, 2] = (a[0, 1] * a[1, 2] - a[0, 2] * a[1, 1]) / det
        out[1, 2] = (a[0, 2] * a[1, 0] - a[0, 0] * a[1, 2]) / det
        out[2, 2] = (a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]) / det
    else:
        out[:] = np.linalg.inv(a)
    return out


@njit(cache=True)
def _clip_state(x, d):
    """Clip tiny [0,1] violations in place; return False on larger ones."""
    for i in range(d):
        if x[i] < 0.0:
            if x[i] < -STATE_TOL:
                return False
            x[i] = 0.0
        elif x[i] > 1.0:
            if x[i] > 1.0 + STATE_TOL:
                return False
            x[i] = 1.0
    tot = 0.0
    for i in range(d):
        tot += x[i]
    return tot <= 1.0 + STATE_TOL


@njit(cache=True)
def _rk4_path(coeffs, powers, jumps, x0, nsteps, h):
    """Fixed-step RK4 for the mean ODE; returns (ok, states on the step grid)."""
    d = x0.shape[0]
    xs = np.empty((nsteps + 1, d))
    xs[0] = x0
    x = x0.copy()
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    tmp = np.empty(d)
    for s in range(nsteps):
        _drift(coeffs, powers, jumps, x, k1)
        for i in range(d):
            tmp[i] = x[i] + 0.5 * h * k1[i]
        _drift(coeffs, powers, jumps, tmp, k2)
        for i in range(d):
            tmp[i] = x[i] + 0.5 * h * k2[i]
        _drift(coeffs, powers, jumps, tmp, k3)
        for i in range(d):
            tmp[i] = x[i] + h * k3[i]
        _drift(coeffs, powers, jumps, tmp, k4)
        for i in range(d):
            x[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        if not _clip_state(x, d):
            return False, xs
        xs[s + 1] = x
    return True, xs


@njit(cache=True)
def _rk4_resolvent(coeffs, powers, jumps, x_init, nsteps, h):
    """Joint RK4 on the mean ODE and dM/du = Jac_b(x(u)) M, M(0) = I."""
    d = x_init.shape[0]
    x = x_init.copy()
    M = np.eye(d)
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    xt = np.empty(d)
    J = np.empty((d, d))
    K1 = np.empty((d, d))
    K2 = np.empty((d, d))
    K3 = np.empty((d, d))
    K4 = np.empty((d, d))
    Mt = np.empty((d, d))
    for s in range(nsteps):
        _drift(coeffs, powers, jumps, x, k1)
        _drift_jac(coeffs, powers, jumps, x, J)
        _mat_mul(J, M, K1)
        for i in range(d):
            xt[i] = x[i] + 0.5 * h * k1[i]
            for j in range(d):
                Mt[i, j] = M[i, j] + 0.5 * h * K1[i, j]
        _drift(coeffs, powers, jumps, xt, k2)
        _drift_jac(coeffs, powers, jumps, xt, J)
        _mat_mul(J, Mt, K2)
        for i in range(d):
            xt[i] = x[i] + 0.5 * h * k2[i]
            for j in range(d):
                Mt[i, j] = M[i, j] + 0.5 * h * K2[i, j]
        _drift(coeffs, powers, jumps, xt, k3)
        _drift_jac(coeffs, powers, jumps, xt, J)
        _mat_mul(J, Mt, K3)
        for i in range(d):
            xt[i] = x[i] + h * k3[i]
            for j in range(d):
                Mt[i, j] = M[i, j] + h * K3[i, j]
        _drift(coeffs, powers, jumps, xt, k4)
        _drift_jac(coeffs, powers, jumps, xt, J)
        _mat_mul(J, Mt, K4)
        for i in range(d):
            x[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            for j in range(d):
                M[i, j] = M[i, j] + (h / 6.0) * (
                    K1[i, j] + 2.0 * K2[i, j] + 2.0 * K3[i, j] + K4[i, j]
                )
        if not _clip_state(x, d):
            return False, x, M
    return True, x, M


@njit(cache=True)
def _statespace_kernel(coeffs, powers, jumps, x0, n, sub, h, n_pop):
    """One pass producing sub-grid states and per-interval A, F, T, G.

    Within interval k the variational matrix M(u) = Phi(u, t_k) is carried by
    the same RK4 steps as the mean; at sub-grid nodes we store M and Sigma(x)
    and evaluate the trapezoidal rule for
    T_k = (1/N) int Phi(t_{k+1}, u) Sigma(x(u)) Phi(t_{k+1}, u)' du
    using Phi(t_{k+1}, u) = M(t_{k+1}) M(u)^{-1}.
    """
    d = x0.shape[0]
    A = np.empty((n, d, d))
    F = np.empty((n, d))
    T = np.empty((n, d, d))
    G = np.empty((n, d))
    xs = np.empty((n * sub + 1, d))
    xs[0] = x0
    x = x0.copy()
    x_start = np.empty(d)
    M = np.empty((d, d))
    Mn = np.empty((sub + 1, d, d))
    Sn = np.empty((sub + 1, d, d))
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    xt = np.empty(d)
    J = np.empty((d, d))
    K1 = np.empty((d, d))
    K2 = np.empty((d, d))
    K3 = np.empty((d, d))
    K4 = np.empty((d, d))
    Mt = np.empty((d, d))
    Minv = np.empty((d, d))
    Phi = np.empty((d, d))
    PS = np.empty((d, d))
    for k in range(n):
        for i in range(d):
            x_start[i] = x[i]
            for j in range(d):
                M[i, j] = 1.0 if i == j else 0.0
        Mn[0] = M
        _sigma(coeffs, powers, jumps, x, Sn[0])
        for s in range(sub):
            _drift(coeffs, powers, jumps, x, k1)
            _drift_jac(coeffs, powers, jumps, x, J)
            _mat_mul(J, M, K1)
            for i in range(d):
                xt[i] = x[i] + 0.5 * h * k1[i]
                for j in range(d):
                    Mt[i, j] = M[i, j] + 0.5 * h * K1[i, j]
            _drift(coeffs, powers, jumps, xt, k2)
            _drift_jac(coeffs, powers, jumps, xt, J)
            _mat_mul(J, Mt, K2)
            for i in range(d):
                xt[i] = x[i] + 0.5 * h * k2[i]
                for j in range(d):
                    Mt[i, j] = M[i, j] + 0.5 * h * K2[i, j]
            _drift(coeffs, powers, jumps, xt, k3)
            _drift_jac(coeffs, powers, jumps, xt, J)
            _mat_mul(J, Mt, K3)
            for i in range(d):
                xt[i] = x[i] + h * k3[i]
                for j in range(d):
                    Mt[i, j] = M[i, j] + h * K3[i, j]
            _drift(coeffs, powers, jumps, xt, k4)
            _drift_jac(coeffs, powers, jumps, xt, J)
            _mat_mul(J, Mt, K4)
            for i in range(d):
                x[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                for j in range(d):
                    M[i, j] = M[i, j] + (h / 6.0) * (
                        K1[i, j] + 2.0 * K2[i, j] + 2.0 * K3[i, j] + K4[i, j]
                    )
            if not _clip_state(x, d):
                return False, xs, A, F, T, G
            xs[k * sub + s + 1] = x
            Mn[s + 1] = M
            _sigma(coeffs, powers, jumps, x, Sn[s + 1])
        A[k] = M
        for i in range(d):
            fi = x[i]
            gi = x[i] - x0[i]
            for j in range(d):
                fi -= M[i, j] * x_start[j]
                gi -= M[i, j] * (x_start[j] - x0[j])
            F[k, i] = fi
            G[k, i] = gi
        for i in range(d):
            for j in range(d):
                T[k, i, j] = 0.0
        for node in range(sub + 1):
            _mat_inv(Mn[node], Minv)
            _mat_mul(M, Minv, Phi)
            _mat_mul(Phi, Sn[node], PS)
            w = 0.5 if (node == 0 or node == sub) else 1.0
            for i in range(d):
                for j in range(d):
                    acc = 0.0
                    for l in range(d):
                        acc += PS[i, l] * Phi[j, l]
                    T[k, i, j] += w * acc
        for i in range(d):
            for j in range(i, d):
                v = 0.5 * (T[k, i, j] + T[k, j, i]) * h / n_pop
                T[k, i, j] = v
                T[k, j, i] = v
    return True, xs, A, F, T, G


# ---------------------------------------------------------------------------
# public operations


def drift(model: ModelSpec, params: Mapping[str, float], x) -> np.ndarray:
    """Drift b(eta, x) of the limiting ODE at state x."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0):
        raise DomainError(f"state must be nonnegative, got {x}")
    out = np.empty(model.d)
    return _drift(model.coeffs(params), model.powers, model.jumps, x, out)


def diffusion(model: ModelSpec, params: Mapping[str, float], x):
    """Diffusion matrix Sigma(eta, x) and its lower-triangular square root.

    The square root is the positive-semidefinite Cholesky factor; zero rates
    (e.g. no infectives) give zero rows/columns rather than an error.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0):
        raise DomainError(f"state must be nonnegative, got {x}")
    out = np.empty((model.d, model.d))
    sig = _sigma(model.coeffs(params), model.powers, model.jumps, x, out)
    return sig, _psd_cholesky(sig)


def _psd_cholesky(mat: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Lower Cholesky factor tolerating exact semidefiniteness."""
    d = mat.shape[0]
    L = np.zeros((d, d))
    scale = max(np.abs(mat).max(), 1.0)
    for j in range(d):
        v = mat[j, j] - np.dot(L[j, :j], L[j, :j])
        if v < -tol * scale:
            raise NumericalError(f"matrix not positive semidefinite (pivot {v})")
        if v <= tol * scale:
            L[j, j] = 0.0
            continue
        L[j, j] = np.sqrt(v)
        for i in range(j + 1, d):
            L[i, j] = (mat[i, j] - np.dot(L[i, :j], L[j, :j])) / L[j, j]
    return L


@dataclass(frozen=True)
class OdeTrajectory:
    """RK4 solution stored on the sampling grid and its integration sub-grid."""

    times: np.ndarray       # (n+1,) sampling grid k*delta
    states: np.ndarray      # (n+1, d)
    sub_times: np.ndarray   # (n*substeps+1,)
    sub_states: np.ndarray  # (n*substeps+1, d)
    delta: float
    substeps: int

    def sub_index(self, t: float) -> int:
        h = self.sub_times[1] - self.sub_times[0]
        idx = int(round(t / h))
        if not (0 <= idx < len(self.sub_times)) or abs(self.sub_times[idx] - t) > 1e-9:
            raise DomainError(f"time {t} is not on the solver sub-grid")
        return idx


def solve_ode(
    model: ModelSpec,
    params: Mapping[str, float],
    t_end: float,
    delta: float,
    substeps: int = DEFAULT_SUBSTEPS,
) -> OdeTrajectory:
    """Integrate the limiting ODE with fixed-step RK4 on a delta/substeps grid."""
    if delta <= 0:
        raise DomainError("delta must be positive")
    if substeps < 1:
        raise DomainError("substeps must be >= 1")
    n = int(round(t_end / delta))
    if n < 1:
        raise DomainError("t_end must cover at least one sampling interval")
    h = delta / substeps
    x0 = model.x0(params)
    ok, xs = _rk4_path(model.coeffs(params), model.powers, model.jumps, x0, n * substeps, h)
    if not ok:
        raise NumericalError(
            f"ODE state left [0,1] beyond tolerance for model {model.name!r}; "
            "check parameter ranges"
        )
    sub_times = np.arange(n * substeps + 1) * h
    return OdeTrajectory(
        times=np.arange(n + 1) * delta,
        states=xs[::substeps].copy(),
        sub_times=sub_times,
        sub_states=xs,
        delta=delta,
        substeps=substeps,
    )


def resolvent(
    model: ModelSpec,
    params: Mapping[str, float],
    s: float,
    t: float,
    trajectory: OdeTrajectory,
) -> np.ndarray:
    """Resolvent Phi(eta, t, s) by integrating the variational matrix ODE.

    Runs the same RK4 scheme as the trajectory from node s to node t, so the
    semigroup identity holds to round-off.
    """
    if s > t:
        raise DomainError(f"requires s <= t, got s={s}, t={t}")
    i0 = trajectory.sub_index(s)
    i1 = trajectory.sub_index(t)
    if i0 == i1:
        return np.eye(model.d)
    h = trajectory.sub_times[1] - trajectory.sub_times[0]
    ok, _, M = _rk4_resolvent(
        model.coeffs(params),
        model.powers,
        model.jumps,
        trajectory.sub_states[i0].copy(),
        i1 - i0,
        h,
    )
    if not ok:
        raise NumericalError("variational integration left the state domain")
    return M


# ---------------------------------------------------------------------------
# observation schemes and state-space assembly


@dataclass(frozen=True)
class PrevalenceObs:
    """Noisy proportion of one compartment: B = p * e_c', P_k = p(1-p) x_c(t_k)/N."""

    p: float
    compartment: str = "i"


@dataclass(frozen=True)
class IncidenceObs:
    """Noisy increments: B = -p * sum of e_c over drained compartments.

    With ``tau2 = None`` the noise mimics binomial draws,
    P_k = p(1-p)(sum_c x_c(t_{k-1}) - x_c(t_k))/N; with an over-dispersion
    parameter it is P_k = (B dx_k + tau2 (B dx_k)^2)/N for the ODE increment
    dx_k.
    """

    p: float
    compartments: tuple[str, ...] = ("s",)
    tau2: float | None = None


ObservationScheme = PrevalenceObs | IncidenceObs


@dataclass(frozen=True)
class StateSpaceQuantities:
    """Per-interval AR(1) quantities; row k (0-based) covers (t_k, t_{k+1}].

    ``A[k]`` propagates t_k -> t_{k+1}; F, T, G, P and the observation row B
    follow the same indexing (row k belongs to observation k+1).
    """

    A: np.ndarray        # (n, d, d)
    F: np.ndarray        # (n, d)
    T: np.ndarray        # (n, d, d)
    G: np.ndarray        # (n, d)
    B: np.ndarray        # (q, d)
    P: np.ndarray        # (n, q, q)
    x0: np.ndarray       # (d,)
    grid: np.ndarray     # (n+1, d) ODE states at sampling times
    n_pop: float
    delta: float
    scheme: str          # "prevalence" | "incidence"
    floored: int = 0     # number of P entries raised to the variance floor

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]


def variance_floor(n_pop: float) -> float:
    return 1e-12 / n_pop


def statespace_quantities(
    model: ModelSpec,
    params: Mapping[str, float],
    n_pop: float,
    delta: float,
    n: int,
    obs: ObservationScheme,
    substeps: int = DEFAULT_SUBSTEPS,
) -> StateSpaceQuantities:
    """Assemble all AR(1) quantities for n sampling intervals of width delta."""
    if n < 1:
        raise DomainError("need at least one observation interval")
    h = delta / substeps
    x0 = model.x0(params)
    ok, xs, A, F, T, G = _statespace_kernel(
        model.coeffs(params), model.powers, model.jumps, x0, n, substeps, h, float(n_pop)
    )
    if not ok:
        raise NumericalError(
            f"ODE state left [0,1] beyond tolerance for model {model.name!r}"
        )
    grid = xs[::substeps].copy()
    floor = variance_floor(n_pop)
    if isinstance(obs, PrevalenceObs):
        scheme = "prevalence"
        c = model.compartments.index(obs.compartment)
        B = np.zeros((1, model.d))
        B[0, c] = obs.p
        var = obs.p * (1.0 - obs.p) * grid[1:, c] / n_pop
    elif isinstance(obs, IncidenceObs):
        scheme = "incidence"
        B = np.zeros((1, model.d))
        for name in obs.compartments:
            B[0, model.compartments.index(name)] = -obs.p
        bdx = (grid[1:] - grid[:-1]) @ B[0]
        if obs.tau2 is None:
            var = (1.0 - obs.p) * bdx / n_pop
        else:
            var = (bdx + obs.tau2 * bdx**2) / n_pop
    else:
        raise ConfigurationError(f"unknown observation scheme {obs!r}")
    floored = int(np.sum(var < floor))
    var = np.maximum(var, floor)
    P = var.reshape(n, 1, 1)
    return StateSpaceQuantities(
        A=A, F=F, T=T, G=G, B=B, P=P, x0=x0, grid=grid,
        n_pop=float(n_pop), delta=delta, scheme=scheme, floored=floored,
    )
