"""Dissipative Schrodinger flow on graphs, spin-space counterparts, RK4.

Four coupled-ODE systems share one integrator:

* ``nlse_rhs``      -- unit-sphere flow of a complex vertex field; the
                       potential is frozen at the initial state and the
                       dissipation is projected off the state direction, so
                       the flow preserves the norm exactly;
* ``ll_rhs``        -- cross-product (Landau-Lifshitz style) evolution of
                       one unit 3-vector per vertex;
* ``diffusion_rhs`` -- the real-field analog of the Schrodinger flow (its
                       conservative part is *not* tangent, so the norm is
                       logged but never asserted);
* ``spin2d_rhs``    -- the circle-valued analog of ``ll_rhs``.

Pointwise stereographic maps relate the two pairs.  ``ll_rhs_induced`` and
``spin2d_rhs_induced`` are the exact pushforwards of the vertex-field flows
through those maps; they are what trajectory-level gauge agreement actually
requires, and ``gauge_check`` can integrate either spin law.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .graph_core import (
    WeightedGraph,
    validate_real_field,
    validate_scalar_field,
    validate_spin_field,
)

__all__ = [
    "SingularProjectorError",
    "SouthPoleError",
    "DivergenceError",
    "InvalidStateError",
    "NlseConfig",
    "TrajectoryRecord",
    "SteadyState",
    "nlse_rhs",
    "ll_rhs",
    "ll_rhs_induced",
    "diffusion_rhs",
    "spin2d_rhs",
    "spin2d_rhs_induced",
    "to_sphere",
    "to_plane",
    "to_circle",
    "to_line",
    "phase_constraint",
    "phase_constraint_2d",
    "make_rhs",
    "integrate",
    "solve_steady_state",
    "solve_steady_state_many",
    "gauge_check",
    "gauge_align",
    "write_trajectory_csv",
    "write_invariants_jsonl",
]

_POLE_TOL = 1e-10


class InvalidStateError(ValueError):
    """State violates a precondition (norm, shape, or pole validity)."""


class SingularProjectorError(InvalidStateError):
    """Tangent projector undefined because the state has (near-)zero norm."""


class SouthPoleError(InvalidStateError):
    """Stereographic chart evaluated at (or too close to) its excluded point."""


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state."""

    def __init__(self, step: int, t: float):
        self.step = step
        self.t = t
        super().__init__(f"non-finite state at step {step} (t = {t:.6g})")


@dataclass(frozen=True)
class NlseConfig:
    """Integrator and steady-state settings shared by all four systems."""

    gamma: float = 1.0
    dt: float = 1e-2
    t_max: float = 1e4
    steady_tol: float = 1e-8
    renorm_tol: float = 1e-12

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.dt <= 0 or self.t_max <= 0:
            raise ValueError("dt and t_max must be positive")
        if self.steady_tol <= 0 or self.renorm_tol <= 0:
            raise ValueError("tolerances must be positive")


# -- right-hand sides -------------------------------------------------------


def nlse_rhs(g: WeightedGraph, psi: np.ndarray, psi0: np.ndarray,
             gamma: float) -> np.ndarray:
    """Norm-preserving dissipative Schrodinger flow.

    F = -i (L + diag(|psi0|^2)) psi - gamma * P (L psi + (|psi|^2 - |psi0|^2) psi)

    with L the coupling Laplacian and P the projector off the span of psi.
    The potential |psi0|^2 is frozen at the initial state, so F is a vector
    field parameterized by psi0.  Re<psi, F> = 0 identically.
    """
    psi = validate_scalar_field(g, psi)
    psi0 = validate_scalar_field(g, psi0)
    if np.sum(np.abs(psi) ** 2) < 1e-24:
        raise SingularProjectorError("cannot project at a zero-norm state")
    return _nlse_raw(g.coupling_laplacian(), np.abs(psi0) ** 2, psi, gamma)


def diffusion_rhs(g: WeightedGraph, phi: np.ndarray, phi0: np.ndarray,
                  gamma: float) -> np.ndarray:
    """Real-field analog of ``nlse_rhs`` (no -i on the conservative part).

    The projected dissipation is tangent to the sphere, but the conservative
    part -(L + diag(phi0^2)) phi is not, so this flow does not preserve
    ||phi||; callers log the norm instead of asserting it.
    """
    phi = validate_real_field(g, phi)
    phi0 = validate_real_field(g, phi0)
    if np.sum(phi ** 2) < 1e-24:
        raise SingularProjectorError("cannot project at a zero-norm state")
    return _diffusion_raw(g.coupling_laplacian(), phi0 ** 2, phi, gamma)


def _ll_raw(w: np.ndarray, v: np.ndarray, s: np.ndarray,
            gamma: float) -> np.ndarray:
    """Cross-product law on raw arrays (no validation; integrator substeps
    legitimately sit slightly off the unit spheres)."""
    ws = w @ s
    field = -2.0 * ws
    field[:, 2] += 2.0 * v
    prec = np.cross(s, field)
    d = -2.0 * (ws - w.sum(axis=1)[:, None] * s)
    d[:, 2] += 2.0 * (v - v.mean())
    damp = np.cross(s, np.cross(s, d))
    return prec - gamma * damp


def ll_rhs(g: WeightedGraph, s: np.ndarray, psi0: np.ndarray,
           gamma: float) -> np.ndarray:
    """Cross-product spin flow with frozen-potential field along e3.

    dS_j/dt = S_j x (-2 sum_k w_jk S_k + 2 |psi0_j|^2 e3)
              - gamma * S_j x (S_j x D_j),
    D_j = -2 sum_k w_jk (S_k - S_j) + 2 (|psi0_j|^2 - mean |psi0|^2) e3.

    Both terms are cross products with S_j, so the flow is pointwise tangent
    and preserves each ||S_j|| exactly.
    """
    s = validate_spin_field(g, s, unit_tol=1e-8)
    psi0 = validate_scalar_field(g, psi0)
    return _ll_raw(g.adjacency_matrix(), np.abs(psi0) ** 2, s, gamma)


def _spin2d_raw(w: np.ndarray, v: np.ndarray, t: np.ndarray,
                gamma: float) -> np.ndarray:
    wt = w @ t
    field = -2.0 * wt
    field[:, 1] += 2.0 * v
    c = t[:, 0] * field[:, 1] - t[:, 1] * field[:, 0]
    prec = np.zeros_like(t)
    prec[:, 0] = -c * t[:, 1]
    prec[:, 1] = c * t[:, 0]
    d = -2.0 * (wt - w.sum(axis=1)[:, None] * t)
    d[:, 1] += 2.0 * (v - v.mean())
    damp = np.cross(t, np.cross(t, d))
    damp[:, 2] = 0.0
    return prec - gamma * damp


def spin2d_rhs(g: WeightedGraph, t: np.ndarray, phi0: np.ndarray,
               gamma: float) -> np.ndarray:
    """Circle-valued analog of ``ll_rhs`` with field along e2 = (0, 1).

    Spins are stored as (N, 3) arrays with zero third component.  The planar
    cross product a x b = a_x b_y - a_y b_x is a scalar; the scalar c = T x B
    drives rotation along the tangent (-T_y, T_x), and the damping term uses
    the three-dimensional embedding, where T x (T x D) = -D + T <T, D> for
    unit T.
    """
    t = validate_spin_field(g, t, unit_tol=1e-8)
    if np.abs(t[:, 2]).max() > 1e-12:
        raise InvalidStateError("planar spin field must have zero third component")
    phi0 = validate_real_field(g, phi0)
    return _spin2d_raw(g.adjacency_matrix(), phi0 ** 2, t, gamma)


# -- stereographic charts ----------------------------------------------------


def to_sphere(psi: np.ndarray) -> np.ndarray:
    """Per-vertex stereographic image of a complex field on the unit sphere.

    S = (2 Re psi, 2 Im psi, 1 - |psi|^2) / (1 + |psi|^2); psi = 0 maps to
    the north pole and the south pole is unreachable (|psi| -> infinity).
    """
    psi = np.asarray(psi, dtype=complex)
    r2 = np.abs(psi) ** 2
    u = 1.0 + r2
    s = np.empty(psi.shape + (3,))
    s[..., 0] = 2.0 * psi.real / u
    s[..., 1] = 2.0 * psi.imag / u
    s[..., 2] = (1.0 - r2) / u
    return s


def to_plane(s: np.ndarray) -> np.ndarray:
    """Inverse of ``to_sphere``: psi = (S_x + i S_y) / (1 + S_z)."""
    s = np.asarray(s, dtype=float)
    den = 1.0 + s[..., 2]
    if np.any(den <= _POLE_TOL):
        raise SouthPoleError("state touches the excluded south pole (S_z = -1)")
    return (s[..., 0] + 1j * s[..., 1]) / den


def to_circle(phi: np.ndarray) -> np.ndarray:
    """Planar chart: T = (2 phi, 1 - phi^2) / (1 + phi^2), third component 0."""
    phi = np.asarray(phi, dtype=float)
    u = 1.0 + phi ** 2
    t = np.zeros(phi.shape + (3,))
    t[..., 0] = 2.0 * phi / u
    t[..., 1] = (1.0 - phi ** 2) / u
    return t


def to_line(t: np.ndarray) -> np.ndarray:
    """Inverse of ``to_circle``: phi = T_x / (1 + T_y); excluded point (0, -1)."""
    t = np.asarray(t, dtype=float)
    den = 1.0 + t[..., 1]
    if np.any(den <= _POLE_TOL):
        raise SouthPoleError("state touches the excluded point (T_y = -1)")
    return t[..., 0] / den


def phase_constraint(s: np.ndarray) -> float:
    """sum_j (1 - S_z) / (1 + S_z); equals ||to_plane(S)||^2 off the pole."""
    s = np.asarray(s, dtype=float)
    den = 1.0 + s[..., 2]
    if np.any(den <= _POLE_TOL):
        raise SouthPoleError("constraint undefined at the south pole")
    return float(np.sum((1.0 - s[..., 2]) / den))


def phase_constraint_2d(t: np.ndarray) -> float:
    """sum_j (1 - T_y) / (1 + T_y), the planar version of the constraint."""
    t = np.asarray(t, dtype=float)
    den = 1.0 + t[..., 1]
    if np.any(den <= _POLE_TOL):
        raise SouthPoleError("constraint undefined at the excluded point")
    return float(np.sum((1.0 - t[..., 1]) / den))


def _pushforward_sphere(psi: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Differential of ``to_sphere`` at psi applied to dpsi/dt = f."""
    x, y = psi.real, psi.imag
    a, b = f.real, f.imag
    u = 1.0 + x * x + y * y
    p = x * a + y * b
    ds = np.empty(psi.shape + (3,))
    ds[..., 0] = 2.0 * a / u - 4.0 * x * p / u ** 2
    ds[..., 1] = 2.0 * b / u - 4.0 * y * p / u ** 2
    ds[..., 2] = -4.0 * p / u ** 2
    return ds


def _nlse_raw(lap: np.ndarray, v: np.ndarray, psi: np.ndarray,
              gamma: float) -> np.ndarray:
    lp = lap @ psi
    diss = lp + (np.abs(psi) ** 2 - v) * psi
    n2 = np.sum(np.abs(psi) ** 2).real
    proj = diss - psi * (np.sum(np.conj(psi) * diss) / n2)
    return -1j * (lp + v * psi) - gamma * proj


def _diffusion_raw(lap: np.ndarray, v: np.ndarray, phi: np.ndarray,
                   gamma: float) -> np.ndarray:
    lp = lap @ phi
    diss = lp + (phi ** 2 - v) * phi
    proj = diss - phi * (np.sum(phi * diss) / np.sum(phi ** 2))
    return -(lp + v * phi) - gamma * proj


def _ll_induced_raw(lap: np.ndarray, v: np.ndarray, s: np.ndarray,
                    gamma: float) -> np.ndarray:
    psi = to_plane(s)
    return _pushforward_sphere(psi, _nlse_raw(lap, v, psi, gamma))


def _spin2d_induced_raw(lap: np.ndarray, v: np.ndarray, t: np.ndarray,
                        gamma: float) -> np.ndarray:
    phi = to_line(t)
    f = _diffusion_raw(lap, v, phi, gamma)
    rate = 2.0 * f / (1.0 + phi ** 2)
    dt = np.zeros_like(t)
    dt[:, 0] = rate * t[:, 1]
    dt[:, 1] = -rate * t[:, 0]
    return dt


def ll_rhs_induced(g: WeightedGraph, s: np.ndarray, psi0: np.ndarray,
                   gamma: float) -> np.ndarray:
    """Exact pushforward of ``nlse_rhs`` through the stereographic chart.

    Integrating this law from to_sphere(psi0) reproduces to_sphere(psi(t))
    up to integrator error; it differs from the cross-product law ``ll_rhs``
    (already for a single vertex the two rotation rates differ).
    """
    s = validate_spin_field(g, s, unit_tol=1e-8)
    psi0 = validate_scalar_field(g, psi0)
    return _ll_induced_raw(g.coupling_laplacian(), np.abs(psi0) ** 2, s, gamma)


def spin2d_rhs_induced(g: WeightedGraph, t: np.ndarray, phi0: np.ndarray,
                       gamma: float) -> np.ndarray:
    """Exact pushforward of ``diffusion_rhs`` through the planar chart."""
    t = validate_spin_field(g, t, unit_tol=1e-8)
    phi0 = validate_real_field(g, phi0)
    return _spin2d_induced_raw(g.coupling_laplacian(), phi0 ** 2, t, gamma)


# -- integration -------------------------------------------------------------


@dataclass
class TrajectoryRecord:
    """Fixed-step trajectory with per-step invariant logs.

    ``invariant_log`` maps names ("norm", "constraint") to per-step arrays
    aligned with ``times``; ``max_step_drift`` is the largest norm deviation
    observed *before* renormalization in any single step.
    """

    times: np.ndarray
    states: np.ndarray
    invariant_log: dict[str, np.ndarray]
    system: str
    max_step_drift: float


def make_rhs(g: WeightedGraph, initial: np.ndarray, config: NlseConfig,
             system: str, spin_law: str = "cross") -> Callable[[np.ndarray], np.ndarray]:
    """Bind a system's right-hand side to a graph and frozen initial data."""
    gamma = config.gamma
    if spin_law not in ("cross", "pushforward"):
        raise ValueError(f"unknown spin law {spin_law!r}")
    if system == "nlse":
        psi0 = validate_scalar_field(g, initial)
        lap = g.coupling_laplacian()
        v = np.abs(psi0) ** 2
        return lambda psi: _nlse_raw(lap, v, psi, gamma)
    if system == "ll":
        psi0 = validate_scalar_field(g, initial)
        v = np.abs(psi0) ** 2
        if spin_law == "cross":
            w = g.adjacency_matrix()
            return lambda s: _ll_raw(w, v, s, gamma)
        lap = g.coupling_laplacian()
        return lambda s: _ll_induced_raw(lap, v, s, gamma)
    if system == "diffusion":
        phi0 = validate_real_field(g, initial)
        lap = g.coupling_laplacian()
        v = phi0 ** 2
        return lambda phi: _diffusion_raw(lap, v, phi, gamma)
    if system == "spin2d":
        phi0 = validate_real_field(g, initial)
        v = phi0 ** 2
        if spin_law == "cross":
            w = g.adjacency_matrix()
            return lambda t: _spin2d_raw(w, v, t, gamma)
        lap = g.coupling_laplacian()
        return lambda t: _spin2d_induced_raw(lap, v, t, gamma)
    raise ValueError(f"unknown system {system!r}")


def _rk4_step(rhs: Callable, y: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * dt * k1)
    k3 = rhs(y + 0.5 * dt * k2)
    k4 = rhs(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(rhs: Callable[[np.ndarray], np.ndarray], y0: np.ndarray,
              config: NlseConfig, *, system: str = "nlse",
              t_final: float | None = None) -> TrajectoryRecord:
    """Classical fixed-step RK4 with post-step renormalization.

    Renormalization policy: the complex flow is rescaled to its initial
    norm, spin systems are rescaled per spin, the real diffusion flow is
    left untouched.  A rescale only happens when the drift exceeds
    ``config.renorm_tol``; drift magnitudes are tracked so tests can verify
    the O(dt^5) single-step bound.
    """
    horizon = config.t_max if t_final is None else float(t_final)
    n_steps = max(1, int(round(horizon / config.dt)))
    y = np.array(y0)
    if system == "nlse":
        norm0 = float(np.linalg.norm(y))
        if abs(norm0 - 1.0) > 1e-9:
            raise InvalidStateError(f"initial norm {norm0} is not 1 (tol 1e-9)")
    elif system in ("ll", "spin2d"):
        dev = np.abs(np.linalg.norm(y, axis=1) - 1.0).max()
        if dev > 1e-8:
            raise InvalidStateError(f"initial spin norms off unit by {dev:.3e}")

    times = np.empty(n_steps + 1)
    states = np.empty((n_steps + 1,) + y.shape, dtype=y.dtype)
    logs: dict[str, list[float]] = {"norm": []}
    if system in ("ll", "spin2d"):
        logs["constraint"] = []

    def log_state(yy: np.ndarray) -> None:
        if system == "nlse":
            logs["norm"].append(float(np.linalg.norm(yy)))
        elif system == "diffusion":
            logs["norm"].append(float(np.linalg.norm(yy)))
        elif system == "ll":
            logs["norm"].append(float(np.linalg.norm(yy, axis=1).max()))
            logs["constraint"].append(phase_constraint(yy))
        else:
            logs["norm"].append(float(np.linalg.norm(yy, axis=1).max()))
            logs["constraint"].append(phase_constraint_2d(yy))

    times[0] = 0.0
    states[0] = y
    log_state(y)
    max_drift = 0.0
    for k in range(1, n_steps + 1):
        y = _rk4_step(rhs, y, config.dt)
        if not np.all(np.isfinite(y)):
            raise DivergenceError(k, k * config.dt)
        if system == "nlse":
            nrm = float(np.linalg.norm(y))
            max_drift = max(max_drift, abs(nrm - 1.0))
            if abs(nrm - 1.0) > config.renorm_tol:
                y = y / nrm
        elif system in ("ll", "spin2d"):
            nrms = np.linalg.norm(y, axis=1)
            max_drift = max(max_drift, float(np.abs(nrms - 1.0).max()))
            scale = np.where(np.abs(nrms - 1.0) > config.renorm_tol, nrms, 1.0)
            y = y / scale[:, None]
        times[k] = k * config.dt
        states[k] = y
        log_state(y)
    return TrajectoryRecord(times, states,
                            {k: np.array(v) for k, v in logs.items()},
                            system, max_drift)


# -- steady states -----------------------------------------------------------


@dataclass(frozen=True)
class SteadyState:
    """Result of driving the complex flow to a relative equilibrium.

    ``residual`` is the sup norm of the projection of F off the state;
    it vanishes exactly when the state is stationary modulo a global phase
    (the flow keeps rotating at a constant rate there).
    """

    psi_inf: np.ndarray
    t_reached: float
    residual: float
    converged: bool


def _batch_rhs(lap: np.ndarray, v: np.ndarray, psi: np.ndarray,
               gamma: float) -> np.ndarray:
    lp = np.einsum("sij,sj->si", lap, psi)
    diss = lp + (np.abs(psi) ** 2 - v) * psi
    n2 = np.sum(np.abs(psi) ** 2, axis=1).real
    inner = np.sum(np.conj(psi) * diss, axis=1)
    proj = diss - psi * (inner / n2)[:, None]
    return -1j * (lp + v * psi) - gamma * proj


def _batch_residual(lap: np.ndarray, v: np.ndarray, psi: np.ndarray,
                    gamma: float) -> np.ndarray:
    f = _batch_rhs(lap, v, psi, gamma)
    n2 = np.sum(np.abs(psi) ** 2, axis=1).real
    inner = np.sum(np.conj(psi) * f, axis=1)
    pf = f - psi * (inner / n2)[:, None]
    return np.abs(pf).max(axis=1)


def solve_steady_state_many(graphs: Sequence[WeightedGraph],
                            psi0s: Sequence[np.ndarray],
                            config: NlseConfig,
                            starts: Sequence[np.ndarray] | None = None,
                            ) -> list[SteadyState]:
    """Drive many independent flows to relative equilibria in lockstep.

    All graphs must share the vertex count.  ``starts`` optionally replaces
    the integration start point (the frozen potential still comes from the
    matching ``psi0``), which lets callers warm-start perturbed problems.
    Rows that fail to converge by ``t_max`` come back with
    ``converged=False``; rows that go non-finite come back with an infinite
    residual.
    """
    n_prob = len(graphs)
    if n_prob == 0:
        return []
    n = graphs[0].n
    lap = np.stack([g.coupling_laplacian() for g in graphs])
    psi0_arr = np.stack([validate_scalar_field(g, p)
                         for g, p in zip(graphs, psi0s)])
    norms = np.linalg.norm(psi0_arr, axis=1)
    if np.abs(norms - 1.0).max() > 1e-9:
        raise InvalidStateError("initial states must be unit norm (tol 1e-9)")
    v = np.abs(psi0_arr) ** 2
    psi = psi0_arr.copy() if starts is None else np.stack(
        [np.asarray(s, dtype=complex) for s in starts])

    dt, gamma = config.dt, config.gamma
    check_every = 20
    total_steps = max(1, int(round(config.t_max / dt)))

    result_psi = np.empty_like(psi)
    result_t = np.zeros(n_prob)
    result_res = np.full(n_prob, np.inf)
    done = np.zeros(n_prob, dtype=bool)
    ok = np.zeros(n_prob, dtype=bool)

    active = np.arange(n_prob)
    res0 = _batch_residual(lap, v, psi, gamma)
    hit = res0 <= config.steady_tol
    for idx in active[hit]:
        result_psi[idx] = psi[idx]
        result_t[idx] = 0.0
        result_res[idx] = res0[idx]
        done[idx] = True
        ok[idx] = True
    active = active[~hit]

    step = 0
    while active.size and step < total_steps:
        chunk = min(check_every, total_steps - step)
        la, va = lap[active], v[active]
        pa = psi[active]
        for _ in range(chunk):
            k1 = _batch_rhs(la, va, pa, gamma)
            k2 = _batch_rhs(la, va, pa + 0.5 * dt * k1, gamma)
            k3 = _batch_rhs(la, va, pa + 0.5 * dt * k2, gamma)
            k4 = _batch_rhs(la, va, pa + dt * k3, gamma)
            pa = pa + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            nrm = np.linalg.norm(pa, axis=1)
            pa = pa / np.where(np.abs(nrm - 1.0) > config.renorm_tol, nrm, 1.0)[:, None]
        step += chunk
        psi[active] = pa
        finite = np.isfinite(pa).all(axis=1)
        safe = np.where(finite[:, None], pa, psi0_arr[active])
        res = np.where(finite, _batch_residual(la, va, safe, gamma), np.inf)
        hit = (res <= config.steady_tol) | ~finite
        for j, idx in enumerate(active):
            if hit[j]:
                result_psi[idx] = pa[j]
                result_t[idx] = step * dt
                result_res[idx] = res[j]
                done[idx] = True
                ok[idx] = bool(finite[j] and res[j] <= config.steady_tol)
        active = active[~hit]

    for idx in active:  # ran out of time
        la = lap[idx:idx + 1]
        va = v[idx:idx + 1]
        result_psi[idx] = psi[idx]
        result_t[idx] = step * dt
        result_res[idx] = float(_batch_residual(la, va, psi[idx:idx + 1], gamma)[0])
    return [SteadyState(result_psi[i], float(result_t[i]),
                        float(result_res[i]), bool(ok[i]))
            for i in range(n_prob)]


def solve_steady_state(g: WeightedGraph, psi0: np.ndarray, config: NlseConfig,
                       *, start: np.ndarray | None = None) -> SteadyState:
    """Integrate the complex flow until it is stationary modulo phase.

    Stationarity is detected through the projected residual ||P F||_inf
    (checked every 20 steps, and at t = 0); the returned state keeps
    whatever global phase the integration happened to end at.
    """
    starts = None if start is None else [start]
    out = solve_steady_state_many([g], [psi0], config, starts)[0]
    if not np.all(np.isfinite(out.psi_inf)):
        raise DivergenceError(int(round(out.t_reached / config.dt)), out.t_reached)
    return out


def gauge_align(psi: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Rotate a field by the global phase that aligns it with ``reference``.

    The returned field maximizes Re<reference, .> over the phase orbit, so
    <reference, aligned> is real and nonnegative.
    """
    inner = np.vdot(reference, psi)
    if abs(inner) < 1e-300:
        return np.array(psi)
    return psi * (np.conj(inner) / abs(inner))


# -- gauge check -------------------------------------------------------------


def gauge_check(g: WeightedGraph, initial: np.ndarray, config: NlseConfig,
                *, t_final: float = 10.0, pair: str = "complex",
                spin_law: str = "cross") -> float:
    """Integrate a vertex-field flow and its spin counterpart side by side.

    Returns the maximum over time of the worst per-vertex Euclidean gap
    between the mapped field trajectory and the spin trajectory.  ``pair``
    selects the complex/sphere system or the real/circle system;
    ``spin_law`` selects the cross-product law or the exact pushforward.
    """
    if pair == "complex":
        psi0 = validate_scalar_field(g, initial)
        if abs(np.linalg.norm(psi0) - 1.0) > 1e-9:
            raise InvalidStateError("gauge check requires a unit-norm state")
        field_rhs = make_rhs(g, psi0, config, "nlse")
        spin_rhs_fn = make_rhs(g, psi0, config, "ll", spin_law)
        chart = to_sphere
        y = psi0.copy()
        s = to_sphere(psi0)
    elif pair == "real":
        phi0 = validate_real_field(g, initial)
        field_rhs = make_rhs(g, phi0, config, "diffusion")
        spin_rhs_fn = make_rhs(g, phi0, config, "spin2d", spin_law)
        chart = to_circle
        y = phi0.copy()
        s = to_circle(phi0)
    else:
        raise ValueError(f"unknown pair {pair!r}")

    n_steps = max(1, int(round(t_final / config.dt)))
    worst = float(np.linalg.norm(chart(y) - s, axis=1).max())
    for k in range(1, n_steps + 1):
        y = _rk4_step(field_rhs, y, config.dt)
        s = _rk4_step(spin_rhs_fn, s, config.dt)
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(s))):
            raise DivergenceError(k, k * config.dt)
        if pair == "complex":
            nrm = float(np.linalg.norm(y))
            if abs(nrm - 1.0) > config.renorm_tol:
                y = y / nrm
        nrms = np.linalg.norm(s, axis=1)
        scale = np.where(np.abs(nrms - 1.0) > config.renorm_tol, nrms, 1.0)
        s = s / scale[:, None]
        worst = max(worst, float(np.linalg.norm(chart(y) - s, axis=1).max()))
    return worst


# -- serialization -----------------------------------------------------------


def write_trajectory_csv(record: TrajectoryRecord, path: str) -> None:
    """One row per step: t, then per-vertex state columns.

    Complex fields use re_j / im_j column pairs; spin fields use
    s{j}_x / s{j}_y / s{j}_z triples; real fields use phi_j columns.
    Floats are written with shortest round-trip formatting.
    """
    states = record.states
    if np.iscomplexobj(states):
        n = states.shape[1]
        header = ["t"] + [c for j in range(n) for c in (f"re_{j}", f"im_{j}")]
        rows = ((t,) + tuple(x for z in row for x in (z.real, z.imag))
                for t, row in zip(record.times, states))
    elif states.ndim == 3:
        n = states.shape[1]
        header = ["t"] + [c for j in range(n)
                          for c in (f"s{j}_x", f"s{j}_y", f"s{j}_z")]
        rows = ((t,) + tuple(row.reshape(-1))
                for t, row in zip(record.times, states))
    else:
        n = states.shape[1]
        header = ["t"] + [f"phi_{j}" for j in range(n)]
        rows = ((t,) + tuple(row) for t, row in zip(record.times, states))
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def write_invariants_jsonl(record: TrajectoryRecord, path: str) -> None:
    """One JSON object per step: {"t": ..., "norm": ..., "constraint": ...}."""
    keys = sorted(record.invariant_log)
    with open(path, "w") as fh:
        for i, t in enumerate(record.times):
            obj = {"t": float(t)}
            for k in keys:
                obj[k] = float(record.invariant_log[k][i])
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
