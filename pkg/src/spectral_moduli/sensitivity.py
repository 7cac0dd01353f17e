"""Derivatives of the converged hidden state in weights and initial data.

A converged state is stationary only modulo global phase: F(psi, p) =
i*alpha*psi with a real rotation rate alpha.  Differentiating that family in
a parameter p gives

    (J - i*alpha) d_psi - i*psi d_alpha = -dF/dp,

a system that is singular along the phase direction i*psi.  We restore
invertibility with one bordering row, the phase-slice condition
Im<psi, d_psi> = 0, and solve the real (2N+1) x (2N+1) system for
(d_psi, d_alpha).  Everything complex is realified as [Re; Im] stacks; the
Jacobian J is assembled analytically (the right-hand side contains conj-
linear terms, so J is real-linear, not complex-linear).

The finite-difference oracle re-solves the flow at perturbed parameters and
gauge-aligns both endpoints to the base state, which places them on the same
phase slice the bordered system uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .graph_core import GraphError, WeightedGraph, validate_scalar_field
from .dynamics import NlseConfig, SteadyState, gauge_align, solve_steady_state

__all__ = [
    "NonIsolatedSteadyStateError",
    "SensitivityResult",
    "realify",
    "unrealify",
    "rhs_jacobian",
    "dpsi_dw",
    "dpsi_dw_all",
    "dpsi_dpsi0",
    "fd_oracle",
    "steady_state_adjoint",
    "weight_gradients",
    "potential_gradient",
]

_COND_LIMIT = 1e12


class NonIsolatedSteadyStateError(RuntimeError):
    """The phase-quotient Jacobian is singular: the state is not isolated."""


@dataclass(frozen=True)
class SensitivityResult:
    """Directional derivative of the steady state, realified to length 2N.

    ``method`` is "implicit" or "finite_difference"; ``fd_relative_error``
    is populated when an FD cross-check was requested alongside an implicit
    solve.
    """

    d_psi_inf: np.ndarray
    method: str
    condition_estimate: float
    fd_relative_error: float | None = None


def realify(z: np.ndarray) -> np.ndarray:
    """Stack a complex vector as [Re; Im] (length 2N)."""
    z = np.asarray(z, dtype=complex)
    return np.concatenate([z.real, z.imag])


def unrealify(x: np.ndarray) -> np.ndarray:
    """Inverse of ``realify``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0] // 2
    return x[:n] + 1j * x[n:]


def _rhs_jvp(lap: np.ndarray, v: np.ndarray, psi: np.ndarray, gamma: float,
             delta: np.ndarray) -> np.ndarray:
    """Directional derivative of the complex flow's right-hand side.

    Real-linear in delta (the |psi|^2 and projector terms differentiate
    into conj-linear pieces).
    """
    n2 = float(np.sum(np.abs(psi) ** 2))
    d = lap @ psi + (np.abs(psi) ** 2 - v) * psi
    dd = lap @ delta + (np.abs(psi) ** 2 - v) * delta \
        + 2.0 * (psi.real * delta.real + psi.imag * delta.imag) * psi
    s = np.vdot(psi, d)
    ds = np.vdot(delta, d) + np.vdot(psi, dd)
    dn2 = 2.0 * np.sum(psi.real * delta.real + psi.imag * delta.imag)
    dproj = dd - delta * (s / n2) - psi * (ds / n2) + psi * (s * dn2 / n2 ** 2)
    return -1j * (lap @ delta + v * delta) - gamma * dproj


def rhs_jacobian(g: WeightedGraph, psi0: np.ndarray, psi: np.ndarray,
                 gamma: float) -> np.ndarray:
    """Realified 2N x 2N Jacobian of the complex flow at ``psi``."""
    psi0 = validate_scalar_field(g, psi0)
    psi = validate_scalar_field(g, psi)
    lap = g.coupling_laplacian()
    v = np.abs(psi0) ** 2
    n = g.n
    jac = np.empty((2 * n, 2 * n))
    basis = np.eye(n)
    for j in range(n):
        jac[:, j] = realify(_rhs_jvp(lap, v, psi, gamma, basis[j] + 0j))
        jac[:, n + j] = realify(_rhs_jvp(lap, v, psi, gamma, 1j * basis[j]))
    return jac


def _phase_generator(n: int) -> np.ndarray:
    """Realified multiplication by i: [Re; Im] -> [-Im; Re]."""
    k = np.zeros((2 * n, 2 * n))
    k[:n, n:] = -np.eye(n)
    k[n:, :n] = np.eye(n)
    return k


def _bordered_system(g: WeightedGraph, psi0: np.ndarray, steady: SteadyState,
                     gamma: float) -> tuple[np.ndarray, float]:
    """Doubly bordered real matrix at the steady state plus its condition.

    The linearization J - i*alpha annihilates the phase direction i*psi
    exactly, and it is near-singular along psi itself: the flow conserves
    the norm from any start, so every sphere radius carries its own
    relative equilibrium and the equilibria form a curve crossing the unit
    sphere.  Both directions are therefore bordered out: two slice rows
    (Im<psi, d_psi> = 0 and Re<psi, d_psi> = 0) and two auxiliary columns
    (phase rate, radial source).  For consistent right-hand sides the
    radial source solves to ~0 and d_psi is the on-sphere derivative.
    """
    if not steady.converged:
        raise ValueError("sensitivity requires a converged steady state")
    psi = steady.psi_inf
    n = g.n
    lap = g.coupling_laplacian()
    v = np.abs(np.asarray(psi0)) ** 2
    f = -1j * (lap @ psi + v * psi)  # projected part vanishes at stationarity
    alpha = np.vdot(psi, f).imag / float(np.sum(np.abs(psi) ** 2))
    jac = rhs_jacobian(g, psi0, psi, gamma)
    gauge = realify(1j * psi)
    radial = realify(psi)
    b = np.zeros((2 * n + 2, 2 * n + 2))
    b[:2 * n, :2 * n] = jac - alpha * _phase_generator(n)
    b[:2 * n, 2 * n] = -gauge
    b[:2 * n, 2 * n + 1] = -radial
    b[2 * n, :2 * n] = gauge
    b[2 * n + 1, :2 * n] = radial
    cond = float(np.linalg.cond(b))
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise NonIsolatedSteadyStateError(
            f"bordered Jacobian is numerically singular (cond {cond:.3e})")
    return b, cond


def _dF_dweight(g: WeightedGraph, psi: np.ndarray, edge: tuple[int, int],
                gamma: float) -> np.ndarray:
    """Derivative of the right-hand side in one edge weight."""
    u, v_ = edge
    z = np.zeros(g.n, dtype=complex)
    z[u] = psi[u] - psi[v_]
    z[v_] = psi[v_] - psi[u]
    n2 = float(np.sum(np.abs(psi) ** 2))
    proj = z - psi * (np.vdot(psi, z) / n2)
    return -1j * z - gamma * proj


def _dF_dpotential(g: WeightedGraph, psi: np.ndarray, dv: np.ndarray,
                   gamma: float) -> np.ndarray:
    """Derivative of the right-hand side along a potential perturbation dv."""
    z = dv * psi
    n2 = float(np.sum(np.abs(psi) ** 2))
    proj = z - psi * (np.vdot(psi, z) / n2)
    return -1j * z + gamma * proj


def _solve_bordered(b: np.ndarray, rhs_top: np.ndarray) -> np.ndarray:
    n2 = rhs_top.shape[0]
    rhs = np.zeros(b.shape[0])
    rhs[:n2] = rhs_top
    sol = scipy.linalg.lu_solve(scipy.linalg.lu_factor(b), rhs)
    return sol[:n2]


def dpsi_dw(g: WeightedGraph, psi0: np.ndarray, steady: SteadyState,
            edge: tuple[int, int], gamma: float = 1.0) -> SensitivityResult:
    """Implicit derivative of the steady state in one edge weight."""
    edge = (min(edge), max(edge))
    if edge not in g.edge_index():
        raise GraphError(f"edge {edge} not in graph")
    b, cond = _bordered_system(g, psi0, steady, gamma)
    rhs_top = -realify(_dF_dweight(g, steady.psi_inf, edge, gamma))
    return SensitivityResult(_solve_bordered(b, rhs_top), "implicit", cond)


def dpsi_dw_all(g: WeightedGraph, psi0: np.ndarray, steady: SteadyState,
                gamma: float = 1.0) -> dict[tuple[int, int], SensitivityResult]:
    """Per-edge implicit derivatives sharing one factorization."""
    if g.n_edges == 0:
        return {}
    b, cond = _bordered_system(g, psi0, steady, gamma)
    lu = scipy.linalg.lu_factor(b)
    out = {}
    n2 = 2 * g.n
    for edge in g.edges:
        rhs = np.zeros(b.shape[0])
        rhs[:n2] = -realify(_dF_dweight(g, steady.psi_inf, edge, gamma))
        out[edge] = SensitivityResult(
            scipy.linalg.lu_solve(lu, rhs)[:n2], "implicit", cond)
    return out


def dpsi_dpsi0(g: WeightedGraph, psi0: np.ndarray, steady: SteadyState,
               direction: np.ndarray, gamma: float = 1.0) -> SensitivityResult:
    """Implicit derivative of the steady state along a tangent move of psi0.

    psi0 enters the converged state only through the frozen potential
    |psi0|^2 (within one basin the flow's endpoint, taken modulo phase, is a
    function of the potential alone), so this differentiates the potential
    channel: dv = 2 Re(conj(psi0) * direction).
    """
    psi0 = validate_scalar_field(g, psi0)
    direction = np.asarray(direction, dtype=complex)
    if direction.shape != psi0.shape:
        raise GraphError("direction shape does not match the state")
    if abs(float(np.vdot(psi0, direction).real)) > 1e-10:
        raise ValueError("direction must be tangent to the unit sphere "
                         "(Re<psi0, direction> = 0 within 1e-10)")
    b, cond = _bordered_system(g, psi0, steady, gamma)
    dv = 2.0 * (psi0.real * direction.real + psi0.imag * direction.imag)
    rhs_top = -realify(_dF_dpotential(g, steady.psi_inf, dv, gamma))
    return SensitivityResult(_solve_bordered(b, rhs_top), "implicit", cond)


def fd_oracle(g: WeightedGraph, psi0: np.ndarray, config: NlseConfig,
              param: tuple[str, object], h: float = 1e-5,
              solver: Callable[..., SteadyState] | None = None,
              ) -> SensitivityResult:
    """Central finite differences of gauge-aligned steady states.

    ``param`` is ("w", edge) or ("psi0", direction).  Both perturbed states
    are aligned to the unperturbed one, so the difference quotient lives on
    the same phase slice as the implicit solve.  ``solver`` is injectable
    for testing the difference scheme itself.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    solve = solver if solver is not None else solve_steady_state
    psi0 = validate_scalar_field(g, psi0)
    kind, spec = param
    if kind == "w":
        edge = (min(spec), max(spec))
        idx = g.edge_index()[edge]
        w = np.array(g.weights)
        problems = []
        for sign in (+1.0, -1.0):
            wp = w.copy()
            wp[idx] += sign * h
            if wp[idx] <= 0:
                raise ValueError(f"perturbed weight {wp[idx]} not positive")
            problems.append((g.with_weights(wp), psi0))
    elif kind == "psi0":
        direction = np.asarray(spec, dtype=complex)
        problems = []
        for sign in (+1.0, -1.0):
            p = psi0 + sign * h * direction
            problems.append((g, p / np.linalg.norm(p)))
    else:
        raise ValueError(f"unknown parameter kind {kind!r}")

    base = solve(g, psi0, config)
    if not base.converged:
        raise RuntimeError("base steady-state solve did not converge")
    aligned = []
    for gp, pp in problems:
        out = solve(gp, pp, config)
        if not out.converged:
            raise RuntimeError("perturbed steady-state solve did not converge")
        aligned.append(gauge_align(out.psi_inf, base.psi_inf))
    quotient = (aligned[0] - aligned[1]) / (2.0 * h)
    return SensitivityResult(realify(quotient), "finite_difference", 1.0)


def steady_state_adjoint(g: WeightedGraph, psi0: np.ndarray,
                         steady: SteadyState, cotangent: np.ndarray,
                         gamma: float = 1.0) -> np.ndarray:
    """Adjoint solve: one transposed bordered system for a loss cotangent.

    Given d(loss)/d(psi_inf) as a realified 2N vector, returns lam (2N) such
    that the loss gradient in any parameter p is -lam . realify(dF/dp).
    This prices every edge/potential direction with a single solve.
    """
    b, _ = _bordered_system(g, psi0, steady, gamma)
    n2 = 2 * g.n
    rhs = np.zeros(b.shape[0])
    rhs[:n2] = np.asarray(cotangent, dtype=float)
    lam = scipy.linalg.lu_solve(scipy.linalg.lu_factor(b.T), rhs)
    return lam[:n2]


def weight_gradients(g: WeightedGraph, psi0: np.ndarray, steady: SteadyState,
                     cotangent: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """Loss gradient in every edge weight via the adjoint state."""
    if g.n_edges == 0:
        return np.zeros(0)
    lam = steady_state_adjoint(g, psi0, steady, cotangent, gamma)
    psi = steady.psi_inf
    out = np.empty(g.n_edges)
    for k, edge in enumerate(g.edges):
        out[k] = -float(lam @ realify(_dF_dweight(g, psi, edge, gamma)))
    return out


def potential_gradient(g: WeightedGraph, psi0: np.ndarray, steady: SteadyState,
                       cotangent: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """Loss gradient in the frozen potential (length N) via the adjoint."""
    lam = steady_state_adjoint(g, psi0, steady, cotangent, gamma)
    psi = steady.psi_inf
    n2 = float(np.sum(np.abs(psi) ** 2))
    lam_c = unrealify(lam)
    # column j of dF/dV is (gamma - i) psi_j e_j - gamma psi |psi_j|^2 / n2
    lead = ((gamma - 1j) * psi * np.conj(lam_c)).real
    tail = (np.abs(psi) ** 2 / n2) * float(np.vdot(lam_c, psi).real)
    return -lead + gamma * tail
