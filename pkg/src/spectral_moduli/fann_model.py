"""Three-layer model with a steady-state core, and a dense baseline.

The model maps a complex input vector to a scalar through three layers:

* input layer: ``psi0 = sigma1(a1.T @ x + b1)``, renormalized to the unit
  sphere (the core's phase space; a zero pre-normalization state is an
  error);
* core: the steady state ``psi_inf`` of the dissipative flow on the current
  weighted graph, reached from ``psi0`` with the frozen potential
  ``|psi0|^2``;
* output layer: ``y = sigma3(<a3, psi_inf> + b3)``.

The core's output carries an arbitrary global phase, so the output layer
needs a gauge policy.  The default ``"gauge_aligned"`` mode rotates
``psi_inf`` so the readout inner product is real nonnegative (equivalently,
feeds ``|<a3, psi_inf>|`` to ``sigma3``) and returns the real part -- the
right convention for real-valued targets.  The ``"raw"`` mode applies no
rotation and returns the complex value at whatever phase the solver stopped;
it is provided for completeness but its value is not a well-defined function
of the inputs, so gradients are restricted to the aligned mode.

Complex parameters are differentiated in the realified convention
``G = dL/d(Re p) + i * dL/d(Im p)``: the update ``p - lr * G`` is plain
gradient descent in the two real coordinates per complex entry, and
holomorphy of the activations is never relied on.  Training interleaves one
projected batch-SGD step on the dense parameters with one graph descent step
per epoch; a dense network of the same depth (``sigma2(w2 @ psi0 + b2)``
replacing the core) trains under the same policy for gap comparisons.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dynamics import NlseConfig, SteadyState, solve_steady_state
from .graph_core import GraphError, WeightedGraph, build_graph
from .moduli import (Batch, LossEvaluationError, ModuliPoint, OptimizerConfig,
                     SteadySolveEngine, descent_step)
from .sensitivity import (NonIsolatedSteadyStateError, potential_gradient,
                          realify)
from .topo_metric import betti_numbers

__all__ = [
    "ACTIVATIONS",
    "READOUT_MODES",
    "DegenerateInputError",
    "CoreConvergenceError",
    "ModelParams",
    "TrainConfig",
    "BaselineParams",
    "ParamGradients",
    "BaselineGradients",
    "EpochRecord",
    "BaselineEpochRecord",
    "GapReport",
    "ModelReadout",
    "input_state",
    "readout_value",
    "forward",
    "loss_sample",
    "param_gradients",
    "project_params",
    "random_params",
    "train",
    "baseline_forward",
    "baseline_loss_sample",
    "baseline_gradients",
    "project_baseline",
    "random_baseline",
    "baseline_train",
    "generalization_gap",
    "model_teacher_sampler",
    "prefetch_inputs",
    "fixed_set_sampler",
    "noisy_input_stream",
    "save_checkpoint",
    "load_checkpoint",
    "write_history_csv",
]

ACTIVATIONS = ("tanh", "identity")
READOUT_MODES = ("gauge_aligned", "raw")


class DegenerateInputError(ValueError):
    """The input layer produced the zero field; no unit state exists."""


class CoreConvergenceError(RuntimeError):
    """The steady-state solve under the readout did not converge."""


def _apply(name: str, z: np.ndarray):
    return np.tanh(z) if name == "tanh" else z


def _apply_prime(name: str, z: np.ndarray):
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(np.asarray(z))


def _as_complex_vector(a, name: str) -> np.ndarray:
    out = np.asarray(a, dtype=complex)
    if out.ndim != 1:
        raise ValueError(f"{name} must be a vector")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} must be finite")
    return out


def _check_activation(name: str, field: str) -> None:
    if name not in ACTIVATIONS:
        raise ValueError(f"{field} must be one of {ACTIVATIONS}, got {name!r}")


@dataclass(frozen=True)
class ModelParams:
    """Dense parameters around the steady-state core.

    ``a1`` has shape (inputs, vertices) and is applied as ``a1.T @ x`` so the
    pre-activation lives on the graph's vertex set.  ``readout_mode`` fixes
    the gauge policy of the output layer (see module docstring).
    """

    a1: np.ndarray
    b1: np.ndarray
    a3: np.ndarray
    b3: complex
    activation1: str = "tanh"
    activation3: str = "identity"
    readout_mode: str = "gauge_aligned"

    def __post_init__(self) -> None:
        a1 = np.asarray(self.a1, dtype=complex)
        if a1.ndim != 2:
            raise ValueError("a1 must be a matrix (inputs x vertices)")
        if not np.all(np.isfinite(a1)):
            raise ValueError("a1 must be finite")
        b1 = _as_complex_vector(self.b1, "b1")
        a3 = _as_complex_vector(self.a3, "a3")
        b3 = complex(self.b3)
        if not (np.isfinite(b3.real) and np.isfinite(b3.imag)):
            raise ValueError("b3 must be finite")
        if a1.shape[1] != b1.size or b1.size != a3.size:
            raise ValueError("a1 columns, b1, and a3 must share the vertex "
                             f"dimension; got {a1.shape[1]}, {b1.size}, "
                             f"{a3.size}")
        _check_activation(self.activation1, "activation1")
        _check_activation(self.activation3, "activation3")
        if self.readout_mode not in READOUT_MODES:
            raise ValueError(f"readout_mode must be one of {READOUT_MODES}")
        object.__setattr__(self, "a1", a1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "a3", a3)
        object.__setattr__(self, "b3", b3)

    @property
    def n_inputs(self) -> int:
        return self.a1.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.a1.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    """Training policy: epochs of projected SGD plus one graph step each.

    ``batch_size`` must agree with ``moduli_config.batch_size`` -- both
    phases of an epoch consume the same mini-batch.  The ``r_*`` radii bound
    parameter norms (Frobenius for matrices, L2 for vectors, modulus for
    scalars); updates are projected back into these balls, which also keeps
    tanh pre-activations away from the complex poles.
    """

    epochs: int
    batch_size: int
    lr_params: float
    moduli_config: OptimizerConfig
    seed: int = 0
    r_a1: float = 100.0
    r_b1: float = 100.0
    r_a3: float = 100.0
    r_b3: float = 100.0
    r_w2: float = 100.0
    r_b2: float = 100.0

    def __post_init__(self) -> None:
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ValueError("epochs must be a nonnegative integer")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError("batch_size must be a positive integer")
        if not (np.isfinite(self.lr_params) and self.lr_params > 0):
            raise ValueError("lr_params must be positive and finite")
        if not isinstance(self.moduli_config, OptimizerConfig):
            raise TypeError("moduli_config must be an OptimizerConfig")
        if self.batch_size != self.moduli_config.batch_size:
            raise ValueError("batch_size must match moduli_config.batch_size")
        for field in ("r_a1", "r_b1", "r_a3", "r_b3", "r_w2", "r_b2"):
            r = getattr(self, field)
            if not (np.isfinite(r) and r > 0):
                raise ValueError(f"{field} must be positive and finite")


@dataclass(frozen=True)
class BaselineParams:
    """Dense three-layer network: the core replaced by ``sigma2(w2 . + b2)``.

    The hidden width equals the vertex count so the input and output layers
    are shared with the model.  There is no gauge ambiguity without the
    core, so the readout is always the raw complex value.
    """

    a1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    a3: np.ndarray
    b3: complex
    activation1: str = "tanh"
    activation2: str = "tanh"
    activation3: str = "identity"

    def __post_init__(self) -> None:
        a1 = np.asarray(self.a1, dtype=complex)
        w2 = np.asarray(self.w2, dtype=complex)
        if a1.ndim != 2 or w2.ndim != 2:
            raise ValueError("a1 and w2 must be matrices")
        if not (np.all(np.isfinite(a1)) and np.all(np.isfinite(w2))):
            raise ValueError("a1 and w2 must be finite")
        b1 = _as_complex_vector(self.b1, "b1")
        b2 = _as_complex_vector(self.b2, "b2")
        a3 = _as_complex_vector(self.a3, "a3")
        b3 = complex(self.b3)
        if not (np.isfinite(b3.real) and np.isfinite(b3.imag)):
            raise ValueError("b3 must be finite")
        h = w2.shape[0]
        if w2.shape != (h, h) or b2.size != h or a3.size != h:
            raise ValueError("w2 must be square with b2 and a3 of matching "
                             "width")
        if a1.shape[1] != h or b1.size != h:
            raise ValueError("input layer width must match the hidden width")
        for field, name in ((self.activation1, "activation1"),
                            (self.activation2, "activation2"),
                            (self.activation3, "activation3")):
            _check_activation(field, name)
        object.__setattr__(self, "a1", a1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", b2)
        object.__setattr__(self, "a3", a3)
        object.__setattr__(self, "b3", b3)


@dataclass(frozen=True)
class ParamGradients:
    """Realified loss gradients for one sample (G = dL/dRe + i dL/dIm)."""

    a1: np.ndarray
    b1: np.ndarray
    a3: np.ndarray
    b3: complex


@dataclass(frozen=True)
class BaselineGradients:
    a1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    a3: np.ndarray
    b3: complex


# ---------------------------------------------------------------------------
# forward pass


def input_state(params, x) -> np.ndarray:
    """Unit-norm initial field produced by the input layer."""
    x = np.asarray(x, dtype=complex)
    if x.shape != (params.a1.shape[0],):
        raise ValueError(f"input must have shape ({params.a1.shape[0]},), "
                         f"got {x.shape}")
    pre = params.a1.T @ x + params.b1
    s = _apply(params.activation1, pre)
    if not np.all(np.isfinite(s)):
        raise DegenerateInputError("input layer produced a non-finite state "
                                   "(pre-activation at a tanh pole?)")
    nrm = float(np.linalg.norm(s))
    if nrm < 1e-12:
        raise DegenerateInputError("input layer produced the zero state")
    return s / nrm


def readout_value(params: ModelParams, psi: np.ndarray):
    """Output-layer value at a core state, under the params' gauge policy.

    Gauge-aligned: ``Re sigma3(|<a3, psi>| + b3)`` (a float, invariant under
    global phase rotation of ``psi``).  Raw: ``sigma3(<a3, psi> + b3)`` as a
    complex number at the phase given.
    """
    z = np.vdot(params.a3, psi)
    if params.readout_mode == "gauge_aligned":
        return float(np.real(_apply(params.activation3, abs(z) + params.b3)))
    return complex(_apply(params.activation3, z + params.b3))


def forward(params: ModelParams, point: ModuliPoint, x, config: NlseConfig,
            *, engine: SteadySolveEngine | None = None):
    """Full pass: input layer, steady-state core, output layer.

    Returns ``(y_hat, psi_inf)``.  Without an engine the core calls the
    steady-state solver directly with ``config`` (bit-identical to manual
    chaining); with one, the engine's config and caches govern the solve.
    """
    psi0 = input_state(params, x)
    g = point.graph
    if g.n != psi0.size:
        raise GraphError(f"model has {psi0.size} vertices but the graph has "
                         f"{g.n}")
    if engine is not None:
        st = engine.solve(g, psi0)
    else:
        st = solve_steady_state(g, psi0, config)
    if not st.converged:
        raise CoreConvergenceError(
            f"core did not reach a steady state (residual {st.residual:.3e} "
            f"at t={st.t_reached:.1f})")
    return readout_value(params, st.psi_inf), st.psi_inf


def loss_sample(params: ModelParams, point: ModuliPoint, x, y,
                config: NlseConfig, *,
                engine: SteadySolveEngine | None = None) -> float:
    """Squared modulus of the prediction error for one sample."""
    y_hat, _ = forward(params, point, x, config, engine=engine)
    return float(abs(y_hat - y) ** 2)


# ---------------------------------------------------------------------------
# gradients


def _readout_chain(params: ModelParams, psi: np.ndarray, y):
    """Backward pass through the output layer.

    Returns ``(g_a3, g_b3, g_psi)`` in the realified convention; ``g_psi``
    is the loss cotangent at the core output.
    """
    z = np.vdot(params.a3, psi)
    m = abs(z)
    u = m + params.b3
    f_prime = _apply_prime(params.activation3, u)
    y_hat = float(np.real(_apply(params.activation3, u)))
    g_u = 2.0 * (y_hat - float(np.real(y))) * np.conj(f_prime)
    g_b3 = complex(g_u)
    g_m = float(np.real(g_u))
    g_z = g_m * z / m if m > 0 else 0.0j
    g_a3 = np.conj(g_z) * psi
    g_psi = g_z * params.a3
    return g_a3, g_b3, g_psi


def _input_chain(activation1: str, x, g_state: np.ndarray, pre: np.ndarray,
                 state: np.ndarray, nrm: float):
    """Backward pass through normalization and the input layer.

    ``g_state`` is the loss gradient at the unit state; the normalization
    pullback removes its radial component before the dense layer.
    """
    psi0 = state / nrm
    rho = float(np.real(np.vdot(g_state, psi0)))
    g_s = (g_state - rho * psi0) / nrm
    g_pre = g_s * np.conj(_apply_prime(activation1, pre))
    g_b1 = g_pre
    g_a1 = np.outer(np.conj(np.asarray(x, dtype=complex)), g_pre)
    return g_a1, g_b1


def param_gradients(params: ModelParams, point: ModuliPoint, x, y,
                    config: NlseConfig, *,
                    engine: SteadySolveEngine | None = None) -> ParamGradients:
    """Loss gradients in (a1, b1, a3, b3) for one sample.

    The core is differentiated implicitly: the output-layer cotangent is
    priced into the frozen potential by one adjoint solve, and the potential
    channel ``|psi0|^2`` carries it back to the input layer.  Only the
    gauge-aligned mode is differentiable -- the raw value depends on the
    solver's arbitrary output phase.
    """
    if params.readout_mode != "gauge_aligned":
        raise ValueError("parameter gradients require the gauge_aligned "
                         "readout; the raw value has no well-defined phase")
    x = np.asarray(x, dtype=complex)
    if x.shape != (params.a1.shape[0],):
        raise ValueError(f"input must have shape ({params.a1.shape[0]},), "
                         f"got {x.shape}")
    pre = params.a1.T @ x + params.b1
    s = _apply(params.activation1, pre)
    if not np.all(np.isfinite(s)):
        raise DegenerateInputError("input layer produced a non-finite state "
                                   "(pre-activation at a tanh pole?)")
    nrm = float(np.linalg.norm(s))
    if nrm < 1e-12:
        raise DegenerateInputError("input layer produced the zero state")
    psi0 = s / nrm
    g = point.graph
    if g.n != psi0.size:
        raise GraphError(f"model has {psi0.size} vertices but the graph has "
                         f"{g.n}")
    if engine is not None:
        st = engine.solve(g, psi0)
        gamma = engine.config.gamma
    else:
        st = solve_steady_state(g, psi0, config)
        gamma = config.gamma
    if not st.converged:
        raise CoreConvergenceError(
            f"core did not reach a steady state (residual {st.residual:.3e} "
            f"at t={st.t_reached:.1f})")

    g_a3, g_b3, g_psi = _readout_chain(params, st.psi_inf, y)
    if np.any(g_psi != 0):
        dv = potential_gradient(g, psi0, st, realify(g_psi), gamma)
    else:
        dv = np.zeros(g.n)
    g_psi0 = 2.0 * dv * psi0
    g_a1, g_b1 = _input_chain(params.activation1, x, g_psi0, pre, s, nrm)
    return ParamGradients(g_a1, g_b1, g_a3, g_b3)


# ---------------------------------------------------------------------------
# projection and initialization


def _shrink(a: np.ndarray, bound: float) -> np.ndarray:
    """Scale into the closed norm ball; the bound holds exactly on return."""
    nrm = float(np.linalg.norm(a))
    if nrm <= bound:
        return a
    out = a * (bound / nrm)
    while float(np.linalg.norm(out)) > bound:
        out = out * (1.0 - 2.0 ** -52)
    return out


def _shrink_scalar(b: complex, bound: float) -> complex:
    return complex(_shrink(np.array([b], dtype=complex), bound)[0])


def project_params(params: ModelParams, config: TrainConfig) -> ModelParams:
    """Project every dense parameter into its configured norm ball."""
    return dataclasses.replace(
        params,
        a1=_shrink(params.a1, config.r_a1),
        b1=_shrink(params.b1, config.r_b1),
        a3=_shrink(params.a3, config.r_a3),
        b3=_shrink_scalar(params.b3, config.r_b3))


def project_baseline(params: BaselineParams,
                     config: TrainConfig) -> BaselineParams:
    return dataclasses.replace(
        params,
        a1=_shrink(params.a1, config.r_a1),
        b1=_shrink(params.b1, config.r_b1),
        w2=_shrink(params.w2, config.r_w2),
        b2=_shrink(params.b2, config.r_b2),
        a3=_shrink(params.a3, config.r_a3),
        b3=_shrink_scalar(params.b3, config.r_b3))


def _complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_params(n_inputs: int, n_vertices: int, seed: int, *,
                  scale: float = 0.5, activation1: str = "tanh",
                  activation3: str = "identity") -> ModelParams:
    """Seeded random initialization with O(1) pre-activations."""
    rng = np.random.default_rng(seed)
    return ModelParams(
        a1=scale * _complex_normal(rng, (n_inputs, n_vertices))
        / np.sqrt(n_inputs),
        b1=scale * _complex_normal(rng, n_vertices) / np.sqrt(n_vertices),
        a3=_complex_normal(rng, n_vertices) / np.sqrt(n_vertices),
        b3=scale * complex(*rng.standard_normal(2)) / 4.0,
        activation1=activation1, activation3=activation3)


def random_baseline(n_inputs: int, n_vertices: int, seed: int, *,
                    scale: float = 0.5, activation1: str = "tanh",
                    activation2: str = "tanh",
                    activation3: str = "identity") -> BaselineParams:
    rng = np.random.default_rng(seed)
    return BaselineParams(
        a1=scale * _complex_normal(rng, (n_inputs, n_vertices))
        / np.sqrt(n_inputs),
        b1=scale * _complex_normal(rng, n_vertices) / np.sqrt(n_vertices),
        w2=scale * _complex_normal(rng, (n_vertices, n_vertices))
        / np.sqrt(n_vertices),
        b2=scale * _complex_normal(rng, n_vertices) / np.sqrt(n_vertices),
        a3=_complex_normal(rng, n_vertices) / np.sqrt(n_vertices),
        b3=scale * complex(*rng.standard_normal(2)) / 4.0,
        activation1=activation1, activation2=activation2,
        activation3=activation3)


# ---------------------------------------------------------------------------
# training


class ModelReadout:
    """Adapter exposing the model's output layer to the graph optimizer.

    ``value`` is the gauge-aligned prediction and ``cotangent`` its
    derivative in the realified state coordinates, so the optimizer's
    ``2 (pred - y)`` scaling reproduces the loss gradient exactly.
    """

    def __init__(self, params: ModelParams):
        if params.readout_mode != "gauge_aligned":
            raise ValueError("graph descent requires the gauge_aligned "
                             "readout")
        self.params = params

    def value(self, psi: np.ndarray) -> float:
        return readout_value(self.params, psi)

    def cotangent(self, psi: np.ndarray) -> np.ndarray:
        p = self.params
        z = np.vdot(p.a3, psi)
        m = abs(z)
        d_m = float(np.real(_apply_prime(p.activation3, m + p.b3)))
        g_z = d_m * z / m if m > 0 else 0.0j
        return realify(g_z * p.a3)


@dataclass(frozen=True)
class EpochRecord:
    """One epoch of interleaved training.

    ``train_loss`` is the batch-mean data loss the graph step measured (at
    the fresh parameters, before the graph moved); ``test_loss`` is the
    heldout mean when a heldout set was supplied, else NaN.  Failures are
    logged strings; the epoch still completes.
    """

    epoch: int
    train_loss: float
    test_loss: float
    n_edges: int
    b0: int
    b1: int
    failures: tuple = ()


@dataclass(frozen=True)
class BaselineEpochRecord:
    epoch: int
    train_loss: float
    test_loss: float


def _zero_like_grads(params: ModelParams) -> list:
    return [np.zeros_like(params.a1), np.zeros_like(params.b1),
            np.zeros_like(params.a3), 0.0j]


def prefetch_inputs(params: ModelParams, point: ModuliPoint, xs,
                    engine: SteadySolveEngine) -> None:
    """Solve the core for many inputs in one vectorized batch.

    Subsequent per-sample forwards and gradients on the same engine hit the
    cache, which is far cheaper than integrating one state at a time.
    Degenerate inputs are skipped here and surface in the per-sample calls.
    """
    jobs = []
    for x in xs:
        try:
            jobs.append((point.graph, input_state(params, x)))
        except DegenerateInputError:
            continue
    if jobs:
        engine.solve_many(jobs)


def _mean_heldout_loss(loss_fn, heldout) -> tuple[float, list]:
    total, count, failures = 0.0, 0, []
    for k, (x, y) in enumerate(heldout):
        try:
            total += loss_fn(x, y)
            count += 1
        except (DegenerateInputError, CoreConvergenceError,
                LossEvaluationError, NonIsolatedSteadyStateError) as exc:
            failures.append(f"heldout sample {k}: {exc}")
    return (total / count if count else float("nan")), failures


def train(sampler, config: TrainConfig, params: ModelParams,
          point: ModuliPoint, *, heldout: Sequence | None = None,
          engine: SteadySolveEngine | None = None):
    """Interleaved training loop.

    Each epoch draws one mini-batch from ``sampler(batch_size)``, takes a
    projected batch-mean SGD step on the dense parameters, then one graph
    descent step with the updated output layer as readout.  Per-step
    failures are recorded on the epoch and training continues.  Returns
    ``(params, point, history)``; with ``epochs == 0`` the inputs pass
    through untouched.
    """
    if params.readout_mode != "gauge_aligned":
        raise ValueError("training requires the gauge_aligned readout")
    if engine is None:
        engine = SteadySolveEngine(config.moduli_config.steady)
    rng = np.random.default_rng(config.seed)
    history: list[EpochRecord] = []
    for epoch in range(config.epochs):
        pairs = [(np.asarray(x, dtype=complex), y)
                 for x, y in sampler(config.batch_size)]
        failures: list[str] = []

        prefetch_inputs(params, point, [x for x, _ in pairs], engine)
        sums = _zero_like_grads(params)
        used = 0
        for k, (x, y) in enumerate(pairs):
            try:
                gr = param_gradients(params, point, x, y,
                                     engine.config, engine=engine)
            except (DegenerateInputError, CoreConvergenceError,
                    LossEvaluationError, NonIsolatedSteadyStateError) as exc:
                failures.append(f"param gradient, sample {k}: {exc}")
                continue
            sums[0] += gr.a1
            sums[1] += gr.b1
            sums[2] += gr.a3
            sums[3] += gr.b3
            used += 1
        if used:
            lr = config.lr_params / used
            params = project_params(dataclasses.replace(
                params,
                a1=params.a1 - lr * sums[0],
                b1=params.b1 - lr * sums[1],
                a3=params.a3 - lr * sums[2],
                b3=params.b3 - lr * sums[3]), config)

        train_loss = float("nan")
        try:
            batch = Batch.from_pairs([(input_state(params, x), y)
                                      for x, y in pairs])
            point, events = descent_step(point, batch, config.moduli_config,
                                         epoch, readout=ModelReadout(params),
                                         engine=engine, rng=rng)
            train_loss = events.loss.data
        except (DegenerateInputError, LossEvaluationError,
                NonIsolatedSteadyStateError) as exc:
            failures.append(f"graph step: {exc}")

        test_loss = float("nan")
        if heldout is not None:
            prefetch_inputs(params, point, [x for x, _ in heldout], engine)
            test_loss, held_failures = _mean_heldout_loss(
                lambda x, y: loss_sample(params, point, x, y, engine.config,
                                         engine=engine), heldout)
            failures.extend(held_failures)

        b0, b1 = betti_numbers(point.graph)
        history.append(EpochRecord(epoch, train_loss, test_loss,
                                   point.graph.n_edges, b0, b1,
                                   tuple(failures)))
    return params, point, history


# ---------------------------------------------------------------------------
# dense baseline


def _baseline_stack(params: BaselineParams, x):
    x = np.asarray(x, dtype=complex)
    if x.shape != (params.a1.shape[0],):
        raise ValueError(f"input must have shape ({params.a1.shape[0]},), "
                         f"got {x.shape}")
    pre1 = params.a1.T @ x + params.b1
    s = _apply(params.activation1, pre1)
    if not np.all(np.isfinite(s)):
        raise DegenerateInputError("input layer produced a non-finite state "
                                   "(pre-activation at a tanh pole?)")
    nrm = float(np.linalg.norm(s))
    if nrm < 1e-12:
        raise DegenerateInputError("input layer produced the zero state")
    psi0 = s / nrm
    pre2 = params.w2 @ psi0 + params.b2
    h = _apply(params.activation2, pre2)
    v = np.vdot(params.a3, h) + params.b3
    y_hat = complex(_apply(params.activation3, v))
    return x, pre1, s, nrm, psi0, pre2, h, v, y_hat


def baseline_forward(params: BaselineParams, x):
    """Dense pass; returns ``(y_hat, hidden)`` with the raw complex value."""
    *_, pre2, h, v, y_hat = _baseline_stack(params, x)
    return y_hat, h


def baseline_loss_sample(params: BaselineParams, x, y) -> float:
    y_hat, _ = baseline_forward(params, x)
    return float(abs(y_hat - y) ** 2)


def baseline_gradients(params: BaselineParams, x, y) -> BaselineGradients:
    """Realified loss gradients through the dense stack for one sample."""
    x, pre1, s, nrm, psi0, pre2, h, v, y_hat = _baseline_stack(params, x)
    g_yhat = 2.0 * (y_hat - complex(y))
    g_v = np.conj(_apply_prime(params.activation3, v)) * g_yhat
    g_b3 = complex(g_v)
    g_a3 = np.conj(g_v) * h
    g_h = g_v * params.a3
    g_pre2 = np.conj(_apply_prime(params.activation2, pre2)) * g_h
    g_b2 = g_pre2
    g_w2 = np.outer(g_pre2, np.conj(psi0))
    g_psi0 = params.w2.conj().T @ g_pre2
    g_a1, g_b1 = _input_chain(params.activation1, x, g_psi0, pre1, s, nrm)
    return BaselineGradients(g_a1, g_b1, g_w2, g_b2, g_a3, g_b3)


def baseline_train(sampler, config: TrainConfig, params: BaselineParams, *,
                   heldout: Sequence | None = None):
    """Projected batch-SGD on the dense baseline, same policy as ``train``.

    Losses are recorded after each epoch's update on that epoch's batch.
    """
    history: list[BaselineEpochRecord] = []
    for epoch in range(config.epochs):
        pairs = [(np.asarray(x, dtype=complex), y)
                 for x, y in sampler(config.batch_size)]
        sums = [np.zeros_like(params.a1), np.zeros_like(params.b1),
                np.zeros_like(params.w2), np.zeros_like(params.b2),
                np.zeros_like(params.a3), 0.0j]
        used = 0
        for x, y in pairs:
            try:
                gr = baseline_gradients(params, x, y)
            except DegenerateInputError:
                continue
            for slot, val in enumerate((gr.a1, gr.b1, gr.w2, gr.b2, gr.a3,
                                        gr.b3)):
                sums[slot] += val
            used += 1
        if used:
            lr = config.lr_params / used
            params = project_baseline(dataclasses.replace(
                params,
                a1=params.a1 - lr * sums[0],
                b1=params.b1 - lr * sums[1],
                w2=params.w2 - lr * sums[2],
                b2=params.b2 - lr * sums[3],
                a3=params.a3 - lr * sums[4],
                b3=params.b3 - lr * sums[5]), config)
        losses = [baseline_loss_sample(params, x, y) for x, y in pairs]
        test_loss = float("nan")
        if heldout is not None:
            test_loss, _ = _mean_heldout_loss(
                lambda x, y: baseline_loss_sample(params, x, y), heldout)
        history.append(BaselineEpochRecord(
            epoch, float(np.mean(losses)), test_loss))
    return params, history


# ---------------------------------------------------------------------------
# generalization gap


@dataclass(frozen=True)
class GapReport:
    """Empirical train/heldout comparison for one model and sample size.

    ``noise_bound = 3 / sqrt(m)`` is the declared sampling-noise scale of
    the heldout estimate; a gap within it is indistinguishable from zero.
    """

    train_loss: float
    test_loss: float
    gap: float
    m: int
    noise_bound: float


def generalization_gap(loss_fn: Callable, train_pairs: Sequence,
                       heldout_pairs: Sequence) -> GapReport:
    """Mean loss on both sets and their difference (test minus train).

    The two sets must come from disjoint streams for the gap to measure
    generalization; that separation is the caller's responsibility.
    """
    if len(train_pairs) == 0 or len(heldout_pairs) == 0:
        raise ValueError("both sample sets must be nonempty")
    train_loss = float(np.mean([loss_fn(x, y) for x, y in train_pairs]))
    test_loss = float(np.mean([loss_fn(x, y) for x, y in heldout_pairs]))
    m = len(heldout_pairs)
    return GapReport(train_loss, test_loss, test_loss - train_loss, m,
                     3.0 / np.sqrt(m))


# ---------------------------------------------------------------------------
# data plumbing


def model_teacher_sampler(params: ModelParams, point: ModuliPoint,
                          config: NlseConfig, base_sampler, *,
                          engine: SteadySolveEngine | None = None):
    """Wrap an input stream, replacing targets with this model's outputs.

    The wrapped model acts as the data-generating teacher, so the task is
    realizable exactly by construction.
    """
    if engine is None:
        engine = SteadySolveEngine(config)

    def draw(batch_size: int):
        xs = [x for x, _ in base_sampler(batch_size)]
        prefetch_inputs(params, point, xs, engine)
        return [(x, forward(params, point, x, config, engine=engine)[0])
                for x in xs]

    return draw


def fixed_set_sampler(pairs: Sequence):
    """Cycle deterministically through a fixed training set."""
    pairs = [(np.asarray(x, dtype=complex), y) for x, y in pairs]
    if not pairs:
        raise ValueError("training set must be nonempty")
    state = {"next": 0}

    def draw(batch_size: int):
        out = []
        for _ in range(batch_size):
            out.append(pairs[state["next"]])
            state["next"] = (state["next"] + 1) % len(pairs)
        return out

    return draw


def noisy_input_stream(base_inputs: Sequence, noise_delta: float, seed: int):
    """Seeded stream of unit fields: random base input plus a bounded kick.

    Each draw picks one base input uniformly, adds a complex perturbation of
    norm at most ``noise_delta`` times a uniform draw, and renormalizes.
    Targets are placeholder zeros -- pair with ``model_teacher_sampler``.
    """
    base = [np.asarray(x, dtype=complex) for x in base_inputs]
    if not base:
        raise ValueError("need at least one base input")
    if noise_delta < 0:
        raise ValueError("noise_delta must be nonnegative")
    rng = np.random.default_rng(seed)
    n = base[0].size

    def draw(batch_size: int):
        out = []
        for _ in range(batch_size):
            x = base[int(rng.integers(len(base)))]
            if noise_delta > 0:
                kick = _complex_normal(rng, n)
                kick *= noise_delta * rng.uniform() / np.linalg.norm(kick)
                x = x + kick
                x = x / np.linalg.norm(x)
            out.append((x, 0.0))
        return out

    return draw


# ---------------------------------------------------------------------------
# serialization


def _encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=complex)
    return {"re": a.real.tolist(), "im": a.imag.tolist()}


def _decode_array(d: dict) -> np.ndarray:
    return np.asarray(d["re"], dtype=float) + 1j * np.asarray(d["im"],
                                                              dtype=float)


def save_checkpoint(path, params: ModelParams, point: ModuliPoint, *,
                    extra: dict | None = None) -> None:
    """Write the model and graph as deterministic, realified JSON."""
    g = point.graph
    payload = {
        "model": {
            "a1": _encode_array(params.a1),
            "b1": _encode_array(params.b1),
            "a3": _encode_array(params.a3),
            "b3": {"re": params.b3.real, "im": params.b3.imag},
            "activation1": params.activation1,
            "activation3": params.activation3,
            "readout_mode": params.readout_mode,
        },
        "graph": {
            "n": g.n,
            "edges": [[int(u), int(v), float(w)]
                      for (u, v), w in zip(g.edges, g.weights)],
        },
        "extra": extra if extra is not None else {},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ModelParams, ModuliPoint]:
    with open(path) as fh:
        payload = json.load(fh)
    m = payload["model"]
    params = ModelParams(
        a1=_decode_array(m["a1"]), b1=_decode_array(m["b1"]),
        a3=_decode_array(m["a3"]),
        b3=complex(m["b3"]["re"], m["b3"]["im"]),
        activation1=m["activation1"], activation3=m["activation3"],
        readout_mode=m["readout_mode"])
    gd = payload["graph"]
    graph = build_graph(gd["n"], [(u, v, w) for u, v, w in gd["edges"]])
    return params, ModuliPoint(graph)


def write_history_csv(path, history: Sequence[EpochRecord]) -> None:
    """Epoch records as CSV with shortest round-trip float formatting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "test_loss", "n_edges",
                         "b0", "b1"])
        for rec in history:
            writer.writerow([rec.epoch, repr(float(rec.train_loss)),
                             repr(float(rec.test_loss)), rec.n_edges,
                             rec.b0, rec.b1])
