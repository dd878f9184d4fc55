"""Levenberg-Marquardt over traced sparse problems.

Each step linearises the residuals (trace -> block Jacobian), forms
``A = J^T J`` from cached SpGEMM tables, clamps and damps its diagonal,
solves ``A d = -J^T r`` and retracts every parameter group. Steps that do
not lower the cost are rolled back and the damping grows.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import lie
from . import linsolve
from . import sparse
from . import trace as tr
from .errors import InvalidArgumentError, NotSPDError, NumericalBreakdownError

log = logging.getLogger(__name__)

SOLVERS = ("cholesky", "pcg")


@dataclass(frozen=True)
class LmConfig:
    initial_damping: float = 1e-6
    damping_min: float = 1e-16
    damping_max: float = 1e16
    damping_up: float = 2.0
    damping_down: float = 0.5
    diag_min: float = 1e-6
    diag_max: float = 1e32
    max_iterations: int = 10
    patience: int = 3
    plateau_tol: float = 1e-6
    solver: str = "cholesky"
    pcg_tol: float = linsolve.PCG_TOL
    pcg_max_iters: int | None = None
    ordering: str = "amd"
    use_cache: bool = True

    def __post_init__(self):
        if not self.damping_min <= self.initial_damping <= self.damping_max:
            raise InvalidArgumentError("initial damping outside [damping_min, damping_max]")
        if not (self.damping_up > 0 and self.damping_down > 0):
            raise InvalidArgumentError("damping factors must be positive")
        if self.patience < 1:
            raise InvalidArgumentError("patience must be at least 1")
        if self.solver not in SOLVERS:
            raise InvalidArgumentError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.diag_min > self.diag_max:
            raise InvalidArgumentError("diag_min exceeds diag_max")


class NormalEquations:
    """Builds the damped normal system, caching every pattern-only artifact.

    Cached: transpose plans of each Jacobian block, the four (or one) SpGEMM
    tables, the BSR-grid -> CSR scatter and the symbolic Cholesky analysis.
    """

    def __init__(self):
        self.transposes = {}
        self.products = {}
        self.assembly = None
        self.symbolic = None

    def _transpose(self, name, j):
        plan = self.transposes.get(name)
        if plan is None:
            plan = self.transposes[name] = sparse.transpose_plan(j)
        return plan.apply(j)

    def build(self, blocks, r):
        """Undamped ``{(g, h): J_g^T J_h}`` and gradient ``J^T r``."""
        names = list(blocks)
        jt = {g: self._transpose(g, blocks[g]) for g in names}
        grid = {}
        for a, g in enumerate(names):
            for b, h in enumerate(names):
                table = self.products.get((g, h))
                if table is None:
                    table = self.products[(g, h)] = sparse.spgemm_symbolic(jt[g], blocks[h])
                grid[(a, b)] = sparse.spgemm_numeric(table, jt[g], blocks[h])
        grad = np.concatenate([sparse.spmv(jt[g], r) for g in names])
        return grid, grad

    def damped_csr(self, grid, damping, config):
        grid = dict(grid)
        for key in grid:
            if key[0] == key[1]:
                m = sparse.diag_clamp(grid[key], config.diag_min, config.diag_max)
                grid[key] = sparse.diag_scale_add(m, damping)
        if self.assembly is None:
            sizes = [grid[(a, a)].shape[0] for a in range(int(np.sqrt(len(grid))))]
            self.assembly = sparse.CsrAssembly(grid, sizes, sizes)
        return self.assembly.fill(grid)

    def solve(self, a, rhs, config, block_sizes):
        if config.solver == "cholesky":
            if self.symbolic is None:
                self.symbolic = linsolve.cholesky_symbolic(a, config.ordering, block_sizes)
            return linsolve.cholesky_solve(self.symbolic, a, rhs)
        max_iters = config.pcg_max_iters or max(250, 2 * len(block_sizes))
        return linsolve.pcg_solve(a, rhs, linsolve.jacobi_preconditioner(a),
                                  tol=config.pcg_tol, max_iters=max_iters)


@dataclass
class Linearization:
    residuals: np.ndarray
    cost: float
    grid: dict
    grad: np.ndarray


@dataclass
class LmState:
    params: dict
    damping: float
    cost: float
    costs: list = field(default_factory=list)
    iteration: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0
    normal: NormalEquations = field(default_factory=NormalEquations)
    linearization: Linearization | None = None
    last_step_norm: float = np.inf
    failed: bool = False


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    cost: float
    mse: float
    damping: float
    accepted: bool
    time: float


@dataclass
class LmReport:
    final_cost: float
    final_mse: float
    iterations: int
    trajectory: list
    termination: str
    params: dict


def _cost(r):
    r = np.asarray(r).ravel()
    return float(r @ r)


def residual_cost(problem, params):
    ev = tr.evaluate(problem.model, {g: params[g.name] for g in problem.groups})
    return _cost(ev.residuals)


def _block_sizes(problem):
    sizes = []
    for g in problem.groups:
        sizes.extend([g.tangent_dim] * g.num_free)
    return sizes


def linearize(problem, params, normal):
    ev = tr.evaluate(problem.model, {g: params[g.name] for g in problem.groups})
    jac = tr.sparse_jacobian(ev.graph, ev.output)
    blocks = {}
    for g in problem.groups:
        j = jac.by_group[g.name]
        if j is None:
            raise InvalidArgumentError(f"residuals do not depend on group {g.name!r}")
        blocks[g.name] = j
    r = ev.residuals.ravel()
    grid, grad = normal.build(blocks, r)
    return Linearization(ev.residuals, _cost(r), grid, grad)


def apply_update(problem, params, delta):
    """Retract every free entity by its slice of ``delta``."""
    out = {}
    offset = 0
    for g in problem.groups:
        free = g.column_map() >= 0
        size = g.num_free * g.tangent_dim
        step = delta[offset:offset + size].reshape(g.num_free, g.tangent_dim)
        offset += size
        values = params[g.name].copy()
        if g.kind == tr.POSE:
            values[free] = lie.retract(values[free], step)
        else:
            values[free] = values[free] + step
        out[g.name] = values
    return out


def init_state(problem, params=None, config=LmConfig()):
    params = {k: np.array(v, dtype=np.float64) for k, v in (params or problem.initial).items()}
    cost = residual_cost(problem, params)
    return LmState(params=params, damping=config.initial_damping, cost=cost, costs=[cost])


def lm_step(problem, state, config=LmConfig()):
    """One damped Gauss-Newton attempt; returns ``(state, accepted)``.

    A rejected step restores nothing because parameters are only replaced on
    acceptance; it raises the damping and keeps the linearisation for the
    retry.
    """
    if not config.use_cache:
        state.normal = NormalEquations()
        state.linearization = None
    lin = state.linearization
    if lin is None:
        lin = state.linearization = linearize(problem, state.params, state.normal)
    state.iteration += 1
    a = state.normal.damped_csr(lin.grid, state.damping, config)
    try:
        delta, stats = state.normal.solve(a, -lin.grad, config, _block_sizes(problem))
        if not np.all(np.isfinite(delta)):
            raise NumericalBreakdownError("non-finite update")
    except (NotSPDError, NumericalBreakdownError) as exc:
        log.debug("solver failed at damping %.3g: %s", state.damping, exc)
        return _reject(state, config), False
    state.last_step_norm = float(np.linalg.norm(delta))
    candidate = apply_update(problem, state.params, delta)
    # Cheirality errors propagate: callers pre-filter observations.
    new_cost = residual_cost(problem, candidate)
    if new_cost < lin.cost:
        state.params = candidate
        state.cost = new_cost
        state.costs.append(new_cost)
        state.accepted_steps += 1
        state.damping = max(state.damping * config.damping_down, config.damping_min)
        state.linearization = None
        return state, True
    return _reject(state, config), False


def _reject(state, config):
    state.rejected_steps += 1
    if state.damping >= config.damping_max:
        state.failed = True
    state.damping = min(state.damping * config.damping_up, config.damping_max)
    return state


def stop_on_plateau(history, config=LmConfig(), accepted=None):
    """Whether to stop given the cost history (initial cost first).

    Stops after ``max_iterations`` steps, or once the last ``patience``
    accepted steps each improved the cost by less than ``plateau_tol``
    relative. ``accepted`` flags each step; all are assumed accepted if
    omitted.
    """
    history = list(history)
    if not history:
        raise InvalidArgumentError("history must not be empty")
    return len(history) - 1 >= config.max_iterations or _plateaued(history, config, accepted)


def _plateaued(history, config, accepted):
    steps = zip(history[:-1], history[1:])
    if accepted is not None:
        steps = [s for s, ok in zip(steps, accepted) if ok]
    gains = [(prev - cur) / prev if prev > 0 else 0.0 for prev, cur in steps]
    if len(gains) < config.patience:
        return False
    return all(g < config.plateau_tol for g in gains[-config.patience:])


def optimize(problem, params=None, config=LmConfig(), callback=None):
    """Run LM until plateau, iteration budget or solver failure."""
    start = time.perf_counter()
    state = init_state(problem, params, config)
    nres = max(problem.num_residuals, 1)
    trajectory = [IterationRecord(0, state.cost, state.cost / nres, state.damping, True, 0.0)]
    if callback:
        callback(trajectory[-1])
    history, flags = [state.cost], []
    reason = "max_iters"
    while True:
        if len(history) - 1 >= config.max_iterations:
            reason = "max_iters"
            break
        state, ok = lm_step(problem, state, config)
        history.append(state.cost)
        flags.append(ok)
        rec = IterationRecord(state.iteration, state.cost, state.cost / nres, state.damping, ok,
                              time.perf_counter() - start)
        trajectory.append(rec)
        if callback:
            callback(rec)
        if state.failed:
            reason = "solver_failure"
            break
        if state.cost == 0.0 or (not ok and state.last_step_norm == 0.0):
            reason = "plateau"
            break
        if _plateaued(history, config, flags):
            reason = "plateau"
            break
    log.info("LM stopped after %d iterations (%s), cost %.6g", state.iteration, reason, state.cost)
    return LmReport(state.cost, state.cost / nres, state.iteration, trajectory, reason, state.params)
