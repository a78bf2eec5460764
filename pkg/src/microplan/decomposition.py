"""Stage partitioning and the dual-communicating forward sweep.

The horizon is split into contiguous stage windows.  A sweep solves the
stages in order: each stage starts from the previous stage's terminal
state, and prices its own terminal state with the boundary duals the
downstream stage produced in the previous iteration (the last stage is
never priced).  Build decisions belong to the first stage; later stages
receive them as pinned boundary data.  One sweep with zero prices is
the receding-horizon baseline; repeated sweeps refine the prices.

The same machinery run on the relaxed stage problems is a Gauss-Seidel
pass over the continuous monolith; its progress is measured by the KKT
residual of the merged primal-dual point on the seam-joined model.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .convex import Settings, get_duals, solve_qcqp
from .formulation import (
    MdopModel, OperatingPlan, assemble, build_seamed, coupling_slots,
    extract_plan, horizon_start_boundary, plan_costs, relax_integrality,
)
from .mip import solve_fixed_then_duals, solve_miqcqp

log = logging.getLogger(__name__)

SEAM_TOL = 1e-8
BINARY_SLOT_KINDS = ("x", "y", "w", "z_b", "z_d")


class DecompositionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# stage layout and boundary data


@dataclass(frozen=True)
class StagePlan:
    """Contiguous stage windows covering [0, T)."""
    stage_count: int
    steps_per_stage: int
    windows: tuple   # ((start, end), ...)

    @property
    def horizon(self):
        return self.windows[-1][1]


def partition(horizon: int, stages: int) -> StagePlan:
    """Split [0, horizon) into `stages` windows of ceil(horizon/stages)
    steps each, the last one shorter when the division is uneven.

    When the rounding exhausts the horizon early (say 10 steps over 6
    stages: five windows of 2), the trailing empty windows are dropped
    and the plan carries the achievable stage count.
    """
    if stages < 1:
        raise DecompositionError("stage count must be >= 1")
    if stages > horizon:
        raise DecompositionError(
            f"cannot cut {horizon} steps into {stages} stages")
    k = math.ceil(horizon / stages)
    windows = []
    start = 0
    while start < horizon:
        windows.append((start, min(start + k, horizon)))
        start += k
    if len(windows) != stages:
        log.warning("stage count reduced from %d to %d by rounding",
                    stages, len(windows))
    return StagePlan(stage_count=len(windows), steps_per_stage=k,
                     windows=tuple(windows))


@dataclass(frozen=True)
class BoundaryState:
    """State handed across a stage boundary, aligned with the coupling
    slot layout: battery charge, commitment, delivered power, start and
    stop history, and the build decisions."""
    values: np.ndarray
    slots: tuple

    def value(self, kind, owner, hist=0):
        for k, slot in enumerate(self.slots):
            if (slot.kind, slot.owner, slot.hist) == (kind, owner, hist):
                return float(self.values[k])
        raise KeyError((kind, owner, hist))

    @classmethod
    def horizon_start(cls, instance):
        return cls(values=horizon_start_boundary(instance),
                   slots=coupling_slots(instance))

    @classmethod
    def from_terminal(cls, model: MdopModel, x, snap=True):
        vals = np.array([float(x[j]) for j in model.coupling.terminal_cols])
        if snap:
            # binary state picked off an optimal point carries solver
            # noise; hand exact integers downstream
            for k, slot in enumerate(model.coupling.slots):
                if slot.kind in BINARY_SLOT_KINDS \
                        and abs(vals[k] - round(vals[k])) <= 1e-6:
                    vals[k] = float(round(vals[k]))
        return cls(values=vals, slots=model.coupling.slots)


@dataclass(frozen=True)
class DualVector:
    """Marginal system cost of boundary state delivered to a stage: the
    price a predecessor should see on its terminal variables."""
    values: np.ndarray
    slots: tuple

    def __post_init__(self):
        if len(self.values) != len(self.slots):
            raise DecompositionError("price vector does not match slot layout")
        if not np.all(np.isfinite(self.values)):
            raise DecompositionError("boundary prices must be finite")

    @classmethod
    def zero(cls, instance):
        slots = coupling_slots(instance)
        return cls(values=np.zeros(len(slots)), slots=slots)


# ---------------------------------------------------------------------------
# stitched plans


@dataclass
class StageStat:
    sweep: int
    stage: int
    status: str
    objective: float    # stage objective, cost-to-go term included
    nodes: int
    gap: float
    solve_time: float

    def key(self):
        """Reproducible fields only; wall time excluded."""
        return (self.sweep, self.stage, self.status, self.objective,
                self.nodes, self.gap)


@dataclass
class PlanSolution:
    """A full-horizon operating plan with its cost accounting.

    The objective is recomputed from the trajectories alone, so
    cost-to-go pricing never leaks into reported totals."""
    plan: OperatingPlan
    builds: dict
    objective: float
    stage_costs: list            # (build, generation, shed) per stage
    lower_bound: float
    gap_percent: float
    stage_stats: list
    sweep_objectives: list
    stage_plan: StagePlan

    def equals(self, other) -> bool:
        """Exact equality of every reproducible field."""
        if set(self.plan.series) != set(other.plan.series):
            return False
        if any(not np.array_equal(self.plan.series[k], other.plan.series[k])
               for k in self.plan.series):
            return False
        return (self.builds == other.builds
                and self.objective == other.objective
                and self.stage_costs == other.stage_costs
                and self.lower_bound == other.lower_bound
                and self.gap_percent == other.gap_percent
                and self.sweep_objectives == other.sweep_objectives
                and [s.key() for s in self.stage_stats]
                == [s.key() for s in other.stage_stats])


def relative_gap(ub: float, lb: float) -> float:
    """Optimality gap in percent."""
    return 100.0 * (ub - lb) / max(abs(lb), 1e-9)


def stitch(instance, loads, plan: StagePlan, stage_models, stage_xs,
           lower_bound=np.nan):
    """Concatenate per-stage trajectories into one full-horizon plan.

    Seam handoffs are re-verified: every stage's imported state must
    equal its predecessor's terminal state to SEAM_TOL.  Costs are
    recomputed from the trajectories; the build cost appears exactly
    once, in the first stage's bucket.
    """
    plans = [extract_plan(m, x) for m, x in zip(stage_models, stage_xs)]
    slots = coupling_slots(instance)
    for s in range(1, len(stage_models)):
        prev_m, prev_x = stage_models[s - 1], stage_xs[s - 1]
        cur_m, cur_x = stage_models[s], stage_xs[s]
        for k, slot in enumerate(slots):
            out = prev_x[prev_m.coupling.terminal_cols[k]]
            pin = cur_m.coupling.init_pin_rows[k]
            got = sum(c * cur_x[j]
                      for j, c in cur_m.row_coefs[pin].items())
            if abs(got - out) > SEAM_TOL * (1.0 + abs(out)):
                raise DecompositionError(
                    f"seam {s} breaks on {slot.kind}/{slot.owner}: "
                    f"{got!r} != {out!r}")

    horizon = plan.horizon
    series = {}
    for p in plans:
        for key, arr in p.series.items():
            dst = series.get(key)
            if dst is None:
                dst = np.zeros(horizon)
                series[key] = dst
            dst[p.start:p.start + p.horizon] = arr
    merged = OperatingPlan(start=0, horizon=horizon, dt=loads.dt,
                           builds=dict(plans[0].builds), series=series)

    costs = plan_costs(instance, merged)
    stage_costs = []
    for s, (a, b) in enumerate(plan.windows):
        stage_costs.append((
            costs.build if s == 0 else 0.0,
            float(costs.generation[a:b].sum()),
            float(costs.shed[a:b].sum()),
        ))
    total = costs.total
    return PlanSolution(
        plan=merged,
        builds=merged.builds,
        objective=total,
        stage_costs=stage_costs,
        lower_bound=float(lower_bound),
        gap_percent=relative_gap(total, lower_bound)
        if np.isfinite(lower_bound) else np.nan,
        stage_stats=[],
        sweep_objectives=[],
        stage_plan=plan,
    )


# ---------------------------------------------------------------------------
# shared sweep machinery


def _warn_short_windows(instance, plan):
    depth = max((d.history_depth for d in instance.generator_specs),
                default=0)
    shortest = min(b - a for a, b in plan.windows)
    if shortest < depth:
        log.warning("shortest stage window (%d steps) is below the longest "
                    "commitment history (%d); seams will carry partial "
                    "history", shortest, depth)


def _relaxed_monolith(instance, loads, plan, settings, cut_tol):
    """Seam-joined continuous relaxation: the lower bound, and the seam
    duals that seed the boundary prices."""
    seamed = build_seamed(instance, loads, plan.windows)
    relaxed = relax_integrality(seamed.model)
    sol = solve_qcqp(relaxed.to_convex(), cut_tol=cut_tol, settings=settings)
    if sol.status != "optimal":
        raise DecompositionError(
            f"monolithic relaxation ended {sol.status} ({sol.detail})")
    return seamed, sol


def init_duals(instance, loads, plan: StagePlan,
               settings: Settings = Settings(), cut_tol: float = 1e-7):
    """Boundary prices seeded from the relaxed monolith.

    The dual of a seam equality is the negative marginal cost of state
    arriving at that boundary; negating it prices the upstream terminal
    variables so the first sweep already sees downstream scarcity.
    Returns one DualVector per interior boundary (stage count minus 1).
    """
    seamed, sol = _relaxed_monolith(instance, loads, plan, settings, cut_tol)
    slots = coupling_slots(instance)
    return [DualVector(values=-get_duals(sol, list(rows)), slots=slots)
            for rows in seamed.seam_rows]


def _solve_stage_mip(model, gap_tol, node_limit, time_limit, settings,
                     cut_tol):
    res = solve_miqcqp(model, gap_tol=gap_tol, node_limit=node_limit,
                       time_limit=time_limit, settings=settings,
                       cut_tol=cut_tol)
    if res.binaries is None:
        raise DecompositionError(f"stage search ended {res.status}")
    fixed = solve_fixed_then_duals(model, res.binaries, settings=settings,
                                   cut_tol=cut_tol)
    return res, fixed


def mpc_solve(instance, loads, plan: StagePlan, iterations: int = 3,
              mode: str = "dual-init", gap_tol: float = 1e-4,
              node_limit: int = 100_000, time_limit: float = 600.0,
              settings: Settings = Settings(),
              cut_tol: float = 1e-7) -> PlanSolution:
    """Iterated forward sweeps with boundary-price feedback.

    Each sweep solves the stages in order; stage s is pinned to stage
    s-1's terminal state from this sweep and priced with the boundary
    duals stage s+1 produced in the previous sweep.  `dual-init` seeds
    the first sweep's prices from the relaxed monolith; `zero-init`
    starts unpriced, which makes the first sweep the receding-horizon
    baseline.  The best stitched plan over all sweeps is returned; its
    bound comes from the relaxed monolith.
    """
    if iterations < 1:
        raise DecompositionError("iteration count must be >= 1")
    if mode not in ("dual-init", "zero-init"):
        raise DecompositionError(f"unknown mode {mode!r}")
    _warn_short_windows(instance, plan)
    s_count = plan.stage_count
    slots = coupling_slots(instance)

    seamed, relaxed_sol = _relaxed_monolith(instance, loads, plan, settings,
                                            cut_tol)
    lower_bound = relaxed_sol.objective
    if mode == "dual-init" and s_count > 1:
        prices = [DualVector(values=-get_duals(relaxed_sol, list(rows)),
                             slots=slots)
                  for rows in seamed.seam_rows]
    else:
        prices = [DualVector.zero(instance) for _ in range(s_count - 1)]

    best = None
    stats = []
    sweep_objectives = []
    for sweep in range(1, iterations + 1):
        stage_models = []
        stage_xs = []
        new_prices = []
        boundary = BoundaryState.horizon_start(instance)
        for s, window in enumerate(plan.windows):
            duals_in = prices[s].values if s < s_count - 1 else None
            try:
                model = assemble(instance, loads, window=window,
                                 boundary=boundary.values,
                                 duals_in=duals_in, own_builds=(s == 0))
                res, fixed = _solve_stage_mip(model, gap_tol, node_limit,
                                              time_limit, settings, cut_tol)
            except Exception as exc:
                raise DecompositionError(
                    f"sweep {sweep}, stage {s}: {exc}") from exc
            stats.append(StageStat(sweep=sweep, stage=s, status=res.status,
                                   objective=res.objective, nodes=res.nodes,
                                   gap=res.gap, solve_time=res.solve_time))
            stage_models.append(model)
            stage_xs.append(fixed.x)
            if s > 0:
                pins = list(model.coupling.init_pin_rows)
                new_prices.append(DualVector(values=-get_duals(fixed, pins),
                                             slots=slots))
            boundary = BoundaryState.from_terminal(model, fixed.x)
        # the price consumed by stage s next sweep is the one stage s+1
        # just produced
        prices = new_prices

        stitched = stitch(instance, loads, plan, stage_models, stage_xs,
                          lower_bound=lower_bound)
        sweep_objectives.append(stitched.objective)
        if best is None or stitched.objective < best.objective:
            best = stitched

    best.stage_stats = stats
    best.sweep_objectives = sweep_objectives
    best.gap_percent = relative_gap(best.objective, lower_bound)
    return best


def rh_solve(instance, loads, plan: StagePlan, gap_tol: float = 1e-4,
             node_limit: int = 100_000, time_limit: float = 600.0,
             settings: Settings = Settings(),
             cut_tol: float = 1e-7) -> PlanSolution:
    """One forward sweep with zero boundary prices."""
    return mpc_solve(instance, loads, plan, iterations=1, mode="zero-init",
                     gap_tol=gap_tol, node_limit=node_limit,
                     time_limit=time_limit, settings=settings,
                     cut_tol=cut_tol)


# ---------------------------------------------------------------------------
# relaxed sweeps as a convex decomposition


@dataclass
class RelaxedSweepResult:
    """Merged primal-dual point on the seam-joined relaxation, with the
    sweep-by-sweep system residual history."""
    x: np.ndarray
    y_rows: np.ndarray
    y_bounds: np.ndarray
    cone_duals: np.ndarray
    objective: float
    residuals: list
    sweeps: int
    converged: bool


def _system_residual(prog, x, y_rows, y_bounds, cone_duals):
    """Worst KKT violation of the merged point: stationarity with the
    cone normals folded in, row ranges, bounds, and the balls."""
    stat = prog.p_diag * x + prog.q + y_bounds
    if prog.m:
        stat += prog.a.T @ y_rows
    worst = 0.0
    for k, cone in enumerate(prog.cones):
        cols = list(cone.cols)
        v = x[cols]
        norm = float(np.linalg.norm(v))
        radius = cone.radius if cone.radius_col is None else x[cone.radius_col]
        worst = max(worst, norm - radius)
        if cone_duals[k] != 0.0 and norm > 1e-12:
            stat[cols] += cone_duals[k] * (v / norm)
            if cone.radius_col is not None:
                stat[cone.radius_col] -= cone_duals[k]
    worst = max(worst, float(np.abs(stat).max(initial=0.0)))
    if prog.m:
        ax = prog.a @ x
        worst = max(worst, float((prog.l - ax).max(initial=0.0)),
                    float((ax - prog.u).max(initial=0.0)))
    worst = max(worst, float((prog.lb - x).max(initial=0.0)),
                float((x - prog.ub).max(initial=0.0)))
    return worst


def gauss_seidel_relaxed(instance, loads, plan: StagePlan,
                         max_sweeps: int = 200, tol: float = 1e-5,
                         settings: Settings = Settings(),
                         cut_tol: float = 1e-7) -> RelaxedSweepResult:
    """Forward sweeps over the relaxed stage problems until the merged
    point satisfies the monolithic KKT system to `tol`.

    Stage solves alternate with boundary-price updates exactly as in the
    mixed-integer sweep; with every piece convex the iteration is a
    block Gauss-Seidel pass over the monolith's optimality system, and
    the merged residual is the convergence measure.  A single stage
    satisfies the system in one sweep.  Divergence (the residual growing
    tenfold over five sweeps) raises DecompositionError.
    """
    _warn_short_windows(instance, plan)
    s_count = plan.stage_count
    slots = coupling_slots(instance)
    seamed = build_seamed(instance, loads, plan.windows)
    merged_model = relax_integrality(seamed.model)
    merged_prog = merged_model.to_convex()

    # the merged row layout is the first window's rows (boundary pins
    # included), later windows' rows without their pins, then the seams
    probes = [assemble(instance, loads, window=w, own_builds=(s == 0))
              for s, w in enumerate(plan.windows)]
    n_rows = []
    for s, m in enumerate(probes):
        pins = sum(p is not None for p in m.coupling.init_pin_rows)
        n_rows.append(len(m.row_coefs) - (0 if s == 0 else pins))
    col_off = np.concatenate([[0], np.cumsum([m.n for m in probes])])
    row_off = np.concatenate([[0], np.cumsum(n_rows)])
    cone_off = np.concatenate([[0], np.cumsum([len(m.cones)
                                               for m in probes])])

    prices = [DualVector.zero(instance) for _ in range(max(s_count - 1, 0))]
    warm = [None] * s_count
    pools = [[] for _ in range(s_count)]

    residuals = []
    result = None
    for sweep in range(1, max_sweeps + 1):
        boundary = BoundaryState.horizon_start(instance)
        stage_sols = []
        new_prices = []
        for s, window in enumerate(plan.windows):
            duals_in = prices[s].values if s < s_count - 1 else None
            model = relax_integrality(
                assemble(instance, loads, window=window,
                         boundary=boundary.values, duals_in=duals_in,
                         own_builds=(s == 0)))
            sol = solve_qcqp(model.to_convex(), cut_tol=cut_tol,
                             settings=settings, warm_start=warm[s],
                             cuts=pools[s])
            if sol.status != "optimal":
                raise DecompositionError(
                    f"sweep {sweep}, stage {s}: relaxed solve ended "
                    f"{sol.status} ({sol.detail})")
            warm[s] = sol.warm
            stage_sols.append((model, sol))
            if s > 0:
                pins = list(model.coupling.init_pin_rows)
                new_prices.append(DualVector(values=-get_duals(sol, pins),
                                             slots=slots))
            boundary = BoundaryState.from_terminal(model, sol.x, snap=False)
        prices = new_prices

        x = np.zeros(merged_prog.n)
        y_rows = np.zeros(merged_prog.m)
        y_bounds = np.zeros(merged_prog.n)
        cone_duals = np.zeros(len(merged_prog.cones))
        for s, (model, sol) in enumerate(stage_sols):
            a, b = col_off[s], col_off[s + 1]
            x[a:b] = sol.x
            y_bounds[a:b] = sol.y_bounds
            y_rows[row_off[s]:row_off[s + 1]] = sol.y_rows[:n_rows[s]]
            cone_duals[cone_off[s]:cone_off[s + 1]] = sol.cone_duals
            if s > 0:
                # a stage's boundary pins are the monolith's seam rows;
                # their fresh duals make the upstream terminal residual
                # the price-update mismatch
                for k, pin in enumerate(model.coupling.init_pin_rows):
                    y_rows[seamed.seam_rows[s - 1][k]] = sol.y_rows[pin]
        res = _system_residual(merged_prog, x, y_rows, y_bounds, cone_duals)
        residuals.append(res)
        result = RelaxedSweepResult(
            x=x, y_rows=y_rows, y_bounds=y_bounds, cone_duals=cone_duals,
            objective=merged_model.objective_value(x), residuals=residuals,
            sweeps=sweep, converged=res <= tol)
        if res <= tol:
            return result
        if len(residuals) >= 6 \
                and residuals[-1] > 10.0 * min(residuals[-6:-1]):
            raise DecompositionError(
                f"sweep residual diverging: {residuals[-6:]}")
    return result
