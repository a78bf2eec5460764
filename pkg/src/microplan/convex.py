"""Convex QP/QCQP engine: operator splitting with active-set polish.

Solves programs of the form

    minimize    1/2 x' diag(P) x + q' x + const
    subject to  l  <= A x <= u        (linear rows)
                lb <=   x <= ub       (variable bounds)
                sum_j x[c_j]^2 <= r^2 (norm-ball rows; r a constant or a
                                       designated radius variable)

by an over-relaxed ADMM splitting with Ruiz equilibration, adaptive step
size, and an equality-constrained polish solve on the identified active
set so that duals come out at near-machine accuracy.  Norm-ball rows are
enforced by tangent cuts generated on demand.

Dual sign convention.  Multipliers y satisfy the stationarity condition

    diag(P) x + q + A' y_rows + y_bounds = 0,

i.e. the Lagrangian is f + y·(row value − attained bound).  For an
equality row ``a·x = b`` the reported dual is y itself; for a one-sided
``a·x >= b`` row the dual of the inequality in its natural sense is −y
(and is nonnegative at optimality); for ``a·x <= b`` it is +y.
:func:`get_duals` applies this mapping.  Variable-bound multipliers
follow the same rule: ``max(−y_bounds, 0)`` belongs to lower bounds and
``max(y_bounds, 0)`` to upper bounds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class EngineError(ValueError):
    """Malformed convex program or unusable solver input."""


@dataclass(frozen=True)
class ConeRow:
    """Norm-ball row: sum of squares of `cols` bounded by a squared radius.

    The radius is `radius` when `radius_col` is None, otherwise the value
    of variable `radius_col` (which the program must keep nonnegative via
    its bounds).
    """
    cols: tuple
    radius: float = 0.0
    radius_col: int | None = None


class ConvexProgram:
    """Immutable problem data with convexity checked at construction."""

    def __init__(self, p_diag, q, a, l, u, lb, ub, cones=(), const=0.0):
        self.p_diag = np.asarray(p_diag, dtype=float)
        self.q = np.asarray(q, dtype=float)
        self.n = self.q.shape[0]
        self.a = sp.csr_matrix(a) if a is not None else sp.csr_matrix((0, self.n))
        if self.a.shape[1] != self.n:
            raise EngineError(f"A has {self.a.shape[1]} columns, expected {self.n}")
        self.m = self.a.shape[0]
        self.l = np.asarray(l, dtype=float)
        self.u = np.asarray(u, dtype=float)
        self.lb = np.asarray(lb, dtype=float)
        self.ub = np.asarray(ub, dtype=float)
        self.cones = tuple(cones)
        self.const = float(const)

        if self.p_diag.shape != (self.n,):
            raise EngineError("p_diag shape mismatch")
        if self.p_diag.min(initial=0.0) < -1e-12:
            raise EngineError("quadratic objective has a negative diagonal entry")
        self.p_diag = np.maximum(self.p_diag, 0.0)
        if self.l.shape != (self.m,) or self.u.shape != (self.m,):
            raise EngineError("row bound shape mismatch")
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise EngineError("variable bound shape mismatch")
        if np.any(self.l > self.u + 1e-12):
            bad = int(np.argmax(self.l - self.u))
            raise EngineError(f"row {bad} has l > u")
        if np.any(self.lb > self.ub + 1e-12):
            bad = int(np.argmax(self.lb - self.ub))
            raise EngineError(f"variable {bad} has lb > ub")
        for k, cone in enumerate(self.cones):
            if not cone.cols:
                raise EngineError(f"cone {k} has no columns")
            cols = set(cone.cols)
            if len(cols) != len(cone.cols) or not cols <= set(range(self.n)):
                raise EngineError(f"cone {k} has invalid columns")
            if cone.radius_col is None:
                if cone.radius < 0:
                    raise EngineError(f"cone {k} has negative radius")
            elif cone.radius_col in cols or not 0 <= cone.radius_col < self.n:
                raise EngineError(f"cone {k} has invalid radius column")

    def objective(self, x):
        return 0.5 * float(x @ (self.p_diag * x)) + float(self.q @ x) + self.const

    def with_rows(self, extra_a, extra_l, extra_u):
        """New program with rows appended (cones carried over unchanged)."""
        a = sp.vstack([self.a, extra_a], format="csr") if extra_a.shape[0] else self.a
        return ConvexProgram(self.p_diag, self.q, a,
                             np.concatenate([self.l, extra_l]),
                             np.concatenate([self.u, extra_u]),
                             self.lb, self.ub, self.cones, self.const)


@dataclass(frozen=True)
class Settings:
    eps_abs: float = 1e-8
    eps_rel: float = 1e-6
    max_iter: int = 200_000
    rho: float = 0.1
    rho_eq_scale: float = 1e3
    rho_min: float = 1e-6
    rho_max: float = 1e6
    sigma: float = 1e-6
    alpha: float = 1.6
    check_interval: int = 25
    scaling_iters: int = 10
    adaptive_rho: bool = True
    adaptive_rho_tol: float = 5.0
    adaptive_rho_interval: int = 200
    adaptive_rho_max_updates: int = 6
    polish: bool = True
    polish_delta: float = 1e-6
    polish_loose_factor: float = 1e3
    polish_retry_gap: int = 250
    refine_steps: int = 3
    eps_pinf: float = 1e-7
    eps_dinf: float = 1e-7
    time_limit: float | None = None
    log_path: str | None = None


@dataclass
class PrimalDualSolution:
    status: str                 # optimal | infeasible | unbounded | iteration-limit
    x: np.ndarray
    y_rows: np.ndarray          # raw multipliers for caller rows (see module docstring)
    y_bounds: np.ndarray        # raw multipliers for variable bounds
    objective: float
    prim_res: float
    dual_res: float
    iterations: int
    solve_time: float
    cone_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    polished: bool = False
    detail: str = ""
    program: ConvexProgram | None = None
    warm: tuple | None = None   # (x, y over rows then bounds) for warm starts

    @property
    def lower_bound_duals(self):
        return np.maximum(-self.y_bounds, 0.0)

    @property
    def upper_bound_duals(self):
        return np.maximum(self.y_bounds, 0.0)


def get_duals(solution: PrimalDualSolution, rows) -> np.ndarray:
    """Duals of the requested rows under the documented sign convention.

    Equality rows report the raw multiplier; one-sided rows report the
    multiplier of the inequality in its stated sense (nonnegative at
    optimality); finite two-sided ranges report the raw multiplier.
    """
    if solution.status != "optimal":
        raise EngineError(f"duals requested from a {solution.status} solution")
    prog = solution.program
    out = np.empty(len(rows))
    for k, i in enumerate(rows):
        y = solution.y_rows[i]
        lo, hi = prog.l[i], prog.u[i]
        if lo == hi:
            out[k] = y
        elif np.isinf(hi):          # lower-bounded row, >= sense
            out[k] = -y
        else:                       # <= sense (or finite range)
            out[k] = y
    return out


def _meets(rp_vec, rd_vec, prim_ref, dual_ref, eps_abs, eps_rel):
    """Component-wise residual test."""
    return bool(np.all(np.abs(rp_vec) <= eps_abs + eps_rel * prim_ref)
                and np.all(np.abs(rd_vec) <= eps_abs + eps_rel * dual_ref))


class QpWorkspace:
    """Factorized ADMM workspace for one program structure.

    Row and variable bounds may be replaced between solves; the matrix,
    scaling, and KKT factorization are computed once and reused, which is
    what makes branch-and-bound bound updates cheap.
    """

    def __init__(self, prog: ConvexProgram, settings: Settings = Settings(),
                 rho0: float | None = None):
        self.prog = prog
        self.settings = settings
        n, m = prog.n, prog.m
        self.n = n
        self.mt = m + n                      # caller rows plus bound rows
        self.a_full = sp.vstack([prog.a, sp.eye(n, format="csr")], format="csc")
        self._scale()
        self.l = np.concatenate([prog.l, prog.lb])
        self.u = np.concatenate([prog.u, prog.ub])
        eq = np.isclose(self.l, self.u, rtol=0.0, atol=1e-12) \
            & np.isfinite(self.l) & np.isfinite(self.u)
        self.eq_rows = eq
        self.rho_scalar = settings.rho if rho0 is None else rho0
        self._rho_updated_at = 0
        self._build_rho()
        self._factorize()

    # -- setup ------------------------------------------------------------

    def _scale(self):
        """Modified Ruiz equilibration plus cost normalization."""
        st = self.settings
        n, mt = self.n, self.mt
        d = np.ones(n)
        e = np.ones(mt)
        c = 1.0
        p = self.prog.p_diag.copy()
        q = self.prog.q.copy()
        a = self.a_full.copy().astype(float)
        for _ in range(st.scaling_iters):
            a_abs = abs(a)
            col_a = np.asarray(a_abs.max(axis=0).todense()).ravel()
            row_a = np.asarray(a_abs.max(axis=1).todense()).ravel()
            col = np.maximum(np.abs(p), col_a)
            d_step = 1.0 / np.sqrt(np.where(col > 1e-12, col, 1.0))
            e_step = 1.0 / np.sqrt(np.where(row_a > 1e-12, row_a, 1.0))
            d *= d_step
            e *= e_step
            p = p * d_step * d_step
            q = q * d_step
            a = sp.diags(e_step) @ a @ sp.diags(d_step)
            # cost normalization keeps the objective and constraint scales
            # comparable, which matters with very large penalty terms
            norm_cost = max(float(np.mean(np.abs(p))), float(np.abs(q).max(initial=0.0)))
            c_step = 1.0 / max(norm_cost, 1e-12) if norm_cost > 1e-12 else 1.0
            c_step = min(max(c_step, 1e-12), 1e12)
            c *= c_step
            p *= c_step
            q *= c_step
        self.d, self.e, self.c = d, e, c
        self.ps, self.qs, self.As = p, q, sp.csc_matrix(a)

    def _build_rho(self):
        st = self.settings
        rho = np.full(self.mt, self.rho_scalar)
        rho[self.eq_rows] *= st.rho_eq_scale
        self.rho = np.clip(rho, st.rho_min, st.rho_max * st.rho_eq_scale)

    def _factorize(self):
        n = self.n
        kkt = sp.bmat([
            [sp.diags(self.ps + self.settings.sigma), self.As.T],
            [self.As, -sp.diags(1.0 / self.rho)],
        ], format="csc")
        self.lu = spla.splu(kkt)

    # -- bound updates ----------------------------------------------------

    def update_bounds(self, l=None, u=None, lb=None, ub=None):
        """Replace row/variable bounds without refactorizing."""
        m = self.prog.m
        if l is not None:
            self.l[:m] = l
        if u is not None:
            self.u[:m] = u
        if lb is not None:
            self.l[m:] = lb
        if ub is not None:
            self.u[m:] = ub
        if np.any(self.l > self.u + 1e-12):
            bad = int(np.argmax(self.l - self.u))
            raise EngineError(f"updated bounds cross at row {bad}")

    # -- main loop --------------------------------------------------------

    def solve(self, warm_start=None) -> PrimalDualSolution:
        st = self.settings
        n, mt = self.n, self.mt
        d, e, c = self.d, self.e, self.c
        ls = self.l * e
        us = self.u * e
        self._rho_updated_at = 0
        self._rho_updates = 0
        self._rho_interval = st.adaptive_rho_interval
        t0 = time.perf_counter()

        if warm_start is not None:
            wx, wy = warm_start
            x = np.asarray(wx) / d
            y = np.asarray(wy) * self.c / e if wy is not None else np.zeros(mt)
            z = np.clip(self.As @ x, ls, us)
        else:
            x = np.zeros(n)
            y = np.zeros(mt)
            z = np.clip(np.zeros(mt), ls, us)

        log_rows = []
        status = "iteration-limit"
        detail = ""
        it = 0
        tighten = 0
        eps_abs, eps_rel = st.eps_abs, st.eps_rel
        prim_res = dual_res = np.inf
        last_polish = -(10 ** 9)
        retry_gap = st.polish_retry_gap
        last_fail_score = None
        converged = None  # first iterate meeting the configured tolerances
        converged_at = 0

        # warm multipliers usually carry a nearly correct active set (a
        # previous cut round's or neighboring node's polished duals); one
        # resolve often settles the whole solve before any iteration
        if st.polish and warm_start is not None and warm_start[1] is not None:
            acc, _ = self._polish_accept(y, x)
            if acc is not None:
                xp, yp, zp, rp0, rd0 = acc
                return self._package("optimal", "polished", xp * d, yp,
                                     rp0, rd0, 0,
                                     time.perf_counter() - t0, log_rows)

        while it < st.max_iter:
            it += 1
            rhs = np.concatenate([st.sigma * x - self.qs, z - y / self.rho])
            sol = self.lu.solve(rhs)
            xt = sol[:n]
            nu = sol[n:]
            zt = z + (nu - y) / self.rho
            x_prev = x
            x = st.alpha * xt + (1.0 - st.alpha) * x
            z_cand = st.alpha * zt + (1.0 - st.alpha) * z + y / self.rho
            z_new = np.clip(z_cand, ls, us)
            y_prev = y
            y = self.rho * (z_cand - z_new)
            z = z_new

            if it % st.check_interval and it != st.max_iter:
                continue

            rp_vec, rd_vec, prim_ref, dual_ref = self._residuals(x, y, z)
            prim_res = float(np.abs(rp_vec).max(initial=0.0))
            dual_res = float(np.abs(rd_vec).max(initial=0.0))

            if st.log_path:
                log_rows.append((it, prim_res, dual_res,
                                 self.prog.objective(x * d)))

            if _meets(rp_vec, rd_vec, prim_ref, dual_ref, eps_abs, eps_rel):
                status = "optimal"
                if converged is None:
                    converged = (x.copy(), y.copy(), z.copy(), prim_res, dual_res)
                    converged_at = it
                if st.polish:
                    # acceptance is always against the configured
                    # tolerances; tightening below only pushes the
                    # iterate toward cleaner multiplier signs
                    acc, cand_score = self._polish_accept(y, x)
                    if acc is not None:
                        x, y, z, prim_res, dual_res = acc
                        detail = "polished"
                        break
                    stagnant = (cand_score is not None
                                and last_fail_score is not None
                                and abs(cand_score - last_fail_score)
                                <= 1e-9 * max(1.0, cand_score))
                    last_fail_score = cand_score
                    if not stagnant and tighten < 2:
                        # active set not clean yet; push the splitting
                        # further before giving up on the polish step
                        tighten += 1
                        eps_abs *= 1e-2
                        eps_rel *= 1e-2
                        status = "iteration-limit"
                        continue
                    detail = "polish rejected"
                break

            # degenerate programs approach the optimum long before the
            # splitting iteration can certify it; dual components in
            # particular may slosh between multiple dual optima with
            # slowly decaying amplitude.  Once the primal side is loosely
            # converged the multiplier signs are a usable active-set
            # guess, so try the resolve and accept it if it meets the
            # strict tolerances on its own.  Failures back off
            # exponentially to keep the factorization cost bounded.
            loose = st.polish_loose_factor
            if st.polish and it - last_polish >= retry_gap \
                    and bool(np.all(np.abs(rp_vec)
                                    <= eps_abs * loose
                                    + eps_rel * loose * prim_ref)):
                last_polish = it
                acc, _ = self._polish_accept(y, x)
                if acc is not None:
                    x, y, z, prim_res, dual_res = acc
                    status = "optimal"
                    detail = "polished"
                    break
                retry_gap = min(retry_gap * 2, 8 * st.polish_retry_gap)

            cert = self._infeasibility(y - y_prev, x - x_prev)
            if cert:
                status = cert
                break
            if st.adaptive_rho and prim_res > 0 and dual_res > 0 \
                    and self._rho_updates < st.adaptive_rho_max_updates \
                    and it - self._rho_updated_at >= self._rho_interval:
                self._maybe_update_rho(
                    it, prim_res, dual_res,
                    max(float(prim_ref.max(initial=0.0)), 1e-12),
                    max(float(dual_ref.max(initial=0.0)), 1e-12))
            if st.time_limit is not None and time.perf_counter() - t0 > st.time_limit:
                detail = "time limit"
                break
            # the tolerances were already met once; cap how long the
            # tightening ladder may chase a cleaner active set
            if converged is not None and it - converged_at >= 20_000:
                break

        if status != "optimal" and converged is not None:
            # the configured tolerances were met; the extra budget spent
            # chasing a cleaner active set for polish just ran out
            x, y, z, prim_res, dual_res = converged
            status = "optimal"
            detail = "polish rejected"
        return self._package(status, detail, x * d, y, prim_res, dual_res,
                             it, time.perf_counter() - t0, log_rows)

    def _package(self, status, detail, x_un, y_sc, prim_res, dual_res,
                 it, elapsed, log_rows):
        m = self.prog.m
        y_un = y_sc * self.e / self.c
        if self.settings.log_path and log_rows:
            with open(self.settings.log_path, "w") as fh:
                fh.write("iter,prim_res,dual_res,obj\n")
                for row in log_rows:
                    fh.write(f"{row[0]},{row[1]:.6e},{row[2]:.6e},{row[3]:.10e}\n")
        return PrimalDualSolution(
            status=status,
            x=x_un,
            y_rows=y_un[:m],
            y_bounds=y_un[m:],
            objective=self.prog.objective(x_un),
            prim_res=prim_res,
            dual_res=dual_res,
            iterations=it,
            solve_time=elapsed,
            polished=(detail == "polished"),
            detail=detail,
            program=self.prog,
            warm=(x_un, y_un),
        )

    # -- diagnostics ------------------------------------------------------

    def _obj_guard(self, x_pol, x_it):
        """A mis-pinned active set passes the residual test with a point
        that is stationary for the wrong restriction; such points move
        the objective by far more than the iterate's own error."""
        obj_it = self.prog.objective(x_it * self.d)
        obj_pol = self.prog.objective(x_pol * self.d)
        return obj_pol <= obj_it + 1e-3 * (1.0 + abs(obj_it))

    def _residuals(self, x, y, z):
        """Unscaled residual vectors plus per-component reference scales.

        The convergence test is applied component-wise: each residual
        entry is compared against eps_abs + eps_rel * (the magnitude of
        the terms feeding that entry).  A single huge coefficient, such
        as a load-shedding penalty, then buys slack only for its own
        column instead of loosening the whole test.
        """
        d, e, c = self.d, self.e, self.c
        ax = self.As @ x
        px = self.ps * x
        aty = self.As.T @ y
        rp_vec = (ax - z) / e
        rd_vec = (px + self.qs + aty) / d / c
        prim_ref = np.maximum(np.abs(ax / e), np.abs(z / e))
        # the dollar-per-unit floor keeps the test attainable when the cost
        # normalization has squeezed the scaled problem by many orders
        dual_ref = np.maximum(np.maximum(np.abs(px / d), np.abs(aty / d)) / c,
                              np.abs(self.prog.q))
        dual_ref = np.maximum(dual_ref, 1.0)
        return rp_vec, rd_vec, prim_ref, dual_ref

    def _infeasibility(self, dy_sc, dx_sc):
        st = self.settings
        # primal certificate: a dual direction proving the rows conflict
        dy = dy_sc * self.e / self.c
        norm = np.abs(dy).max(initial=0.0)
        if norm > 1e-14:
            t = dy / norm
            at_t = np.abs(self.a_full.T @ t).max(initial=0.0)
            pos = np.maximum(t, 0.0)
            neg = np.minimum(t, 0.0)
            open_up = np.isinf(self.u) & (pos > st.eps_pinf)
            open_lo = np.isinf(self.l) & (neg < -st.eps_pinf)
            if at_t <= st.eps_pinf and not open_up.any() and not open_lo.any():
                sup = float(np.where(pos > 0, np.where(np.isinf(self.u), 0.0, self.u) * pos, 0.0).sum()
                            + np.where(neg < 0, np.where(np.isinf(self.l), 0.0, self.l) * neg, 0.0).sum())
                if sup < -st.eps_pinf:
                    return "infeasible"
        # dual certificate: a recession direction with strictly negative cost
        dx = dx_sc * self.d
        norm = np.abs(dx).max(initial=0.0)
        if norm > 1e-14:
            t = dx / norm
            if np.abs(self.prog.p_diag * t).max(initial=0.0) <= st.eps_dinf \
                    and float(self.prog.q @ t) < -st.eps_dinf:
                at = self.a_full @ t
                up_ok = np.where(np.isfinite(self.u), at <= st.eps_dinf, True)
                lo_ok = np.where(np.isfinite(self.l), at >= -st.eps_dinf, True)
                if up_ok.all() and lo_ok.all():
                    return "unbounded"
        return None

    def _polish_accept(self, y_sc, x_sc):
        """Run the active-set resolve and test it against the configured
        tolerances.  Returns (accepted candidate with residuals, None) on
        success, else (None, failure score) where the score is the worst
        residual excess ratio (None if no candidate was produced)."""
        st = self.settings
        polished = self._polish(y_sc, x_sc)
        if polished is None:
            return None, None
        xp, yp, zp = polished
        rpp, rdp, prp, drp = self._residuals(xp, yp, zp)
        if _meets(rpp, rdp, prp, drp, st.eps_abs, st.eps_rel) \
                and self._obj_guard(xp, x_sc):
            return (xp, yp, zp,
                    float(np.abs(rpp).max(initial=0.0)),
                    float(np.abs(rdp).max(initial=0.0))), None
        score = max(
            float((np.abs(rpp)
                   / (st.eps_abs + st.eps_rel * prp)).max(initial=0.0)),
            float((np.abs(rdp)
                   / (st.eps_abs + st.eps_rel * drp)).max(initial=0.0)))
        return None, score

    def _polish(self, y_sc, x_sc):
        """Equality-constrained resolve on the active set; returns the
        scaled candidate (x, y, z) or None if the factorization fails.
        Acceptance is the caller's decision.

        The resolve is anchored at the iterate: the objective carries a
        proximal term (delta/2)|x - x_it|^2.  On a flat optimal face the
        pinned system is singular along the costless directions, and an
        unanchored solve drifts along them into rows it never pinned.
        The anchor keeps those components at the iterate, which satisfies
        the inactive rows; at an exact optimum it is consistent with the
        unmodified optimality conditions, so nondegenerate solutions are
        unaffected."""
        st = self.settings
        n = self.n
        ls = self.l * self.e
        us = self.u * self.e
        eq = ls == us          # always pinned, whatever the multiplier sign
        # a wrong-signed multiplier on a one-sided row must not pin the
        # missing side, there is no finite value to pin it at
        low = (y_sc < 0.0) & ~eq & np.isfinite(ls)
        up = (y_sc > 0.0) & ~eq & np.isfinite(us)

        # The multiplier signs of a loose iterate are only a guess at the
        # active set.  Each pass solves the pinned KKT system, then adds
        # rows the candidate violates and drops pins whose multiplier came
        # out wrong-signed (those were slack, or redundant with other
        # pins).  The best candidate over all passes is returned.
        best = None
        best_score = np.inf
        for _ in range(6):
            idx = np.concatenate([np.flatnonzero(eq), np.flatnonzero(low),
                                  np.flatnonzero(up)])
            vals = np.concatenate([ls[eq], ls[low], us[up]])
            nact = idx.size
            a_red = self.As[idx]
            k_reg = sp.bmat([
                [sp.diags(self.ps + st.polish_delta),
                 a_red.T if nact else sp.csc_matrix((n, 0))],
                [a_red if nact else sp.csc_matrix((0, n)),
                 -st.polish_delta * sp.eye(nact)],
            ], format="csc")
            if nact == 0:
                k_reg = sp.csc_matrix(sp.diags(self.ps + st.polish_delta))
            try:
                lu = spla.splu(k_reg)
            except RuntimeError:
                return best
            # refinement targets the anchored system: only the dual-block
            # regularization is refined away, the proximal term stays
            k_plain = sp.bmat([
                [sp.diags(self.ps + st.polish_delta),
                 a_red.T if nact else sp.csc_matrix((n, 0))],
                [a_red if nact else sp.csc_matrix((0, n)),
                 sp.csc_matrix((nact, nact))],
            ], format="csc") if nact else k_reg
            # proximal-point iteration on the pinned subproblem, reusing
            # one factorization: re-anchoring at each solution drives the
            # anchor error to zero (finitely, on polyhedral pieces), so
            # the accepted point is stationary for the unmodified
            # objective rather than stationary-up-to-delta
            anchor = x_sc
            sol = None
            for _ in range(10):
                rhs = np.concatenate([st.polish_delta * anchor - self.qs,
                                      vals])
                cand = lu.solve(rhs)
                if not np.all(np.isfinite(cand)):
                    return best
                # redundant pins make the plain system singular along dual
                # directions; refinement can then diverge, so keep the best
                ref_sol = cand
                ref_res = float(np.abs(rhs - k_plain @ cand).max(initial=0.0))
                for _ in range(st.refine_steps):
                    if ref_res < 1e-15:
                        break
                    cand = cand + lu.solve(rhs - k_plain @ cand)
                    res = float(np.abs(rhs - k_plain @ cand).max(initial=0.0))
                    if res < ref_res:
                        ref_sol, ref_res = cand, res
                sol = ref_sol
                move = float(np.abs(sol[:n] - anchor).max(initial=0.0))
                anchor = sol[:n]
                if move <= 1e-14 * (1.0 + float(np.abs(anchor).max(initial=0.0))):
                    break

            x_pol = sol[:n]
            y_pol = np.zeros(self.mt)
            y_pol[idx] = sol[n:]
            ax = self.As @ x_pol
            z_pol = np.clip(ax, ls, us)
            z_pol[idx] = vals
            rp, rd, pr, dr = self._residuals(x_pol, y_pol, z_pol)
            score = max(
                float((np.abs(rp) / (st.eps_abs + st.eps_rel * pr)).max(initial=0.0)),
                float((np.abs(rd) / (st.eps_abs + st.eps_rel * dr)).max(initial=0.0)))
            if score < best_score:
                best, best_score = (x_pol, y_pol, z_pol), score

            stol = 1e-9 + 1e-6 * float(np.abs(y_pol).max(initial=0.0))
            shrink_up = up & (y_pol < -stol)
            shrink_lo = low & (y_pol > stol)
            # growing by the dominant violations only keeps the system
            # consistent; noise-level violations rejoin in later passes
            viol_up = ax - us
            viol_lo = ls - ax
            worst = max(float(viol_up.max(initial=0.0)),
                        float(viol_lo.max(initial=0.0)))
            gtol = max(1e-9, 1e-3 * worst)
            grow_up = (viol_up > gtol) & ~eq & ~up
            grow_lo = (viol_lo > gtol) & ~eq & ~low
            if not (grow_up.any() or grow_lo.any()
                    or shrink_up.any() or shrink_lo.any()):
                break
            up = (up | grow_up) & ~shrink_up
            low = (low | grow_lo) & ~shrink_lo
        return best

    def _maybe_update_rho(self, it, prim_res, dual_res, prim_scale, dual_scale):
        st = self.settings
        ratio = np.sqrt((prim_res / prim_scale) / (dual_res / dual_scale))
        if not np.isfinite(ratio) or ratio <= 0:
            return
        new_scalar = float(np.clip(self.rho_scalar * ratio, st.rho_min, st.rho_max))
        change = new_scalar / self.rho_scalar
        if change > st.adaptive_rho_tol or change < 1.0 / st.adaptive_rho_tol:
            self.rho_scalar = new_scalar
            self._rho_updated_at = it
            self._rho_updates += 1
            # exponential backoff keeps a final fixed-rho phase, without
            # which the flip-flopping operator can cycle forever
            self._rho_interval *= 2
            self._build_rho()
            self._factorize()


def solve_qp(prog: ConvexProgram, warm_start=None,
             settings: Settings = Settings()) -> PrimalDualSolution:
    """One-shot QP solve; `prog` must have no cone rows."""
    if prog.cones:
        raise EngineError("program has cone rows; use solve_qcqp")
    return QpWorkspace(prog, settings).solve(warm_start=warm_start)


def _cut_row(prog, cone_idx, direction):
    """Tangent cut Σ a_j x_j (− radius var) <= const radius, as sparse data."""
    cone = prog.cones[cone_idx]
    cols = list(cone.cols)
    vals = list(direction)
    if cone.radius_col is None:
        hi = cone.radius
    else:
        cols.append(cone.radius_col)
        vals.append(-1.0)
        hi = 0.0
    return cols, vals, hi


def solve_qcqp(prog: ConvexProgram, cut_tol: float = 1e-7, max_rounds: int = 50,
               warm_start=None, settings: Settings = Settings(),
               cuts: list | None = None,
               ws_cache: dict | None = None) -> PrimalDualSolution:
    """Outer-approximation loop for programs with norm-ball rows.

    `cuts` is an optional externally owned pool of (cone index, unit
    direction) pairs; cuts discovered here are appended to it, and pool
    cuts are enforced from the first round.  Cuts are tangent planes of
    the ball so they remain valid for any bound changes, which lets a
    branch-and-bound search share one pool across nodes.

    `ws_cache` is an optional dict reusing factorized workspaces across
    calls that differ only in variable/row bounds (the branch-and-bound
    case).  Entries are keyed by cut-pool state; rotating a cut in place
    invalidates the cache.  Callers must pass the same `cuts` list
    whenever they pass the same cache.
    """
    if cuts is None:
        cuts = []
    m_base = prog.m
    n = prog.n
    sol = None
    warm = warm_start
    if warm is not None and warm[1] is not None:
        # the pool may have grown since this warm vector was produced; pad
        # the cut-row block with zeros so lengths line up
        wx, wy = warm
        k_old = len(wy) - m_base - n
        if k_old < 0:
            warm = (wx, None)
        elif k_old != len(cuts):
            pad = np.zeros(max(len(cuts) - k_old, 0))
            wy = np.concatenate([wy[:m_base + min(k_old, len(cuts))], pad,
                                 wy[m_base + k_old:]])
            warm = (wx, wy)

    rho_carry = None
    for round_no in range(max_rounds + 1):
        rows, cols, vals, his = [], [], [], []
        for r, (cone_idx, direction) in enumerate(cuts):
            c_cols, c_vals, hi = _cut_row(prog, cone_idx, direction)
            rows.extend([r] * len(c_cols))
            cols.extend(c_cols)
            vals.extend(c_vals)
            his.append(hi)
        extra = sp.csr_matrix((vals, (rows, cols)), shape=(len(cuts), n))
        aug = prog.with_rows(extra, np.full(len(cuts), -np.inf), np.array(his))
        aug = ConvexProgram(aug.p_diag, aug.q, aug.a, aug.l, aug.u,
                            aug.lb, aug.ub, (), aug.const)
        # successive rounds differ by a few tangent rows; the adapted step
        # size from the last round is a far better start than the default
        if ws_cache is None:
            ws = QpWorkspace(aug, settings, rho0=rho_carry)
        else:
            key = (len(cuts), ws_cache.get("_version", 0))
            ws = ws_cache.get(key)
            if ws is None:
                ws = QpWorkspace(aug, settings, rho0=rho_carry)
                ws_cache[key] = ws
            else:
                ws.update_bounds(l=aug.l, u=aug.u, lb=aug.lb, ub=aug.ub)
        sol = ws.solve(warm_start=warm)
        rho_carry = ws.rho_scalar
        if sol.status != "optimal":
            return _finish_qcqp(prog, sol, cuts, m_base)

        new_cuts = []
        worst = 0.0
        for k, cone in enumerate(prog.cones):
            v = sol.x[list(cone.cols)]
            radius = cone.radius if cone.radius_col is None else sol.x[cone.radius_col]
            norm = float(np.linalg.norm(v))
            violation = norm - radius
            worst = max(worst, violation)
            if violation > cut_tol:
                if norm > 1e-12:
                    direction = tuple(v / norm)
                else:
                    direction = tuple(1.0 if j == 0 else 0.0
                                      for j in range(len(cone.cols)))
                dup = any(ci == k and max(abs(a - b) for a, b in zip(d, direction)) < 1e-9
                          for ci, d in cuts)
                if not dup:
                    new_cuts.append((k, direction))
        if not new_cuts:
            if worst > cut_tol:
                sol.status = "iteration-limit"
                sol.detail = f"cut rounds stalled; worst violation {worst:.3e}"
            return _finish_qcqp(prog, sol, cuts, m_base)
        if round_no == max_rounds:
            sol.status = "iteration-limit"
            sol.detail = f"cut-round limit; worst violation {worst:.3e}"
            return _finish_qcqp(prog, sol, cuts, m_base)
        # an active cone draws ever-closer tangents round after round;
        # letting them pile up without bound leaves near-parallel row
        # stacks whose dual mass can slosh freely.  Once a cone holds
        # `max_cuts_per_cone` cuts, the most parallel one is rotated in
        # place (every kept cut stays a valid tangent).  The cap is
        # generous so eviction only ever hits a near-twin of the new cut,
        # never the far side of a bracket around the optimum.
        wx, wy = sol.warm
        max_cuts_per_cone = 24
        appended = 0
        rotated = False
        for k, direction in new_cuts:
            mine = [r for r, (ci, _) in enumerate(cuts) if ci == k]
            if len(mine) >= max_cuts_per_cone:
                r = max(mine, key=lambda r: sum(a * b for a, b in
                                                zip(cuts[r][1], direction)))
                cuts[r] = (k, direction)
                rotated = True
            else:
                cuts.append((k, direction))
                appended += 1
        if rotated and ws_cache is not None:
            version = ws_cache.get("_version", 0) + 1
            ws_cache.clear()
            ws_cache["_version"] = version
        # multipliers of kept and rotated rows carry over; appended cuts
        # start at zero
        y_new = np.concatenate([wy[:m_base + len(cuts) - appended],
                                np.zeros(appended),
                                wy[m_base + len(cuts) - appended:]])
        warm = (wx, y_new)

    return _finish_qcqp(prog, sol, cuts, m_base)


def _finish_qcqp(prog, sol, cuts, m_base):
    """Split cut-row duals out of the row vector and aggregate per cone."""
    cone_duals = np.zeros(len(prog.cones))
    y_all = sol.y_rows
    for r, (cone_idx, _) in enumerate(cuts):
        if m_base + r < y_all.shape[0]:
            cone_duals[cone_idx] += max(float(y_all[m_base + r]), 0.0)
    sol.y_rows = y_all[:m_base]
    sol.cone_duals = cone_duals
    sol.program = prog
    if sol.status == "optimal" and prog.cones:
        _dual_refit(prog, sol)
    wx, wy = sol.warm if sol.warm else (sol.x, None)
    sol.warm = (wx, wy)
    return sol


def _cone_normal(prog, cone, x):
    """Outward unit normal of the ball at (the projection of) x, as a
    dense length-n vector including the radius-variable entry."""
    v = x[list(cone.cols)]
    norm = float(np.linalg.norm(v))
    a = np.zeros(prog.n)
    if norm > 1e-12:
        a[list(cone.cols)] = v / norm
    else:
        a[cone.cols[0]] = 1.0
    if cone.radius_col is not None:
        a[cone.radius_col] = -1.0
    return a, norm


def _dual_refit(prog, sol):
    """Re-derive the duals against the original cone geometry.

    The cut LP's optimum sits on a vertex of near-parallel tangent
    planes, so its multipliers differ from the ball multiplier at first
    order in the final cut angle.  A least-squares stationarity solve
    over the active rows, bounds, and one tangent normal per active cone
    removes that error.  Each multiplier is held on its feasible side
    (one-sided rows and bounds have signed multipliers, equalities are
    free); components that come out wrong-signed are pruned and the
    system re-solved, so the result is always a valid dual certificate,
    not just a stationary one.  It replaces the incoming duals when it
    improves the stationarity residual, or when the incoming vector is
    itself wrong-signed somewhere (degenerate active sets let the
    pinned-system polish split dual mass across redundant rows with
    arbitrary signs).
    """
    x = sol.x
    n = prog.n
    grad = prog.p_diag * x + prog.q

    normals = {}
    act_cones = []
    for k, cone in enumerate(prog.cones):
        a, norm = _cone_normal(prog, cone, x)
        radius = cone.radius if cone.radius_col is None else x[cone.radius_col]
        if sol.cone_duals[k] > 0.0 or norm >= radius - 1e-6 * (1.0 + radius):
            act_cones.append(k)
            normals[k] = a

    ax = prog.a @ x if prog.m else np.zeros(0)
    with np.errstate(invalid="ignore"):
        eq = prog.l == prog.u
        near_u = np.isfinite(prog.u) & (prog.u - ax <= 1e-6 * (1.0 + np.abs(prog.u)))
        near_l = np.isfinite(prog.l) & (ax - prog.l <= 1e-6 * (1.0 + np.abs(prog.l)))
        act_rows = np.flatnonzero(eq | near_u | near_l)
        lb_hit = np.isfinite(prog.lb) & (x - prog.lb <= 1e-6 * (1.0 + np.abs(prog.lb)))
        ub_hit = np.isfinite(prog.ub) & (prog.ub - x <= 1e-6 * (1.0 + np.abs(prog.ub)))
        act_lb = np.flatnonzero(lb_hit)
        act_ub = np.flatnonzero(ub_hit)

    parts = []
    if act_rows.size:
        parts.append(prog.a[act_rows].T.tocsc())
    bound_cols = np.concatenate([act_lb, act_ub])
    if bound_cols.size:
        parts.append(sp.eye(n, format="csc")[:, bound_cols])
    if act_cones:
        parts.append(sp.csc_matrix(
            np.column_stack([normals[k] for k in act_cones])))
    if not parts:
        return
    mat = sp.hstack(parts, format="csc")

    # sign each component: +1 nonnegative (upper-side rows, upper bounds,
    # cones), -1 nonpositive (lower-side rows, lower bounds), 0 free
    row_sign = np.zeros(act_rows.size)
    only_u = (near_u & ~near_l & ~eq)[act_rows]
    only_l = (near_l & ~near_u & ~eq)[act_rows]
    row_sign[only_u] = 1.0
    row_sign[only_l] = -1.0
    signs = np.concatenate([row_sign, -np.ones(act_lb.size),
                            np.ones(act_ub.size), np.ones(len(act_cones))])

    res_old = grad + (prog.a.T @ sol.y_rows if prog.m else 0.0) + sol.y_bounds
    for k in act_cones:
        res_old = res_old + sol.cone_duals[k] * normals[k]
    res_old_norm = float(np.abs(res_old).max(initial=0.0))

    # how badly the incoming duals break sign or slackness conditions
    old_bad = 0.0
    if prog.m:
        y = sol.y_rows
        inactive = np.ones(prog.m, dtype=bool)
        inactive[act_rows] = False
        old_bad = float(np.abs(y[inactive]).max(initial=0.0))
        old_bad = max(old_bad,
                      float((-y[near_u & ~near_l & ~eq]).max(initial=0.0)),
                      float(y[near_l & ~near_u & ~eq].max(initial=0.0)))
    yb = sol.y_bounds
    loose = ~lb_hit & ~ub_hit
    old_bad = max(old_bad, float(np.abs(yb[loose]).max(initial=0.0)),
                  float(yb[lb_hit & ~ub_hit].max(initial=0.0)),
                  float((-yb[ub_hit & ~lb_hit]).max(initial=0.0)))

    keep = np.ones(mat.shape[1], dtype=bool)
    mu_full = np.zeros(mat.shape[1])
    for _ in range(8):
        sub = mat[:, keep]
        out = spla.lsqr(sub, -grad, atol=1e-14, btol=1e-14,
                        iter_lim=8 * (sub.shape[1] + 10))
        mu = out[0]
        if not np.all(np.isfinite(mu)):
            return
        mu_full[:] = 0.0
        mu_full[np.flatnonzero(keep)] = mu
        stol = 1e-9 * (1.0 + float(np.abs(mu).max(initial=0.0)))
        bad = ((signs > 0) & (mu_full < -stol)) \
            | ((signs < 0) & (mu_full > stol))
        if not bad.any():
            break
        keep &= ~bad
    np.clip(mu_full, np.where(signs > 0, 0.0, -np.inf),
            np.where(signs < 0, 0.0, np.inf), out=mu_full)

    res_new_norm = float(np.abs(grad + mat @ mu_full).max(initial=0.0))
    if not np.isfinite(res_new_norm):
        return
    if res_new_norm > res_old_norm and old_bad <= 1e-7:
        return

    y_rows = np.zeros(prog.m)
    y_rows[act_rows] = mu_full[:act_rows.size]
    off = act_rows.size
    y_bounds = np.zeros(n)
    np.add.at(y_bounds, bound_cols, mu_full[off:off + bound_cols.size])
    off += bound_cols.size
    cone_duals = np.zeros(len(prog.cones))
    for k in act_cones:
        cone_duals[k] = max(float(mu_full[off]), 0.0)
        off += 1
    sol.y_rows = y_rows
    sol.y_bounds = y_bounds
    sol.cone_duals = cone_duals
