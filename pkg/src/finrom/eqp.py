"""Sparse positive quadrature rules fitted to reduced training data.

For one archetype, find nonnegative weights on the truth quadrature points,
as few of them as possible, such that over every reduced training state the
re-weighted residual vector, Jacobian matrix, output value, and reference
volume stay within a tolerance delta of their truth-weighted values. The
constraints are written in difference form (re-weighted minus truth), so
the truth weights themselves are always feasible and tightening delta can
only grow the LP objective.

The L1 objective with a simplex solver gives vertex solutions whose support
is small; the support is the quadrature rule. The full constraint matrix
(2(1 + N_s n_loc + N_s n_loc^2) rows by Q columns, dense) is far too large
to hand to the solver, so the LP is solved by alternating row generation
(scan all constraints at the current weights, add violated ones) and column
generation (price all Q points against the working-row duals, admit points
with negative reduced cost). At termination the weights are feasible for
the whole family and optimal for the working rows, hence optimal for the
whole family.

Constraint rows span several orders of magnitude, so rows are scaled to
unit max-abs inside the LP and the enforced tolerance is backed off from
delta per row; rows where the simplex slop still exceeds the backoff get
their backoff widened adaptively and the LP is re-solved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from . import physics
from .components import quad_geometry
from .errors import ConfigError, ConvergenceError, SolverError
from .reduced import ReducedArchetype

DELTA_GRID = (1e2, 1e1, 1.0, 1e-1, 1e-2, 1e-3, 1e-4)

WEIGHT_DROP_REL = 1e-12     # relative threshold for dropping LP zeros
VERIFY_MARGIN = 1e-9        # extracted rules must hold within delta + this
LP_FEAS_TOL = 1e-10         # simplex feasibility tolerance (scaled rows)
LP_PENALTY = 1e5            # elastic slack cost (fallback solve only)
PRICE_TOL = 1e-9            # reduced-cost threshold for admitting columns
BACKOFF_BASE = 0.1          # initial per-row enforcement margin, fraction of delta
BACKOFF_CAP = 0.5
SCAN_POOL = 600             # violated rows considered per outer iteration
SCAN_NEAR = 0.9             # also harvest rows above this fraction of delta
ROW_BATCH = 200             # rows surviving deduplication and added
COL_BATCH = 200             # most-negative columns added per pricing round
ROW_CAP = 4000              # hard working-set limit (memory guard)
COMPACT_ROWS = 600          # working-set size that triggers mid-delta compaction
COMPACT_KEEP = 0.5          # mid-delta keep threshold, fraction of the row bound
IPM_ROWS = 500              # working-set size where interior point beats simplex
SEED_SNAPSHOTS = 8          # snapshots whose residual rows seed the LP
COS_BATCH = 0.995           # within-batch direction dedup threshold
MAX_OUTER = 120

VOLUME, RESIDUAL, JACOBIAN, OUTPUT = 0, 1, 2, 3


@dataclass(frozen=True)
class QuadRule:
    """A sparse rule: which truth points survive and with what weights."""

    point_idx: np.ndarray
    weights: np.ndarray
    delta: float
    kind: str               # "residual" or "output"
    objective: float        # sum of all LP weights before extraction
    n_lp_rows: int          # working rows when the LP terminated

    @property
    def n_points(self) -> int:
        return len(self.point_idx)


@dataclass(frozen=True)
class EqpProblem:
    """Design dimensions of the full constraint family at one delta."""

    n_quad: int
    n_sample: int
    n_loc: int
    delta: float

    @property
    def n_rows(self) -> int:
        # positivity bounds plus two-sided volume, residual and Jacobian rows
        ns, nl = self.n_sample, self.n_loc
        return self.n_quad + 2 * (1 + ns * nl + ns * nl * nl)


def _restricted_lp(rs, bs, ds, cols, elastic):
    """One LP solve on the scaled working rows and admitted columns.

    Small instances go to the dual simplex with devex pricing
    (steepest-edge stalls badly on these degenerate polytopes). Large ones
    go to the interior-point method, whose cost does not degrade with
    degeneracy; its crossover returns a vertex solution with exact basic
    duals, so pricing and rule extraction see no difference. Simplex is
    the fallback if the interior point fails to converge.
    """
    m = rs.shape[0]
    nc = len(cols)
    ac = rs[:, cols]
    if elastic:
        a_ub = np.zeros((2 * m, nc + 2 * m))
        a_ub[:m, :nc] = ac
        a_ub[m:, :nc] = -ac
        a_ub[:m, nc:nc + m] = -np.eye(m)
        a_ub[m:, nc + m:] = -np.eye(m)
        cost = np.concatenate([np.ones(nc), np.full(2 * m, LP_PENALTY)])
    else:
        a_ub = np.vstack([ac, -ac])
        cost = np.ones(nc)
    b_ub = np.concatenate([bs + ds, ds - bs])
    common = {
        "primal_feasibility_tolerance": LP_FEAS_TOL,
        "dual_feasibility_tolerance": 1e-9,
    }
    if m >= IPM_ROWS and not elastic:
        res = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=(0, None),
                      method="highs-ipm", options=common)
        if res.status == 0:
            return res
    return linprog(
        cost,
        A_ub=a_ub,
        b_ub=b_ub,
        bounds=(0, None),
        method="highs-ds",
        options={**common,
                 "simplex_dual_edge_weight_strategy": "devex"},
    )


def _solve_weight_lp(rows, rhs, bound, n_quad, cols):
    """Minimize the weight sum subject to |rows @ rho - rhs| <= bound,
    rho >= 0, by column generation on the given working rows.

    ``cols`` is the starting column set; the final set is returned so the
    caller can warm-start the next solve. Solves are attempted without
    slack variables first; if the column-restricted problem is infeasible,
    an elastic variant (penalty LP_PENALTY) supplies the dual prices that
    pull in the missing columns.
    """
    rows = np.asarray(rows)
    m = rows.shape[0]
    scale = np.abs(rows).max(axis=1)
    if np.any(scale <= 0):
        raise SolverError("degenerate all-zero constraint row")
    rs = rows / scale[:, None]
    bs = rhs / scale
    ds = bound / scale

    cols = np.asarray(cols, dtype=np.int64)
    res = None
    for _ in range(80):
        res = _restricted_lp(rs, bs, ds, cols, elastic=False)
        if res.status in (2, 4):
            res = _restricted_lp(rs, bs, ds, cols, elastic=True)
        if res.status == 1:
            raise ConvergenceError("weight LP hit the simplex iteration limit")
        if res.status != 0:
            raise SolverError(f"weight LP failed with status {res.status}")
        marg = res.ineqlin.marginals
        reduced_cost = 1.0 - rs.T @ (marg[:m] - marg[m:])
        order = np.argsort(reduced_cost, kind="stable")[:COL_BATCH]
        new = np.setdiff1d(order[reduced_cost[order] < -PRICE_TOL], cols)
        if len(new) == 0:
            break
        cols = np.union1d(cols, new)
    else:
        raise ConvergenceError("weight LP column generation did not close")

    if res.x[len(cols):].max(initial=0.0) > 1e-12:
        raise SolverError(
            "weight LP kept elastic slack at optimality; the truth weights "
            "should make every constraint family feasible"
        )
    rho = np.zeros(n_quad)
    rho[cols] = res.x[: len(cols)]
    return rho, float(res.fun), cols


class _WorkingSet:
    """Constraint rows currently in the LP, with per-row backoff factors."""

    def __init__(self, n_quad, volume_rhs):
        self.specs = [(VOLUME, 0, 0, 0)]
        self.rows = [np.ones(n_quad)]
        self.rhs = [volume_rhs]
        self.backoff = [BACKOFF_BASE]
        self.index = {self.specs[0]: 0}

    def __len__(self):
        return len(self.specs)

    def add(self, spec, vec, rhs):
        self.index[spec] = len(self.specs)
        self.specs.append(spec)
        self.rows.append(vec)
        self.rhs.append(rhs)
        self.backoff.append(BACKOFF_BASE)

    def widen(self, spec):
        """Grow the backoff of a row the solver failed to hold; False once
        the cap is reached."""
        i = self.index[spec]
        if self.backoff[i] >= BACKOFF_CAP:
            return False
        self.backoff[i] = min(BACKOFF_CAP, 4.0 * self.backoff[i])
        return True

    def bounds(self, delta):
        return delta * (1.0 - np.asarray(self.backoff))


class EqpTrainer:
    """Residual/Jacobian rule training for one archetype.

    Point data for every training state (field values, gradients,
    conductivity, geometry factors) is precomputed once; constraint rows are
    realized on demand from it. A single trainer walks the delta grid from
    loosest to tightest so working rows and admitted columns carry over.
    """

    def __init__(self, ra: ReducedArchetype, states, mus):
        states = np.asarray(states, dtype=float)
        mus = np.asarray(mus, dtype=float)
        if states.ndim != 2 or states.shape[0] != ra.n_loc:
            raise ConfigError("states must be (n_loc, n_sample)")
        if mus.shape != (states.shape[1], 3):
            raise ConfigError("mus must be (n_sample, 3)")
        self.ra = ra
        self.states = states
        self.mus = mus
        self.n_sample = states.shape[1]
        self.wbar = ra.comp.quad.weights
        self.n_quad = len(self.wbar)

        u = ra.phi @ states           # (Q, n_sample)
        self.ux = ra.gx @ states
        self.uy = ra.gy @ states
        self.k = physics.conductivity(u)
        self.dk = physics.conductivity_derivative(u)
        geo = [quad_geometry(ra.comp, mu) for mu in mus]
        self.cxx = np.stack([g[0] for g in geo], axis=1)
        self.cyy = np.stack([g[1] for g in geo], axis=1)
        self.cm = np.stack([g[2] for g in geo], axis=1)
        self._res_cache = (-1, None)

    def problem(self, delta: float) -> EqpProblem:
        return EqpProblem(self.n_quad, self.n_sample, self.ra.n_loc, delta)

    # -- constraint rows ---------------------------------------------------

    def residual_matrix(self, n: int) -> np.ndarray:
        """(Q, n_loc) residual integrand of training state n; its columns
        are LP rows and their truth-weighted sums the row right sides."""
        if self._res_cache[0] == n:
            return self._res_cache[1]
        ra = self.ra
        ax = self.cxx[:, n] * self.k[:, n] * self.ux[:, n]
        ay = self.cyy[:, n] * self.k[:, n] * self.uy[:, n]
        mat = (ra.gx * ax[:, None] + ra.gy * ay[:, None]
               - self.mus[n, 2] * ra.phi * self.cm[:, n][:, None])
        self._res_cache = (n, mat)
        return mat

    def jacobian_row(self, n: int, i: int, j: int) -> np.ndarray:
        ra = self.ra
        return ((self.cxx[:, n] * self.k[:, n]) * ra.gx[:, i] * ra.gx[:, j]
                + (self.cyy[:, n] * self.k[:, n]) * ra.gy[:, i] * ra.gy[:, j]
                + ((self.cxx[:, n] * self.dk[:, n] * self.ux[:, n]) * ra.gx[:, i]
                   + (self.cyy[:, n] * self.dk[:, n] * self.uy[:, n]) * ra.gy[:, i])
                * ra.phi[:, j])

    def jacobian_diff(self, n: int, d: np.ndarray) -> np.ndarray:
        """(n_loc, n_loc) Jacobian change under the weight perturbation d,
        via four dense products instead of n_loc^2 row builds."""
        ra = self.ra
        kxx = d * self.cxx[:, n] * self.k[:, n]
        kyy = d * self.cyy[:, n] * self.k[:, n]
        px = d * self.cxx[:, n] * self.dk[:, n] * self.ux[:, n]
        py = d * self.cyy[:, n] * self.dk[:, n] * self.uy[:, n]
        jd = ra.gx.T @ (ra.gx * kxx[:, None])
        jd += ra.gy.T @ (ra.gy * kyy[:, None])
        jd += ra.gx.T @ (ra.phi * px[:, None])
        jd += ra.gy.T @ (ra.phi * py[:, None])
        return jd

    def row_vector(self, spec) -> np.ndarray:
        typ, n, i, j = spec
        if typ == VOLUME:
            return np.ones(self.n_quad)
        if typ == RESIDUAL:
            return self.residual_matrix(n)[:, i].copy()
        if typ == JACOBIAN:
            return self.jacobian_row(n, i, j)
        raise ValueError(f"unknown row type {typ}")

    # -- violation scan ----------------------------------------------------

    def scan(self, rho: np.ndarray, delta: float):
        """Worst constraint violation at rho, plus the most violated
        (value, spec) pairs: a few per snapshot, SCAN_POOL overall.

        Rows above SCAN_NEAR * delta are harvested along with the outright
        violations. The optimum moves a little every round, so the row just
        under the bound now is usually the row just over it next round;
        enforcing it early saves a simplex solve."""
        d = rho - self.wbar
        near = delta * SCAN_NEAR
        found = []
        worst = abs(float(d.sum()))
        if worst > near:
            found.append((worst, (VOLUME, 0, 0, 0)))
        n_loc = self.ra.n_loc
        # split the pool over snapshots, but never below the large-sample
        # quota: few snapshots should not mean thin batches
        quota = max(8, SCAN_POOL // (3 * self.n_sample))
        for n in range(self.n_sample):
            rv = np.abs(self.residual_matrix(n).T @ d)
            worst = max(worst, float(rv.max()))
            top = np.argsort(-rv, kind="stable")[:quota]
            for i in top[rv[top] > near]:
                found.append((float(rv[i]), (RESIDUAL, n, int(i), 0)))
            jd = np.abs(self.jacobian_diff(n, d)).ravel()
            worst = max(worst, float(jd.max()))
            top = np.argsort(-jd, kind="stable")[:2 * quota]
            for flat in top[jd[top] > near]:
                i, j = divmod(int(flat), n_loc)
                found.append((float(jd[flat]), (JACOBIAN, n, i, j)))
        found.sort(key=lambda t: (-t[0], t[1]))
        return worst, found[:SCAN_POOL]

    # -- training ----------------------------------------------------------

    def train(self, deltas=DELTA_GRID, progress=None):
        """Rules for every delta, loosest first, sharing working state."""
        deltas = sorted(set(float(d) for d in deltas), reverse=True)
        if deltas[-1] <= 0:
            raise ConfigError("deltas must be positive")
        work = _WorkingSet(self.n_quad, float(self.wbar.sum()))
        self._seed(work)
        cols = np.arange(0, self.n_quad, max(1, self.n_quad // 512))
        rules = {}
        for delta in deltas:
            rho, objective, cols = self._close_lp(delta, work, cols)
            rules[delta] = self._extract(rho, delta, objective, len(work))
            if progress is not None:
                progress(self.ra.kind, delta, rules[delta])
            work, cols = self._compact(work, rho, delta, 0.95)
        return rules

    def _compact(self, work, rho, delta, keep):
        """Drop working rows that were comfortably slack at the optimum and
        columns outside its support.  Simplex cost grows with both
        dimensions, the scan re-derives dropped rows if they matter again,
        and the rows that actually bind are kept.  Runs between deltas
        (keep close to 1: the tighter delta reuses only what bound) and
        inside a delta once the set gets fat (keep low: rows may still
        swing back toward the bound).  Rows with a widened enforcement
        margin stay put; they have proven numerically troublesome."""
        d = rho - self.wbar
        bounds = work.bounds(delta)
        kept = _WorkingSet(self.n_quad, work.rhs[0])
        kept.backoff[0] = work.backoff[0]
        for i in range(1, len(work)):
            if (abs(work.rows[i] @ d) >= keep * bounds[i]
                    or work.backoff[i] > BACKOFF_BASE):
                kept.add(work.specs[i], work.rows[i], work.rhs[i])
                kept.backoff[-1] = work.backoff[i]
        support = np.flatnonzero(rho > 0)
        spread = np.arange(0, self.n_quad, max(1, self.n_quad // 64))
        return kept, np.union1d(support, spread)

    def _seed(self, work):
        """Seed the working set with the residual rows of a spread of
        snapshots; the scan supplies Jacobian rows where they matter."""
        picks = np.unique(np.linspace(
            0, self.n_sample - 1, min(SEED_SNAPSHOTS, self.n_sample)
        ).astype(int))
        for n in picks:
            mat = self.residual_matrix(n)
            truth = mat.T @ self.wbar
            for i in range(self.ra.n_loc):
                work.add((RESIDUAL, int(n), i, 0), mat[:, i].copy(),
                         float(truth[i]))

    def _close_lp(self, delta, work, cols):
        for _ in range(MAX_OUTER):
            rho, objective, cols = _solve_weight_lp(
                np.vstack(work.rows), np.asarray(work.rhs),
                work.bounds(delta), self.n_quad, cols,
            )
            worst, found = self.scan(rho, delta)
            if worst <= delta:
                return rho, objective, cols
            if len(work) > COMPACT_ROWS:
                # rows only: pruning columns here forces an infeasible
                # restart, and width is not what the simplex pays for
                work, _ = self._compact(work, rho, delta, COMPACT_KEEP)
            fresh = []
            for value, spec in found:
                if spec not in work.index:
                    vec = self.row_vector(spec)
                    fresh.append((spec, vec, float(np.linalg.norm(vec))))
                elif value > delta and not work.widen(spec):
                    raise SolverError(
                        f"{self.ra.kind}: row {spec} cannot be enforced "
                        f"at delta={delta:g} within the backoff cap"
                    )
            for spec, vec in self._thin(fresh):
                work.add(spec, vec, float(vec @ self.wbar))
                # admit the points this row is most sensitive to
                cols = np.union1d(
                    cols, np.argsort(-np.abs(vec), kind="stable")[:8]
                )
            if len(work) > ROW_CAP:
                raise ConvergenceError(
                    f"{self.ra.kind}: working set exceeded {ROW_CAP} rows "
                    f"at delta={delta:g}"
                )
        raise ConvergenceError(
            f"{self.ra.kind}: rule at delta={delta:g} did not close after "
            f"{MAX_OUTER} row-generation rounds"
        )

    @staticmethod
    def _thin(fresh):
        """Thin a violation-ordered candidate batch to ROW_BATCH rows of
        distinct direction.  Nearby quadrature points give near-parallel
        rows across many snapshots at once; enforcing the most violated
        representative usually settles the rest, and the next scan brings
        back any sibling it did not.  A near-parallel row of clearly
        larger norm is a tighter constraint in scaled units, so the norm
        guard lets it through."""
        if len(fresh) <= 1:
            return [(spec, vec) for spec, vec, _ in fresh]
        norms = np.array([max(nrm, 1e-300) for _, _, nrm in fresh])
        unit = np.stack([vec for _, vec, _ in fresh]) / norms[:, None]
        gram = np.abs(unit @ unit.T)
        kept = []
        for i in range(len(fresh)):
            if any(gram[i, j] > COS_BATCH and norms[j] >= 0.999 * norms[i]
                   for j in kept):
                continue
            kept.append(i)
            if len(kept) == ROW_BATCH:
                break
        return [(fresh[i][0], fresh[i][1]) for i in kept]

    def _extract(self, rho, delta, objective, n_rows):
        for threshold in (WEIGHT_DROP_REL * rho.max(), 0.0):
            idx = np.flatnonzero(rho > threshold)
            if len(idx) == 0:
                raise SolverError("empty quadrature rule")
            rule = QuadRule(idx, rho[idx], delta, "residual",
                            objective, n_rows)
            if self.verify(rule) <= delta + VERIFY_MARGIN:
                return rule
        raise SolverError(
            f"extracted rule violates its constraints at delta={delta:g}"
        )

    def verify(self, rule: QuadRule) -> float:
        """Worst violation of the full constraint family at the rule."""
        rho = np.zeros(self.n_quad)
        rho[rule.point_idx] = rule.weights
        worst, _ = self.scan(rho, np.inf)
        return worst


def train_output_rules(ra, states, mus, deltas=DELTA_GRID):
    """Rules for the integrated-temperature output: one row per training
    state plus the volume row, few enough to keep in the LP from the
    start, with the same column generation underneath."""
    states = np.asarray(states, dtype=float)
    mus = np.asarray(mus, dtype=float)
    wbar = ra.comp.quad.weights
    n_quad = len(wbar)
    u = ra.phi @ states
    cm = np.stack([quad_geometry(ra.comp, mu)[2] for mu in mus], axis=1)
    rows = np.vstack([np.ones(n_quad), (cm * u).T])
    rhs = rows @ wbar

    deltas = sorted(set(float(d) for d in deltas), reverse=True)
    cols = np.arange(0, n_quad, max(1, n_quad // 512))
    rules = {}
    for delta in deltas:
        backoff = np.full(rows.shape[0], BACKOFF_BASE)
        for _ in range(12):
            rho, objective, cols = _solve_weight_lp(
                rows, rhs, delta * (1.0 - backoff), n_quad, cols
            )
            bad = np.abs(rows @ rho - rhs) > delta
            if not bad.any():
                break
            if np.any(backoff[bad] >= BACKOFF_CAP):
                raise SolverError("output row cannot be enforced")
            backoff[bad] = np.minimum(BACKOFF_CAP, 4.0 * backoff[bad])
        else:
            raise ConvergenceError("output rule training did not settle")
        for threshold in (WEIGHT_DROP_REL * rho.max(), 0.0):
            idx = np.flatnonzero(rho > threshold)
            if len(idx) == 0:
                raise SolverError("empty output rule")
            rule = QuadRule(idx, rho[idx], delta, "output",
                            objective, rows.shape[0])
            if verify_output_rule(ra, states, mus, rule) <= delta + VERIFY_MARGIN:
                break
        else:
            raise SolverError(f"output rule fails verification at {delta:g}")
        rules[delta] = rule
    return rules


def verify_output_rule(ra, states, mus, rule: QuadRule) -> float:
    """Worst output/volume constraint violation at an extracted rule."""
    states = np.asarray(states, dtype=float)
    wbar = ra.comp.quad.weights
    u = ra.phi @ states
    cm = np.stack([quad_geometry(ra.comp, mu)[2] for mu in np.asarray(mus)],
                  axis=1)
    rows = np.vstack([np.ones(len(wbar)), (cm * u).T])
    rho = np.zeros(len(wbar))
    rho[rule.point_idx] = rule.weights
    return float(np.abs(rows @ (rho - wbar)).max())
