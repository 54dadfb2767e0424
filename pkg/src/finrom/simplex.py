"""Dense band-constraint primal simplex with incremental warm starts.

Cutting-plane training repeatedly solves the same LP with a few rows or
columns appended, and a general-purpose solver pays the full cold-start
cost every round. This solver keeps the basis and its explicit inverse
alive across modifications: appended columns enter nonbasic, appended rows
enter through their elastic column with a bordered-block inverse update,
and the next solve is a few hundred pivots instead of many thousands.

The LP shape is fixed by the training problem:

    min  sum(c_s . x)  over  x >= 0,
    s.t. A x + s + e+ - e- = b,   0 <= s_i <= band_i,   e >= 0,

where the elastic pair e+/e- carries a large penalty, so the LP is always
feasible and restricted infeasibility shows up as elastic mass at the
optimum rather than a solver status. Only the structural block A is stored;
slack and elastic columns are unit vectors, so their reduced costs and
entering directions come straight from the duals and the inverse. These
instances are massively degenerate (most rows sit at a band edge), which
rules out Dantzig pricing: entering columns are chosen by devex weights
and the leaving row by a two-pass Harris ratio test, the standard pairing
that keeps the pivot count near the nondegenerate ideal.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import SolverError

FEAS_TOL = 1e-10            # bound violation treated as zero, scaled units
PIVOT_TOL = 1e-9            # smallest acceptable pivot magnitude
DUAL_TOL = 1e-9             # reduced-cost threshold for optimality
HARRIS_TOL = 1e-11          # bound slop admitted in ratio-test pass one
REFRESH_EVERY = 200         # pivots between inverse recomputations
STALL_LIMIT = 120           # non-improving pivots before Bland's rule
DRIFT_TOL = 1e-7            # equation residual that forces a refresh
BOUND_SLACK = 1e-8          # basic bound violation that forces a cold start
WEIGHT_RESET = 1e7          # devex weight that triggers a framework reset

OPTIMAL = 0
ITERATION_LIMIT = 1

STRUCT, SLACK, ELASTIC_UP, ELASTIC_DOWN = 0, 1, 2, 3


class BoundedSimplex:
    """Warm-startable simplex over a growing structural block.

    Rows arrive in batches through `add_rows` (each brings its implicit
    slack and elastic columns), structural columns through `add_cols`.
    `solve` warm-starts from whatever basis the previous call left.
    """

    def __init__(self, penalty: float):
        self.penalty = float(penalty)
        self.m = 0
        self.ns = 0
        self.a = np.zeros((0, 0))
        self.b = np.zeros(0)
        self.cs = np.zeros(0)
        self.band = np.zeros(0)
        self.kind = np.zeros(0, dtype=np.int8)     # basis member kinds
        self.idx = np.zeros(0, dtype=np.int64)     # column or row index
        self.xb = np.zeros(0)                      # basic values
        self.binv = np.zeros((0, 0))
        self.slack_hi = np.zeros(0, dtype=bool)    # nonbasic slack at band
        self.bs_struct = np.zeros(0, dtype=bool)   # in-basis flags
        self.bs_slack = np.zeros(0, dtype=bool)
        self.bs_eup = np.zeros(0, dtype=bool)
        self.bs_edn = np.zeros(0, dtype=bool)
        self.w_struct = np.zeros(0)                # devex reference weights
        self.w_slack = np.zeros(0)
        self.w_eup = np.zeros(0)
        self.w_edn = np.zeros(0)
        self._pivots = 0
        self._cold = True

    # -- construction ------------------------------------------------------

    def add_cols(self, block: np.ndarray, cost: float = 1.0) -> int:
        """Structural columns over all current rows, nonbasic at zero.
        Returns the index of the first new column."""
        block = np.asarray(block, dtype=float)
        if block.shape[0] != self.m:
            raise ValueError("column block has wrong row count")
        k = block.shape[1]
        self.a = np.hstack([self.a, block]) if self.ns else block.copy()
        self.cs = np.concatenate([self.cs, np.full(k, float(cost))])
        self.bs_struct = np.concatenate([self.bs_struct,
                                         np.zeros(k, dtype=bool)])
        self.w_struct = np.concatenate([self.w_struct, np.ones(k)])
        first = self.ns
        self.ns += k
        return first

    def add_rows(self, coeffs: np.ndarray, rhs: np.ndarray,
                 bands: np.ndarray) -> None:
        """Rows  coeffs.x + s + e+ - e- = rhs  with  0 <= s <= band.

        ``coeffs`` is (k, ns) over the structural columns only. Each new
        row joins the basis through whichever elastic sign keeps the basic
        value nonnegative, via a bordered update of the inverse.
        """
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
        k, ns = coeffs.shape
        if ns != self.ns:
            raise ValueError("row block has wrong column count")
        rhs = np.asarray(rhs, dtype=float)
        bands = np.asarray(bands, dtype=float)
        m_old = self.m

        resid = rhs - coeffs @ self.structural_values()
        signs = np.where(resid >= 0.0, 1.0, -1.0)

        self.a = np.vstack([self.a, coeffs]) if m_old else coeffs.copy()
        self.b = np.concatenate([self.b, rhs])
        self.band = np.concatenate([self.band, bands])
        self.m += k

        if m_old == 0:
            self.binv = np.diag(signs)
        else:
            block = coeffs[:, np.where(self.kind == STRUCT, self.idx, 0)]
            block[:, self.kind != STRUCT] = 0.0
            top = np.hstack([self.binv, np.zeros((m_old, k))])
            bot = np.hstack([(-signs[:, None] * block) @ self.binv,
                             np.diag(signs)])
            self.binv = np.vstack([top, bot])
        rows = m_old + np.arange(k)
        self.kind = np.concatenate([
            self.kind,
            np.where(resid >= 0.0, ELASTIC_UP, ELASTIC_DOWN).astype(np.int8),
        ])
        self.idx = np.concatenate([self.idx, rows])
        self.xb = np.concatenate([self.xb, np.abs(resid)])
        self.slack_hi = np.concatenate([self.slack_hi,
                                        np.zeros(k, dtype=bool)])
        self.bs_slack = np.concatenate([self.bs_slack,
                                        np.zeros(k, dtype=bool)])
        self.bs_eup = np.concatenate([self.bs_eup, resid >= 0.0])
        self.bs_edn = np.concatenate([self.bs_edn, resid < 0.0])
        ones = np.ones(k)
        self.w_slack = np.concatenate([self.w_slack, ones])
        self.w_eup = np.concatenate([self.w_eup, ones])
        self.w_edn = np.concatenate([self.w_edn, ones])

    def set_band(self, row: int, rhs: float, band: float) -> None:
        """Move a row's right-hand side and slack range. The basis stays;
        any resulting bound violation triggers a cold start on solve."""
        self.b[row] = float(rhs)
        self.band[row] = float(band)

    # -- accessors ---------------------------------------------------------

    def duals(self) -> np.ndarray:
        return self._basic_costs() @ self.binv

    def structural_values(self) -> np.ndarray:
        xs = np.zeros(self.ns)
        mask = self.kind == STRUCT
        xs[self.idx[mask]] = self.xb[mask]
        return xs

    def elastic_mass(self) -> float:
        mask = self.kind >= ELASTIC_UP
        return float(np.maximum(self.xb[mask], 0.0).sum())

    def objective(self) -> float:
        return float(self._basic_costs() @ self.xb)

    def residual(self) -> float:
        if self.m == 0:
            return 0.0
        return float(np.abs(self._lhs() - self.b).max())

    # -- internals ---------------------------------------------------------

    def _basic_costs(self):
        cb = np.where(self.kind >= ELASTIC_UP, self.penalty, 0.0)
        mask = self.kind == STRUCT
        cb[mask] = self.cs[self.idx[mask]]
        return cb

    def _rest_rhs(self):
        """Right-hand side minus nonbasic columns at nonzero rest, which
        can only be slacks parked at their band."""
        hi = ~self.bs_slack & self.slack_hi
        return self.b - np.where(hi, self.band, 0.0)

    def _lhs(self):
        out = self.a @ self.structural_values()
        hi = ~self.bs_slack & self.slack_hi
        out += np.where(hi, self.band, 0.0)
        mask = self.kind == SLACK
        np.add.at(out, self.idx[mask], self.xb[mask])
        mask = self.kind == ELASTIC_UP
        np.add.at(out, self.idx[mask], self.xb[mask])
        mask = self.kind == ELASTIC_DOWN
        np.add.at(out, self.idx[mask], -self.xb[mask])
        return out

    def _reset_weights(self):
        self.w_struct[:] = 1.0
        self.w_slack[:] = 1.0
        self.w_eup[:] = 1.0
        self.w_edn[:] = 1.0

    def _cold_start(self):
        """All-elastic identity basis: structural columns and slacks to
        zero, each row held by the sign-matching elastic column."""
        self.slack_hi[:] = False
        resid = self.b.copy()
        signs = np.where(resid >= 0.0, 1.0, -1.0)
        self.kind = np.where(resid >= 0.0, ELASTIC_UP,
                             ELASTIC_DOWN).astype(np.int8)
        self.idx = np.arange(self.m, dtype=np.int64)
        self.binv = np.diag(signs)
        self.xb = np.abs(resid)
        self.bs_struct[:] = False
        self.bs_slack[:] = False
        self.bs_eup = resid >= 0.0
        self.bs_edn = resid < 0.0
        self._reset_weights()
        self._cold = False

    def _basis_matrix(self):
        mat = np.zeros((self.m, self.m))
        mask = self.kind == STRUCT
        mat[:, mask] = self.a[:, self.idx[mask]]
        rows = self.idx[~mask]
        vals = np.where(self.kind[~mask] == ELASTIC_DOWN, -1.0, 1.0)
        mat[rows, np.flatnonzero(~mask)] = vals
        return mat

    def _refresh(self) -> bool:
        """Recompute the inverse from scratch. Returns False when the
        recorded basis is numerically singular, which means a noise-level
        pivot slipped through and the basis must be rebuilt."""
        mat = self._basis_matrix()
        with np.errstate(all="ignore"):
            lu, piv = scipy.linalg.lu_factor(mat, check_finite=False)
        diag = np.abs(np.diag(lu))
        if diag.min() <= 1e-13 * max(diag.max(), 1.0):
            return False
        self.binv = scipy.linalg.lu_solve((lu, piv), np.eye(self.m))
        self._recompute_xb()
        return True

    def _recompute_xb(self):
        self.xb = self.binv @ self._rest_rhs()

    def _basic_caps(self):
        caps = np.full(self.m, np.inf)
        mask = self.kind == SLACK
        caps[mask] = self.band[self.idx[mask]]
        return caps

    def _entering_direction(self, kind, j):
        if kind == STRUCT:
            return self.binv @ self.a[:, j]
        col = self.binv[:, j].copy()
        return -col if kind == ELASTIC_DOWN else col

    # -- core --------------------------------------------------------------

    def solve(self, max_iter: int = 20000) -> int:
        if self.m == 0:
            return OPTIMAL
        if self._cold:
            self._cold_start()
        else:
            self._recompute_xb()
            if (not np.all(np.isfinite(self.xb))
                    or self.residual() > DRIFT_TOL):
                if not self._refresh():
                    self._cold_start()
            caps = self._basic_caps()
            if (not np.all(np.isfinite(self.xb))
                    or np.any(self.xb < -BOUND_SLACK)
                    or np.any(self.xb > caps + BOUND_SLACK)):
                self._cold_start()
        bland = False
        stall = 0
        stuck = 0
        for _ in range(max_iter):
            y = self.duals()
            rc_s = self.cs - y @ self.a
            rc_sl = -y
            rc_up = self.penalty - y
            rc_dn = self.penalty + y

            elig_s = ~self.bs_struct & (rc_s < -DUAL_TOL)
            elig_sl = ~self.bs_slack & (
                (~self.slack_hi & (rc_sl < -DUAL_TOL))
                | (self.slack_hi & (rc_sl > DUAL_TOL))
            )
            elig_up = ~self.bs_eup & (rc_up < -DUAL_TOL)
            elig_dn = ~self.bs_edn & (rc_dn < -DUAL_TOL)

            best = None
            for kind, elig, rc, w in (
                (STRUCT, elig_s, rc_s, self.w_struct),
                (SLACK, elig_sl, rc_sl, self.w_slack),
                (ELASTIC_UP, elig_up, rc_up, self.w_eup),
                (ELASTIC_DOWN, elig_dn, rc_dn, self.w_edn),
            ):
                cand = np.flatnonzero(elig)
                if len(cand) == 0:
                    continue
                if bland:
                    pick = int(cand[0])
                    score = -pick  # lowest index wins within a block
                else:
                    scores = rc[cand] ** 2 / w[cand]
                    at = int(np.argmax(scores))
                    pick = int(cand[at])
                    score = float(scores[at])
                if best is None or score > best[0]:
                    best = (score, kind, pick, float(rc[pick]))
            if best is None:
                return OPTIMAL
            _, ekind, j, rcj = best

            slack_down = ekind == SLACK and self.slack_hi[j]
            direction = -1.0 if slack_down else 1.0
            w_col = self._entering_direction(ekind, j)
            step = w_col * direction

            # Harris ratio test: pass one finds the most permissive step
            # under slightly relaxed bounds, pass two takes the largest
            # pivot among rows that fit inside it.
            caps = self._basic_caps()
            gap_hi = caps - self.xb
            with np.errstate(divide="ignore", invalid="ignore"):
                t_lo = np.where(step > PIVOT_TOL,
                                (self.xb + HARRIS_TOL) / step, np.inf)
                t_hi = np.where(step < -PIVOT_TOL,
                                (gap_hi + HARRIS_TOL) / -step, np.inf)
            t_relaxed = float(min(t_lo.min(initial=np.inf),
                                  t_hi.min(initial=np.inf)))
            t_max = self.band[j] if ekind == SLACK else np.inf

            if t_relaxed == np.inf and t_max == np.inf:
                raise SolverError("simplex direction unbounded")

            if t_max <= t_relaxed:
                r, t, flip = -1, float(t_max), True
            else:
                allowed = np.minimum(t_lo, t_hi) <= t_relaxed
                rows = np.flatnonzero(allowed)
                r = int(rows[np.argmax(np.abs(step[rows]))])
                noise = max(PIVOT_TOL, 1e-9 * float(np.abs(step).max()))
                if abs(step[r]) < noise:
                    stuck += 1
                    if stuck > 4:
                        raise SolverError("simplex pivot stuck near zero")
                    if not self._refresh():
                        self._cold_start()
                    continue
                exact = (self.xb[r] / step[r] if step[r] > 0.0
                         else (gap_hi[r] - 0.0) / -step[r])
                t = float(max(exact, 0.0))
                flip = False
                if t_max <= t:
                    t, flip = float(t_max), True

            gain = abs(rcj) * t
            if t > 0.0:
                self.xb = self.xb - step * t
            enter_val = (self.band[j] if slack_down else 0.0) + direction * t

            if flip:
                self.slack_hi[j] = not self.slack_hi[j]
                stuck = 0
            else:
                alpha = w_col[r]
                out_kind = int(self.kind[r])
                out_idx = int(self.idx[r])
                hit_hi = bool(t_hi[r] <= t_lo[r])
                if out_kind == STRUCT:
                    self.bs_struct[out_idx] = False
                elif out_kind == SLACK:
                    self.bs_slack[out_idx] = False
                    self.slack_hi[out_idx] = hit_hi
                elif out_kind == ELASTIC_UP:
                    self.bs_eup[out_idx] = False
                else:
                    self.bs_edn[out_idx] = False

                pr = self.binv[r] / alpha
                if not bland:
                    self._devex_update(ekind, j, pr, alpha, r,
                                       out_kind, out_idx)
                self.binv -= np.outer(w_col, pr)
                self.binv[r] = pr

                self.kind[r] = ekind
                self.idx[r] = j
                self.xb[r] = enter_val
                if ekind == STRUCT:
                    self.bs_struct[j] = True
                elif ekind == SLACK:
                    self.bs_slack[j] = True
                elif ekind == ELASTIC_UP:
                    self.bs_eup[j] = True
                else:
                    self.bs_edn[j] = True
                self._pivots += 1
                stuck = 0
                if self._pivots % REFRESH_EVERY == 0:
                    if not self._refresh():
                        self._cold_start()

            if gain > DUAL_TOL:
                stall = 0
                bland = False
            else:
                stall += 1
                if stall == STALL_LIMIT:
                    bland = True
                elif stall > STALL_LIMIT + 2000:
                    raise SolverError("simplex stalled without progress")
        return ITERATION_LIMIT

    def _devex_update(self, ekind, j, pr, alpha, r, out_kind, out_idx):
        """Forrest-Goldfarb reference-framework update after a basis pivot."""
        wj = {STRUCT: self.w_struct, SLACK: self.w_slack,
              ELASTIC_UP: self.w_eup, ELASTIC_DOWN: self.w_edn}[ekind][j]
        if wj > WEIGHT_RESET:
            self._reset_weights()
            return
        ratio = wj / (alpha * alpha)
        ar = pr @ self.a
        np.maximum(self.w_struct, ar * ar * ratio, out=self.w_struct)
        pr2 = pr * pr * ratio
        np.maximum(self.w_slack, pr2, out=self.w_slack)
        np.maximum(self.w_eup, pr2, out=self.w_eup)
        np.maximum(self.w_edn, pr2, out=self.w_edn)
        w_out = max(ratio, 1.0)
        if out_kind == STRUCT:
            self.w_struct[out_idx] = w_out
        elif out_kind == SLACK:
            self.w_slack[out_idx] = w_out
        elif out_kind == ELASTIC_UP:
            self.w_eup[out_idx] = w_out
        else:
            self.w_edn[out_idx] = w_out
