"""Online stage: assemble and solve reduced systems from a trained library.

Reduced DoF order mirrors the truth one: the bubble-coefficient block of
every component in order, then one 17-coefficient block per global port.
Port blocks are shared between the two components of an interior port; when
a component sees the port with reversed orientation its local coefficients
are the global ones times the mode parity signs, so gather and scatter are
index maps plus a sign vector and conformity costs nothing online.

Two assembly routes exist on purpose: the RB route sums over the truth
quadrature of each component, the hyperreduced route only ever touches the
tabulated values at its rule's points. Handing the hyperreduced route a
rule holding the full truth quadrature must reproduce the RB numbers; that
equivalence is a test fixture, not something the solver relies on.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .assembly import GlobalDofMap, SystemTopology, _check_port_conformity, placed_nodes
from .components import split_bubble_port
from .eqp import QuadRule
from .errors import ConfigError, ConvergenceError, SolverError
from .fem import NewtonConfig, extreme_eigs_sym, min_singular_value, newton_solve
from .library import Library
from .reduced import component_operator, port_parity, reduced_inner_product

PORT_DOFS = 17


@dataclass
class _CompMap:
    """Gather/scatter data for one component instance."""

    entry: object               # LibraryEntry
    idx: np.ndarray             # (n_loc,) local dof -> full reduced dof
    signs: np.ndarray           # (n_loc,) +-1, parity on flipped ports


@dataclass
class ReducedSystem:
    """A topology bound to a trained library, ready to assemble."""

    topo: SystemTopology
    lib: Library
    comps: list                 # _CompMap per component
    n_full: int
    n_bubble_total: int
    unknown_idx: np.ndarray
    dirichlet_vals: np.ndarray  # (n_full,) port blocks already times dir_coeff
    deltas: dict = field(default_factory=dict)  # kind -> delta, empty = RB only

    @property
    def n_unknown(self) -> int:
        return len(self.unknown_idx)

    def full_state(self, u: np.ndarray) -> np.ndarray:
        x = self.dirichlet_vals.copy()
        x[self.unknown_idx] = u
        return x

    def restrict(self, x: np.ndarray) -> np.ndarray:
        return x[self.unknown_idx]

    def local_state(self, c: int, x: np.ndarray) -> np.ndarray:
        cm = self.comps[c]
        return cm.signs * x[cm.idx]

    def select(self, delta: float) -> "ReducedSystem":
        """Use the rules trained at ``delta`` for every component."""
        for kind in {inst.kind for inst in self.topo.components}:
            self.lib[kind].rule(delta)  # raises if missing
        self.deltas = {inst.kind: float(delta) for inst in self.topo.components}
        return self

    def select_per_kind(self, deltas: dict) -> "ReducedSystem":
        for kind, d in deltas.items():
            self.lib[kind].rule(d)
        self.deltas = dict(deltas)
        return self


def build_reduced_system(topo: SystemTopology, lib: Library) -> ReducedSystem:
    """Number the reduced DoF and resolve port orientations."""
    entries = []
    for inst in topo.components:
        entries.append(lib[inst.kind])

    coords = [placed_nodes(e.ra.comp, inst)
              for e, inst in zip(entries, topo.components)]

    bubble_offsets = []
    off = 0
    for e in entries:
        bubble_offsets.append(off)
        off += e.ra.n_bubble_modes
    n_bubble_total = off
    n_full = n_bubble_total + len(topo.global_ports) * PORT_DOFS

    idx = [np.full(e.ra.n_loc, -1, dtype=np.int64) for e in entries]
    signs = [np.ones(e.ra.n_loc) for e in entries]
    for c, e in enumerate(entries):
        idx[c][: e.ra.n_bubble_modes] = bubble_offsets[c] + np.arange(
            e.ra.n_bubble_modes
        )

    dirichlet_vals = np.zeros(n_full)
    full_is_unknown = np.ones(n_full, dtype=bool)
    for g, port in enumerate(topo.global_ports):
        block = n_bubble_total + g * PORT_DOFS + np.arange(PORT_DOFS)
        c0, p0 = port.incidences[0]
        e0 = entries[c0]
        idx[c0][e0.ra.port_block(p0)] = block
        if len(port.incidences) == 2:
            c1, p1 = port.incidences[1]
            e1 = entries[c1]
            n0 = e0.ra.comp.ports[p0].nodes
            n1 = e1.ra.comp.ports[p1].nodes
            flip = _check_port_conformity(
                f"{e0.kind}[{c0}]", coords[c0][n0],
                f"{e1.kind}[{c1}]", coords[c1][n1],
            )
            idx[c1][e1.ra.port_block(p1)] = block
            if flip:
                signs[c1][e1.ra.port_block(p1)] = e1.ra.parity
        elif port.dirichlet is not None:
            full_is_unknown[block] = False
            dirichlet_vals[block] = port.dirichlet * e0.ra.dir_coeff

    comps = [
        _CompMap(entry=e, idx=i, signs=s)
        for e, i, s in zip(entries, idx, signs)
    ]
    if any((i < 0).any() for i in idx):
        raise ConfigError("component has a port in no global port")
    return ReducedSystem(
        topo=topo,
        lib=lib,
        comps=comps,
        n_full=n_full,
        n_bubble_total=n_bubble_total,
        unknown_idx=np.nonzero(full_is_unknown)[0],
        dirichlet_vals=dirichlet_vals,
    )


# -- assembly ----------------------------------------------------------------


def _operators(sys: ReducedSystem, hyperreduced: bool, rule_override=None):
    """One bound operator per component; the hyperreduced route slices the
    tabulated values down to the selected rule's points."""
    ops = []
    for cm, inst in zip(sys.comps, sys.topo.components):
        if hyperreduced:
            if rule_override is not None:
                rule = rule_override
            else:
                if inst.kind not in sys.deltas:
                    raise ConfigError(
                        f"no delta selected for {inst.kind}; call select()"
                    )
                rule = cm.entry.rule(sys.deltas[inst.kind])
            op = component_operator(cm.entry.ra, inst.mu,
                                    weights=rule.weights,
                                    point_idx=rule.point_idx)
        else:
            op = component_operator(cm.entry.ra, inst.mu)
        ops.append(op)
    return ops


def _assemble(sys: ReducedSystem, x_full: np.ndarray, ops):
    n = sys.n_full
    res = np.zeros(n)
    jac = np.zeros((n, n))
    for c, (cm, op) in enumerate(zip(sys.comps, ops)):
        w = cm.signs * x_full[cm.idx]
        r = op.residual(w)
        j = op.jacobian(w)
        res[cm.idx] += cm.signs * r
        jac[np.ix_(cm.idx, cm.idx)] += (cm.signs[:, None] * cm.signs) * j
    return res, jac


def assemble_rb(sys: ReducedSystem, x_full: np.ndarray):
    """Residual and Jacobian over the truth quadrature of every component."""
    return _assemble(sys, x_full, _operators(sys, hyperreduced=False))


def assemble_hrbe(sys: ReducedSystem, x_full: np.ndarray, rule_override=None):
    """Residual and Jacobian over the selected sparse rules only.

    ``rule_override`` substitutes one rule for every component (test hook;
    with a full-quadrature rule this must match assemble_rb).
    """
    return _assemble(
        sys, x_full, _operators(sys, hyperreduced=True,
                                rule_override=rule_override)
    )


def inner_product_reduced(sys: ReducedSystem) -> np.ndarray:
    """The H1 inner product on reduced coordinates (full DoF numbering)."""
    v = np.zeros((sys.n_full, sys.n_full))
    for cm, inst in zip(sys.comps, sys.topo.components):
        vl = reduced_inner_product(cm.entry.ra, inst.mu)
        v[np.ix_(cm.idx, cm.idx)] += (cm.signs[:, None] * cm.signs) * vl
    return v


def h1_norm_reduced(sys: ReducedSystem, x_full: np.ndarray,
                    vmat: np.ndarray | None = None) -> float:
    v = inner_product_reduced(sys) if vmat is None else vmat
    return float(np.sqrt(max(x_full @ (v @ x_full), 0.0)))


def norm_lambdas(sys: ReducedSystem, vmat: np.ndarray | None = None):
    """Extreme eigenvalues of the inner product on the unknown block: the
    constants tying coordinate 2-norms to H1 norms. Geometry-only."""
    v = inner_product_reduced(sys) if vmat is None else vmat
    vu = v[np.ix_(sys.unknown_idx, sys.unknown_idx)]
    return extreme_eigs_sym(vu)


def evaluate_output_rb(sys: ReducedSystem, x_full: np.ndarray) -> float:
    """Integrated temperature over the system, truth quadrature."""
    ops = _operators(sys, hyperreduced=False)
    return sum(
        op.output(sys.local_state(c, x_full)) for c, op in enumerate(ops)
    )


def evaluate_output_hrbe(sys: ReducedSystem, x_full: np.ndarray) -> float:
    """Integrated temperature through each component's output rule."""
    total = 0.0
    for c, (cm, inst) in enumerate(zip(sys.comps, sys.topo.components)):
        if inst.kind not in sys.deltas:
            raise ConfigError(f"no delta selected for {inst.kind}")
        rule = cm.entry.output_rule(sys.deltas[inst.kind])
        op = component_operator(cm.entry.ra, inst.mu,
                                weights=rule.weights,
                                point_idx=rule.point_idx)
        total += op.output(sys.local_state(c, x_full))
    return total


# -- solves ------------------------------------------------------------------


@dataclass
class BrrEstimate:
    sigma: float                 # half the hyperreduced-Jacobian sigma_min
    delta_r: dict                # kind -> residual tolerance in the bound
    delta_j: dict
    alpha: float                 # error radius in coordinate 2-norm
    lam_min: float
    lam_max: float
    mode: str                    # "absolute" | "relative"
    epsilon: float | None = None


@dataclass
class SolveReport:
    x_full: np.ndarray
    iters: int
    history: list
    wall_time: float
    route: str                   # "rb" | "hrbe"
    deltas: dict = field(default_factory=dict)
    brr: BrrEstimate | None = None
    loop_iters: int = 0
    error_vs_reference: float | None = None

    @property
    def final_residual(self) -> float:
        return self.history[-1] if self.history else float("nan")


def _initial_guess(sys: ReducedSystem) -> np.ndarray:
    """Roughly constant temperature at the mean Dirichlet value: port blocks
    carry the constant's trace coefficients, bubble blocks its projection
    onto the bubble modes."""
    vals = [p.dirichlet for p in sys.topo.global_ports if p.dirichlet is not None]
    if not vals:
        raise ConfigError("system has no Dirichlet port; problem is singular")
    t0 = float(np.mean(vals))
    x = sys.full_state(np.zeros(sys.n_unknown))
    for cm in sys.comps:
        ra = cm.entry.ra
        nb = ra.n_bubble_modes
        split = split_bubble_port(ra.comp, np.ones(ra.comp.n_nodes),
                                 ra.port_basis)
        proj = ra.bmat[:, :nb].T @ (ra.comp.h1_ref() @ split.bubble)
        x[cm.idx[:nb]] = t0 * proj
    free = sys.unknown_idx[sys.unknown_idx >= sys.n_bubble_total]
    blocks = (free - sys.n_bubble_total) % PORT_DOFS
    dir_coeff = sys.comps[0].entry.ra.dir_coeff
    x[free] = t0 * dir_coeff[blocks]
    return x


def _solve(sys: ReducedSystem, hyperreduced: bool,
           newton: NewtonConfig | None = None,
           x0_full: np.ndarray | None = None) -> SolveReport:
    ops = _operators(sys, hyperreduced)
    t0 = time.perf_counter()

    def residual(u):
        x = sys.full_state(u)
        r = np.zeros(sys.n_full)
        for cm, op in zip(sys.comps, ops):
            r[cm.idx] += cm.signs * op.residual(cm.signs * x[cm.idx])
        return r[sys.unknown_idx]

    def jacobian(u):
        x = sys.full_state(u)
        jac = np.zeros((sys.n_full, sys.n_full))
        for cm, op in zip(sys.comps, ops):
            j = op.jacobian(cm.signs * x[cm.idx])
            jac[np.ix_(cm.idx, cm.idx)] += (cm.signs[:, None] * cm.signs) * j
        return jac[np.ix_(sys.unknown_idx, sys.unknown_idx)]

    x0 = _initial_guess(sys) if x0_full is None else x0_full
    result = newton_solve(residual, jacobian, sys.restrict(x0), newton,
                          linear_solve=scipy.linalg.solve)
    wall = time.perf_counter() - t0
    return SolveReport(
        x_full=sys.full_state(result.x),
        iters=result.iters,
        history=result.history,
        wall_time=wall,
        route="hrbe" if hyperreduced else "rb",
        deltas=dict(sys.deltas) if hyperreduced else {},
    )


def solve_rb(sys: ReducedSystem, newton: NewtonConfig | None = None,
             x0_full: np.ndarray | None = None) -> SolveReport:
    return _solve(sys, hyperreduced=False, newton=newton, x0_full=x0_full)


def solve_hrbe(sys: ReducedSystem, newton: NewtonConfig | None = None,
               x0_full: np.ndarray | None = None) -> SolveReport:
    return _solve(sys, hyperreduced=True, newton=newton, x0_full=x0_full)


def reduced_to_truth(sys: ReducedSystem, x_full: np.ndarray,
                     dmap: GlobalDofMap) -> np.ndarray:
    """Expand reduced coordinates to the truth nodal vector of the same
    topology. Shared port nodes are written from both sides; conformity
    makes the writes agree."""
    out = np.zeros(dmap.n_full)
    for c, cm in enumerate(sys.comps):
        w = sys.local_state(c, x_full)
        out[dmap.comp_dofs[c]] = cm.entry.ra.bmat @ w
    return out


# -- error bound -------------------------------------------------------------


def estimate_sigma(sys: ReducedSystem, x_full: np.ndarray) -> float:
    """Half the minimum singular value of the hyperreduced Jacobian on the
    unknown block; 0.0 when the Jacobian is numerically singular."""
    _, jac = assemble_hrbe(sys, x_full)
    ju = jac[np.ix_(sys.unknown_idx, sys.unknown_idx)]
    if not np.isfinite(ju).all():
        return 0.0
    return 0.5 * min_singular_value(ju)


def compute_brr_alpha(sigma: float, components) -> float:
    """Error radius from component tolerances: each entry of ``components``
    is (n_dofs, delta_r, delta_j) for one component instance."""
    num = 0.0
    den = sigma
    for n, dr, dj in components:
        num += 2.0 * np.sqrt(n) * dr
        den -= n * dj
    if den <= 0.0:
        raise SolverError(
            "Jacobian perturbation exceeds the singular-value margin "
            f"(denominator {den:.3e}); tighten the rules"
        )
    return num / den


def _bound_terms(sys: ReducedSystem, scale: float):
    """(n, delta_r, delta_j) per component with every tolerance scaled."""
    terms = []
    for cm, inst in zip(sys.comps, sys.topo.components):
        d = sys.deltas[inst.kind] * scale
        terms.append((cm.entry.ra.n_loc, d, d))
    return terms


def compute_effectivity(sys: ReducedSystem, rb_full: np.ndarray,
                        hrbe_full: np.ndarray, alpha: float,
                        lam_max: float) -> float:
    """Bound over true error in the H1 norm; inf (flagged by the caller)
    when the two states coincide."""
    err = h1_norm_reduced(sys, rb_full - hrbe_full)
    if err == 0.0:
        return float("inf")
    return alpha * np.sqrt(lam_max) / err


# -- adaptive rule selection -------------------------------------------------


def adaptive_solve(topo: SystemTopology, lib: Library, epsilon: float,
                   mode: str = "relative", initial_delta: float | None = None,
                   newton: NewtonConfig | None = None) -> SolveReport:
    """Walk the trained tolerance grid until the error bound meets epsilon.

    Each pass solves the HRBE problem at the current per-archetype
    tolerances, estimates the Jacobian singular-value margin from the
    hyperreduced Jacobian at that solution, and checks the two bound
    conditions. On failure the tolerances tighten: all one grid step when
    the margin itself is exceeded, otherwise the loosest levels (shared by
    all instances of an archetype, tightening the largest N*delta
    contributor first) that satisfy both conditions with the current
    margin. In relative mode tolerances are scaled by the 2-norm of the
    current solution's unknown coordinates.
    """
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    if mode not in ("absolute", "relative"):
        raise ConfigError(f"unknown error mode {mode!r}")
    sys = build_reduced_system(topo, lib)
    grid = [float(d) for d in sorted(lib.deltas, reverse=True)]
    if initial_delta is None:
        initial_delta = grid[0]
    if float(initial_delta) not in grid:
        raise ConfigError(
            f"initial delta {initial_delta:g} is not in the trained grid"
        )
    vmat = inner_product_reduced(sys)
    lam_min, lam_max = norm_lambdas(sys, vmat)
    if mode == "absolute":
        alpha_target = epsilon / np.sqrt(lam_max)
    else:
        alpha_target = epsilon / np.sqrt(lam_max / lam_min)

    kinds = sorted({inst.kind for inst in topo.components})
    counts = {k: sum(1 for i in topo.components if i.kind == k) for k in kinds}
    nloc = {k: lib[k].ra.n_loc for k in kinds}
    tightest = len(grid) - 1
    level = {k: grid.index(float(initial_delta)) for k in kinds}

    def sums(lv, scale):
        dj = sum(counts[k] * nloc[k] * grid[lv[k]] * scale for k in kinds)
        dr = sum(counts[k] * np.sqrt(nloc[k]) * grid[lv[k]] * scale
                 for k in kinds)
        return dj, dr

    def satisfied(lv, sigma, scale):
        dj, dr = sums(lv, scale)
        return dj < sigma and 2.0 * dr <= alpha_target * (sigma - dj)

    x_prev = None
    last_report = None
    for loop in range(1, len(grid) * len(kinds) + 3):
        sys.select_per_kind({k: grid[level[k]] for k in kinds})
        report = solve_hrbe(sys, newton=newton, x0_full=x_prev)
        x_prev = report.x_full
        last_report = report
        report.loop_iters = loop
        sigma = estimate_sigma(sys, report.x_full)
        if mode == "absolute":
            scale = 1.0
        else:
            scale = 1.0 / max(
                float(np.linalg.norm(sys.restrict(report.x_full))), 1e-300
            )
        if satisfied(level, sigma, scale):
            dj, dr = sums(level, scale)
            report.brr = BrrEstimate(
                sigma=sigma,
                delta_r={k: grid[level[k]] * scale for k in kinds},
                delta_j={k: grid[level[k]] * scale for k in kinds},
                alpha=2.0 * dr / (sigma - dj),
                lam_min=lam_min,
                lam_max=lam_max,
                mode=mode,
                epsilon=epsilon,
            )
            return report
        if all(level[k] == tightest for k in kinds):
            raise ConvergenceError(
                "tolerance grid exhausted without meeting the error bound "
                f"(sigma={sigma:.3e}, target alpha={alpha_target:.3e})",
                best=report,
            )
        dj, _ = sums(level, scale)
        if dj >= sigma:
            for k in kinds:
                level[k] = min(level[k] + 1, tightest)
        else:
            trial = dict(level)
            while not satisfied(trial, sigma, scale):
                open_kinds = [k for k in kinds if trial[k] < tightest]
                if not open_kinds:
                    break
                pick = max(
                    open_kinds,
                    key=lambda k: (counts[k] * nloc[k] * grid[trial[k]], k),
                )
                trial[pick] += 1
            level = trial
    raise ConvergenceError("adaptive tolerance selection did not settle",
                           best=last_report)
