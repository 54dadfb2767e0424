"""System topology, global DoF numbering, truth assembly and solve.

A system is a list of placed component instances plus a list of global
ports. Each global port carries one or two (component, local-port)
incidences; single-incidence ports are boundary ports and may hold a
constant Dirichlet temperature. Placements are quarter-turn rotations plus
translations, which leave every integrand invariant, so the physics only
sees the per-patch scalings; placements matter for port conformity checks.

Global DoF order: the bubble block of every component (in component order),
then one 17-DoF block per global port. Dirichlet-port DoF are kept in the
full state vector but excluded from the unknowns.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import physics
from .components import (
    ArchetypeComponent,
    build_archetype,
    physical_nodes,
    quad_geometry,
)
from .errors import ConfigError, GeometryError, SolverError
from .fem import NewtonConfig, extreme_eigs_sym, newton_solve

# quarter-turn rotation matrices, counterclockwise
ROTATIONS = [
    np.array([[1.0, 0.0], [0.0, 1.0]]),
    np.array([[0.0, -1.0], [1.0, 0.0]]),
    np.array([[-1.0, 0.0], [0.0, -1.0]]),
    np.array([[0.0, 1.0], [-1.0, 0.0]]),
]

PORT_MATCH_TOL = 1e-10


@dataclass(frozen=True)
class ComponentInstance:
    kind: str
    mu: tuple          # (mu1, mu2, mu3)
    rotation: int = 0  # quarter turns
    translation: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class GlobalPort:
    incidences: tuple   # ((comp, port),) or ((comp, port), (comp, port))
    dirichlet: float | None = None


@dataclass
class SystemTopology:
    components: list
    global_ports: list

    @property
    def n_components(self) -> int:
        return len(self.components)


def placed_nodes(arch: ArchetypeComponent, inst: ComponentInstance) -> np.ndarray:
    """Physical node coordinates of one instance."""
    rot = ROTATIONS[inst.rotation % 4]
    return physical_nodes(arch, inst.mu) @ rot.T + np.asarray(inst.translation)


@dataclass
class GlobalDofMap:
    topo: SystemTopology
    arch: dict                  # kind -> ArchetypeComponent
    insts: list                 # arch object per component (by index)
    comp_dofs: list             # per component: (N_c,) global full-dof ids
    n_full: int
    n_bubble_total: int
    unknown_idx: np.ndarray     # full-dof ids of the unknowns, ascending
    full_to_unknown: np.ndarray  # (n_full,) unknown id or -1
    dirichlet_vals: np.ndarray  # (n_full,) prescribed values (0 where unknown)
    geo: list = field(repr=False, default=None)  # per comp: (cxx, cyy, cm) at qp

    @property
    def n_unknown(self) -> int:
        return len(self.unknown_idx)

    def full_state(self, u: np.ndarray) -> np.ndarray:
        """Expand an unknown vector to the full DoF vector (Dirichlet set)."""
        x = self.dirichlet_vals.copy()
        x[self.unknown_idx] = u
        return x

    def restrict(self, full_vec: np.ndarray) -> np.ndarray:
        return full_vec[self.unknown_idx]


def _check_port_conformity(name_a, nodes_a, name_b, nodes_b):
    """Return True if b runs opposite to a; raise if the ports do not
    coincide node-by-node."""
    if len(nodes_a) != len(nodes_b):
        raise GeometryError(
            f"ports {name_a} and {name_b} have different DoF counts"
        )
    if np.abs(nodes_a - nodes_b).max() < PORT_MATCH_TOL:
        return False
    if np.abs(nodes_a - nodes_b[::-1]).max() < PORT_MATCH_TOL:
        return True
    raise GeometryError(
        f"connected ports do not coincide: {name_a} vs {name_b} "
        f"(max gap {np.abs(nodes_a - nodes_b).max():.2e})"
    )


def build_dof_map(topo: SystemTopology, refinement: int = 1) -> GlobalDofMap:
    """Validate the topology and number the global DoF."""
    arch = {}
    insts = []
    for inst in topo.components:
        if inst.kind not in arch:
            arch[inst.kind] = build_archetype(inst.kind, refinement)
        insts.append(arch[inst.kind])

    seen = {}
    for g, port in enumerate(topo.global_ports):
        if len(port.incidences) not in (1, 2):
            raise ConfigError(f"global port {g}: needs 1 or 2 incidences")
        for c, p in port.incidences:
            if not (0 <= c < len(topo.components)):
                raise ConfigError(f"global port {g}: component {c} out of range")
            if not (0 <= p < len(insts[c].ports)):
                raise ConfigError(f"global port {g}: port {p} out of range")
            if (c, p) in seen:
                raise ConfigError(
                    f"local port ({c},{p}) appears in global ports "
                    f"{seen[(c, p)]} and {g}"
                )
            seen[(c, p)] = g
        if len(port.incidences) == 2 and port.dirichlet is not None:
            raise ConfigError(f"global port {g}: shared port cannot be Dirichlet")
    for c, a in enumerate(insts):
        for p in range(len(a.ports)):
            if (c, p) not in seen:
                raise ConfigError(
                    f"component {c} ({a.kind}) port {p} not in any global port"
                )

    coords = [placed_nodes(a, inst) for a, inst in zip(insts, topo.components)]

    bubble_offsets = []
    off = 0
    for a in insts:
        bubble_offsets.append(off)
        off += a.n_bubble
    n_bubble_total = off

    port_dofs = insts[0].ports[0].n_dofs if insts else 0
    comp_dofs = [np.full(a.n_nodes, -1, dtype=np.int64) for a in insts]
    for c, a in enumerate(insts):
        comp_dofs[c][a.bubble_nodes] = bubble_offsets[c] + np.arange(a.n_bubble)

    dirichlet = {}
    for g, port in enumerate(topo.global_ports):
        block = n_bubble_total + g * port_dofs + np.arange(port_dofs)
        (c0, p0) = port.incidences[0]
        n0 = insts[c0].ports[p0].nodes
        comp_dofs[c0][n0] = block
        if len(port.incidences) == 2:
            (c1, p1) = port.incidences[1]
            n1 = insts[c1].ports[p1].nodes
            flip = _check_port_conformity(
                f"{insts[c0].kind}[{c0}].{insts[c0].ports[p0].name}",
                coords[c0][n0],
                f"{insts[c1].kind}[{c1}].{insts[c1].ports[p1].name}",
                coords[c1][n1],
            )
            comp_dofs[c1][n1[::-1] if flip else n1] = block
        elif port.dirichlet is not None:
            dirichlet[g] = float(port.dirichlet)

    n_full = n_bubble_total + len(topo.global_ports) * port_dofs
    full_is_unknown = np.ones(n_full, dtype=bool)
    dirichlet_vals = np.zeros(n_full)
    for g, val in dirichlet.items():
        block = n_bubble_total + g * port_dofs + np.arange(port_dofs)
        full_is_unknown[block] = False
        dirichlet_vals[block] = val
    unknown_idx = np.nonzero(full_is_unknown)[0]
    full_to_unknown = np.full(n_full, -1, dtype=np.int64)
    full_to_unknown[unknown_idx] = np.arange(len(unknown_idx))

    geo = [quad_geometry(a, inst.mu) for a, inst in zip(insts, topo.components)]

    return GlobalDofMap(
        topo=topo,
        arch=arch,
        insts=insts,
        comp_dofs=comp_dofs,
        n_full=n_full,
        n_bubble_total=n_bubble_total,
        unknown_idx=unknown_idx,
        full_to_unknown=full_to_unknown,
        dirichlet_vals=dirichlet_vals,
        geo=geo,
    )


def assemble_truth(topo: SystemTopology, dmap: GlobalDofMap, state: np.ndarray,
                   k_fn=None, dk_fn=None, jacobian: bool = True):
    """Residual and Jacobian at the given full state, restricted to the
    unknowns. ``k_fn``/``dk_fn`` override the conductivity (test hooks)."""
    k_fn = k_fn or physics.conductivity
    dk_fn = dk_fn or physics.conductivity_derivative
    state = np.asarray(state, dtype=float)
    if state.shape != (dmap.n_full,):
        raise ValueError(f"state has shape {state.shape}, expected ({dmap.n_full},)")

    r_full = np.zeros(dmap.n_full)
    rows, cols, vals = [], [], []
    for c, (a, inst) in enumerate(zip(dmap.insts, topo.components)):
        dofs = dmap.comp_dofs[c]
        w = state[dofs]
        q = a.quad
        cxx, cyy, cm = dmap.geo[c]
        wq = q.phi @ w
        wx = q.gx @ w
        wy = q.gy @ w
        k = k_fn(wq)
        fx = q.weights * cxx * k * wx
        fy = q.weights * cyy * k * wy
        src = q.weights * cm * inst.mu[2]
        r_c = q.gx.T @ fx + q.gy.T @ fy - q.phi.T @ src
        np.add.at(r_full, dofs, r_c)

        if jacobian:
            kp = dk_fn(wq)
            d = scipy.sparse.diags
            j_c = (
                q.gx.T @ d(q.weights * cxx * k) @ q.gx
                + q.gy.T @ d(q.weights * cyy * k) @ q.gy
                + q.gx.T @ d(q.weights * cxx * kp * wx) @ q.phi
                + q.gy.T @ d(q.weights * cyy * kp * wy) @ q.phi
            ).tocoo()
            rows.append(dofs[j_c.row])
            cols.append(dofs[j_c.col])
            vals.append(j_c.data)

    r = r_full[dmap.unknown_idx]
    if not jacobian:
        return r, None
    rows = dmap.full_to_unknown[np.concatenate(rows)]
    cols = dmap.full_to_unknown[np.concatenate(cols)]
    vals = np.concatenate(vals)
    keep = (rows >= 0) & (cols >= 0)
    n = dmap.n_unknown
    jac = scipy.sparse.coo_matrix(
        (vals[keep], (rows[keep], cols[keep])), shape=(n, n)
    ).tocsr()
    return r, jac


def evaluate_output(dmap: GlobalDofMap, state: np.ndarray) -> float:
    """System output: the domain integral of the temperature field."""
    total = 0.0
    for c, a in enumerate(dmap.insts):
        w = state[dmap.comp_dofs[c]]
        cm = dmap.geo[c][2]
        total += a.quad.weights * cm @ (a.quad.phi @ w)
    return float(total)


@dataclass
class TruthResult:
    state: np.ndarray    # full DoF vector
    iters: int
    history: list
    seconds: float


def _mean_dirichlet(dmap: GlobalDofMap) -> float:
    mask = np.ones(dmap.n_full, dtype=bool)
    mask[dmap.unknown_idx] = False
    if not mask.any():
        raise ConfigError("system has no Dirichlet port; problem is singular")
    return float(dmap.dirichlet_vals[mask].mean())


def initial_guess(topo: SystemTopology, dmap: GlobalDofMap) -> np.ndarray:
    """Unknown start values from one linear solve with the conductivity
    frozen at the mean Dirichlet temperature."""
    t_mean = _mean_dirichlet(dmap)
    k_bar = physics.conductivity(t_mean)
    x0 = dmap.full_state(np.full(dmap.n_unknown, t_mean))
    r, jac = assemble_truth(
        topo, dmap, x0, k_fn=lambda w: np.full_like(w, k_bar),
        dk_fn=lambda w: np.zeros_like(w),
    )
    try:
        du = scipy.sparse.linalg.splu(jac.tocsc()).solve(r)
    except RuntimeError as exc:
        raise SolverError(f"initial-guess linear solve failed: {exc}")
    return x0[dmap.unknown_idx] - du


def solve_truth(topo: SystemTopology, dmap: GlobalDofMap,
                newton: NewtonConfig | None = None) -> TruthResult:
    """Damped Newton on the truth system from the frozen-conductivity
    initial guess."""
    newton = newton or NewtonConfig()
    start = time.perf_counter()
    u0 = initial_guess(topo, dmap)

    def res_fn(u):
        r, _ = assemble_truth(topo, dmap, dmap.full_state(u), jacobian=False)
        return r

    def jac_fn(u):
        _, jac = assemble_truth(topo, dmap, dmap.full_state(u))
        return jac

    result = newton_solve(
        res_fn, jac_fn, u0, newton,
        linear_solve=lambda jac, r: scipy.sparse.linalg.splu(jac.tocsc()).solve(r),
    )
    return TruthResult(
        state=dmap.full_state(result.x),
        iters=result.iters,
        history=result.history,
        seconds=time.perf_counter() - start,
    )


def inner_product_matrix(dmap: GlobalDofMap) -> scipy.sparse.csr_matrix:
    """H1 inner product over the physical system domain, restricted to the
    unknowns, assembled from the per-patch affine decomposition."""
    from .components import geometric_map

    n = dmap.n_unknown
    rows, cols, vals = [], [], []
    for c, (a, inst) in enumerate(zip(dmap.insts, dmap.topo.components)):
        gmap = geometric_map(a, inst.mu)
        v_c = None
        for p in range(a.n_patches):
            ax, ay = gmap.scales[p]
            term = (
                (ay / ax) * a.kxx_patch[p]
                + (ax / ay) * a.kyy_patch[p]
                + (ax * ay) * a.mass_patch[p]
            )
            v_c = term if v_c is None else v_c + term
        v_c = v_c.tocoo()
        dofs = dmap.comp_dofs[c]
        rows.append(dofs[v_c.row])
        cols.append(dofs[v_c.col])
        vals.append(v_c.data)
    rows = dmap.full_to_unknown[np.concatenate(rows)]
    cols = dmap.full_to_unknown[np.concatenate(cols)]
    vals = np.concatenate(vals)
    keep = (rows >= 0) & (cols >= 0)
    return scipy.sparse.coo_matrix(
        (vals[keep], (rows[keep], cols[keep])), shape=(n, n)
    ).tocsr()


def h1_norm(dmap: GlobalDofMap, state_a, state_b=None, vmat=None) -> float:
    """H1 norm of a full state (or of the difference of two) over the
    unknown DoF; Dirichlet DoF cancel in differences by construction."""
    if vmat is None:
        vmat = inner_product_matrix(dmap)
    x = np.asarray(state_a, dtype=float)
    if state_b is not None:
        x = x - np.asarray(state_b, dtype=float)
    xu = x[dmap.unknown_idx]
    return float(np.sqrt(xu @ (vmat @ xu)))


def extreme_eigs(vmat, tol: float = 1e-8):
    """Extreme eigenvalues of an SPD inner-product matrix."""
    return extreme_eigs_sym(vmat, tol=tol)


# ---- fin systems ----------------------------------------------------------


def fin_parameter_count(n_fin: int) -> int:
    return n_fin**2 + 4


def build_fin_topology(n_fin: int, widths_h, widths_v, rod_length,
                       sources) -> SystemTopology:
    """An n x n thermal fin: a (n+1) x (n+1) grid of junctions (corner
    brackets, edge and interior crosses) joined by 2n(n+1) rods of one
    shared length. Interior crosses carry the volumetric sources; the free
    ports of the edge crosses hold the four Dirichlet groups (left 25 K,
    right 125 K, bottom 275 K, top 100 K)."""
    n = int(n_fin)
    if n < 2:
        raise ConfigError("n_fin must be >= 2")
    th = np.asarray(widths_h, dtype=float)
    tv = np.asarray(widths_v, dtype=float)
    src = np.asarray(sources, dtype=float)
    if th.shape != (n + 1,) or tv.shape != (n + 1,):
        raise ConfigError(
            f"fin widths must have shape ({n + 1},), got {th.shape} and {tv.shape}"
        )
    if src.shape != (n - 1, n - 1):
        raise ConfigError(
            f"fin sources must have shape ({n - 1}, {n - 1}), got {src.shape}"
        )
    L = float(rod_length)
    if not (3.0 <= L <= 6.0):
        raise ConfigError(f"rod length {L} outside [3, 6]")
    if th.min() < 0.5 or th.max() > 1.0 or tv.min() < 0.5 or tv.max() > 1.0:
        raise ConfigError("fin widths must lie in [0.5, 1]")
    if src.size and (src.min() < 0.0 or src.max() > 10.0):
        raise ConfigError("fin sources must lie in [0, 10]")

    # junction frame origins (cross frames; brackets are shifted inside)
    xs = np.zeros(n + 1)
    ys = np.zeros(n + 1)
    for i in range(n):
        xs[i + 1] = xs[i] + tv[i] + 2.0 + L
    for j in range(n):
        ys[j + 1] = ys[j] + th[j] + 2.0 + L

    components = []
    junction_id = {}

    # direction -> local port index, per junction placement
    # cross (rotation 0) ports: left, right, bottom, top = 0..3
    cross_dir = {"left": 0, "right": 1, "down": 2, "up": 3}
    # corner brackets: ports end_h = 0 (width mu1), end_v = 1 (width mu2)
    corner_spec = {
        (0, 0): dict(rotation=0, dirs={"right": 0, "up": 1}),
        (1, 0): dict(rotation=1, dirs={"up": 0, "left": 1}),
        (1, 1): dict(rotation=2, dirs={"left": 0, "down": 1}),
        (0, 1): dict(rotation=3, dirs={"down": 0, "right": 1}),
    }

    port_dirs = []  # per component: direction -> local port id (junctions only)
    for j in range(n + 1):
        for i in range(n + 1):
            corner = (i in (0, n)) and (j in (0, n))
            junction_id[(i, j)] = len(components)
            if corner:
                spec = corner_spec[(i // n, j // n)]
                rot = spec["rotation"]
                trans = {
                    0: (xs[i] + 1.0, ys[j] + 1.0),
                    1: (xs[i] + tv[i] + 1.0, ys[j] + 1.0),
                    2: (xs[i] + tv[i] + 1.0, ys[j] + th[j] + 1.0),
                    3: (xs[i] + 1.0, ys[j] + th[j] + 1.0),
                }[rot]
                mu12 = {
                    0: (th[j], tv[i]),
                    1: (tv[i], th[j]),
                    2: (th[j], tv[i]),
                    3: (tv[i], th[j]),
                }[rot]
                components.append(
                    ComponentInstance("bracket", (*mu12, 0.0), rot, trans)
                )
                port_dirs.append(spec["dirs"])
            else:
                interior = (0 < i < n) and (0 < j < n)
                mu3 = src[i - 1, j - 1] if interior else 0.0
                components.append(
                    ComponentInstance(
                        "cross", (th[j], tv[i], mu3), 0, (xs[i], ys[j])
                    )
                )
                port_dirs.append(cross_dir)

    h_rod = {}
    for j in range(n + 1):
        for i in range(n):
            h_rod[(i, j)] = len(components)
            components.append(
                ComponentInstance(
                    "rod", (L, th[j], 0.0), 0,
                    (xs[i] + 2.0 + tv[i], ys[j] + 1.0),
                )
            )
    v_rod = {}
    for i in range(n + 1):
        for j in range(n):
            v_rod[(i, j)] = len(components)
            components.append(
                ComponentInstance(
                    "rod", (L, tv[i], 0.0), 1,
                    (xs[i] + 1.0 + tv[i], ys[j] + 2.0 + th[j]),
                )
            )

    ports = []
    for j in range(n + 1):
        for i in range(n):
            rod = h_rod[(i, j)]
            a = junction_id[(i, j)]
            b = junction_id[(i + 1, j)]
            ports.append(GlobalPort(((a, port_dirs[a]["right"]), (rod, 0))))
            ports.append(GlobalPort(((rod, 1), (b, port_dirs[b]["left"]))))
    for i in range(n + 1):
        for j in range(n):
            rod = v_rod[(i, j)]
            a = junction_id[(i, j)]
            b = junction_id[(i, j + 1)]
            ports.append(GlobalPort(((a, port_dirs[a]["up"]), (rod, 0))))
            ports.append(GlobalPort(((rod, 1), (b, port_dirs[b]["down"]))))

    edge_bc = [
        (lambda i, j: i == 0 and 0 < j < n, "left", 25.0),
        (lambda i, j: i == n and 0 < j < n, "right", 125.0),
        (lambda i, j: j == 0 and 0 < i < n, "down", 275.0),
        (lambda i, j: j == n and 0 < i < n, "up", 100.0),
    ]
    for j in range(n + 1):
        for i in range(n + 1):
            for pred, direction, value in edge_bc:
                if pred(i, j):
                    c = junction_id[(i, j)]
                    ports.append(
                        GlobalPort(((c, port_dirs[c][direction]),), dirichlet=value)
                    )

    topo = SystemTopology(components, ports)
    expected = (3 * n + 1) * (n + 1)
    if topo.n_components != expected:
        raise ConfigError(
            f"fin build produced {topo.n_components} components, "
            f"expected {expected}"
        )
    return topo


def random_fin_parameters(n_fin: int, rng: np.random.Generator) -> dict:
    """Uniform draws over the fin parameter box, in a fixed order."""
    return dict(
        widths_h=rng.uniform(0.5, 1.0, n_fin + 1),
        widths_v=rng.uniform(0.5, 1.0, n_fin + 1),
        rod_length=float(rng.uniform(3.0, 6.0)),
        sources=rng.uniform(0.0, 10.0, (n_fin - 1, n_fin - 1)),
    )
