"""Archetype components: reference meshes, parameterized piecewise-affine
geometry, port discretization, port eigenmode bases with elliptic lifting,
and the bubble/port splitting of component coefficient vectors.

Four archetypes are provided. All are unions of axis-aligned rectangular
blocks meshed with structured quadratic triangles; each block is one affine
patch of the geometric map. Widths of arms are the geometric parameters, so
every patch map is a diagonal scaling plus a shift:

    rod      a mu1 x mu2 rectangle, ports on the two short ends
    bracket  an L of two unit-length arms, widths mu1 (horizontal) and mu2
             (vertical), ports at the arm ends
    tee      a T: horizontal bar of width mu1 with a stem of width mu2,
             ports at the three arm ends
    cross    a plus of four unit-length arms, horizontal pair width mu1,
             vertical pair width mu2, four ports

Ports carry 8 quadratic line elements (17 DoF) at baseline refinement, and a
port's physical length always equals the width parameter of its arm.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import GeometryError, SolverError
from .fem import ReferenceElement, gauss_rule

TRUTH_QUAD_ORDER = 6  # 12-point triangle rule (conductivity integrands are
                      # not polynomial; degree 6 balances cost and accuracy)

ARCHETYPE_KINDS = ("rod", "bracket", "tee", "cross")

# Block layout per archetype: ((x0, x1), (y0, y1)) in reference coordinates,
# one patch per block, meshed with 8x8 cells per unit square at baseline
# (the rod uses 21 cells along its 4 cm length).
_BLOCKS = {
    "rod": [((0, 4), (0, 1))],
    "bracket": [((0, 1), (0, 1)), ((1, 2), (0, 1)), ((0, 1), (1, 2))],
    "tee": [((0, 1), (0, 1)), ((1, 2), (0, 1)), ((2, 3), (0, 1)),
            ((1, 2), (1, 2))],
    "cross": [((1, 2), (0, 1)), ((0, 1), (1, 2)), ((1, 2), (1, 2)),
              ((2, 3), (1, 2)), ((1, 2), (2, 3))],
}

# Patch-map coefficients: for each patch, rows (ax, ay, bx, by) of the affine
# map x = ax*xh + bx, y = ay*yh + by, each row as coefficients of
# (1, mu1, mu2). Identity at the reference parameters by construction.
_PATCH_COEFFS = {
    "rod": [
        [[0, 0.25, 0], [0, 0, 1], [0, 0, 0], [0, 0, 0]],
    ],
    "bracket": [
        # junction, horizontal arm, vertical arm
        [[0, 0, 1], [0, 1, 0], [0, 0, 0], [0, 0, 0]],
        [[1, 0, 0], [0, 1, 0], [-1, 0, 1], [0, 0, 0]],
        [[0, 0, 1], [1, 0, 0], [0, 0, 0], [-1, 1, 0]],
    ],
    "tee": [
        # left arm, junction, right arm, stem
        [[1, 0, 0], [0, 1, 0], [0, 0, 0], [0, 0, 0]],
        [[0, 0, 1], [0, 1, 0], [1, 0, -1], [0, 0, 0]],
        [[1, 0, 0], [0, 1, 0], [-1, 0, 1], [0, 0, 0]],
        [[0, 0, 1], [1, 0, 0], [1, 0, -1], [-1, 1, 0]],
    ],
    "cross": [
        # bottom arm, left arm, junction, right arm, top arm
        [[0, 0, 1], [1, 0, 0], [1, 0, -1], [0, 0, 0]],
        [[1, 0, 0], [0, 1, 0], [0, 0, 0], [1, -1, 0]],
        [[0, 0, 1], [0, 1, 0], [1, 0, -1], [1, -1, 0]],
        [[1, 0, 0], [0, 1, 0], [-1, 0, 1], [1, -1, 0]],
        [[0, 0, 1], [1, 0, 0], [1, 0, -1], [-1, 1, 0]],
    ],
}

# Ports: (name, axis, coordinate value, span on the other axis, width-param
# index). The width parameter is the one whose value equals the physical
# port length; the assembly layer equates it across a shared global port.
_PORTS = {
    "rod": [("left", 0, 0.0, (0, 1), 1), ("right", 0, 4.0, (0, 1), 1)],
    "bracket": [("end_h", 0, 2.0, (0, 1), 0), ("end_v", 1, 2.0, (0, 1), 1)],
    "tee": [("left", 0, 0.0, (0, 1), 0), ("right", 0, 3.0, (0, 1), 0),
            ("top", 1, 2.0, (1, 2), 1)],
    "cross": [("left", 0, 0.0, (1, 2), 0), ("right", 0, 3.0, (1, 2), 0),
              ("bottom", 1, 0.0, (1, 2), 1), ("top", 1, 3.0, (1, 2), 1)],
}

# Parameter boxes (mu1, mu2 in cm; mu3 source amplitude in W/cm^2) and the
# reference values of the geometric parameters.
_MU_BOUNDS = {
    "rod": [(3.0, 6.0), (0.5, 1.0), (0.0, 10.0)],
    "bracket": [(0.5, 1.0), (0.5, 1.0), (0.0, 10.0)],
    "tee": [(0.5, 1.0), (0.5, 1.0), (0.0, 10.0)],
    "cross": [(0.5, 1.0), (0.5, 1.0), (0.0, 10.0)],
}
_MU_REF = {"rod": (4.0, 1.0), "bracket": (1.0, 1.0), "tee": (1.0, 1.0),
           "cross": (1.0, 1.0)}

_ROD_LENGTH_CELLS = 21  # along the 4 cm axis; keeps bubble DoF near 691
_CELLS_PER_UNIT = 8     # elsewhere; ports get 8 edges per unit width

_COORD_DECIMALS = 9


@dataclass(frozen=True)
class Port:
    name: str
    nodes: np.ndarray       # global node ids, ordered along the port
    width_param: int        # 0 -> mu1, 1 -> mu2
    axis: int               # 0: port lies on a vertical line, varies in y
    length_ref: float

    @property
    def n_dofs(self) -> int:
        return len(self.nodes)

    @property
    def elements(self) -> np.ndarray:
        """Local connectivity (n_el, 3) as (end, end, midpoint) triples."""
        n_el = (len(self.nodes) - 1) // 2
        e = np.arange(n_el)
        return np.stack([2 * e, 2 * e + 2, 2 * e + 1], axis=1)


@dataclass
class TruthQuadrature:
    """The component truth rule: one row per (element, point) pair, with
    sparse tables mapping nodal coefficients to point values/gradients."""

    weights: np.ndarray   # (Q,) reference-domain weights
    elem: np.ndarray      # (Q,)
    patch: np.ndarray     # (Q,)
    phi: scipy.sparse.csr_matrix   # (Q, N) values
    gx: scipy.sparse.csr_matrix    # (Q, N) d/dx in reference coords
    gy: scipy.sparse.csr_matrix    # (Q, N)

    def __len__(self) -> int:
        return len(self.weights)


@dataclass
class ArchetypeComponent:
    kind: str
    refinement: int
    nodes: np.ndarray        # (N, 2) reference coordinates
    tris: np.ndarray         # (T, 6) P2 connectivity
    tri_patch: np.ndarray    # (T,)
    node_patch: np.ndarray   # (N,) a patch containing the node
    patch_coeffs: np.ndarray  # (P, 4, 3)
    ports: list[Port]
    mu_bounds: np.ndarray    # (3, 2)
    mu_ref: np.ndarray       # (2,)
    quad: TruthQuadrature
    kxx_patch: list = field(repr=False, default=None)
    kyy_patch: list = field(repr=False, default=None)
    mass_patch: list = field(repr=False, default=None)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_patches(self) -> int:
        return len(self.patch_coeffs)

    @property
    def port_nodes(self) -> np.ndarray:
        return np.concatenate([p.nodes for p in self.ports])

    @property
    def bubble_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.port_nodes] = False
        return np.nonzero(mask)[0]

    @property
    def n_bubble(self) -> int:
        return len(self.bubble_nodes)

    def stiffness_ref(self) -> scipy.sparse.csr_matrix:
        return sum(kx + ky for kx, ky in zip(self.kxx_patch, self.kyy_patch))

    def mass_ref(self) -> scipy.sparse.csr_matrix:
        return sum(self.mass_patch)

    def h1_ref(self) -> scipy.sparse.csr_matrix:
        return self.stiffness_ref() + self.mass_ref()


@dataclass
class GeometricMap:
    """Per-patch affine maps x = diag(scale) xh + shift."""

    mu: np.ndarray
    scales: np.ndarray  # (P, 2)
    shifts: np.ndarray  # (P, 2)

    def apply(self, points: np.ndarray, patch_ids: np.ndarray) -> np.ndarray:
        return points * self.scales[patch_ids] + self.shifts[patch_ids]

    @property
    def determinants(self) -> np.ndarray:
        return self.scales[:, 0] * self.scales[:, 1]


@dataclass
class PortBasis:
    """Per-port trace eigenmodes with elliptic lifts into the component."""

    taus: list      # per port: (17, n_modes) traces, L2-orthonormal
    lambdas: list   # per port: (n_modes,) ascending eigenvalues
    psis: list      # per port: (N, n_modes) lifted component fields

    @property
    def n_modes(self) -> list:
        return [t.shape[1] for t in self.taus]


@dataclass
class BubblePortSplit:
    bubble: np.ndarray       # (N,) coefficients, zero on every port
    port_coords: list        # per port: (n_modes,) generalized coordinates


def _half_lattice(lo, hi, n):
    """Vertex coordinates plus exact midpoints, so midside nodes are the
    arithmetic means of their vertices to the last bit."""
    v = np.linspace(lo, hi, n + 1)
    out = np.empty(2 * n + 1)
    out[0::2] = v
    out[1::2] = 0.5 * (v[:-1] + v[1:])
    return out


def _block_mesh(x_range, y_range, nx, ny):
    """Structured P2 triangles on a rectangle: (2nx+1)(2ny+1) nodes on the
    half-index lattice, each cell split along its rising diagonal."""
    xs = _half_lattice(*x_range, nx)
    ys = _half_lattice(*y_range, ny)
    gid = np.arange((2 * nx + 1) * (2 * ny + 1)).reshape(2 * nx + 1, 2 * ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.stack([xx.ravel(), yy.ravel()], axis=1)

    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b = 2 * i, 2 * j
            ll, lr = gid[a, b], gid[a + 2, b]
            ur, ul = gid[a + 2, b + 2], gid[a, b + 2]
            ctr = gid[a + 1, b + 1]
            tris.append([ll, lr, ur, gid[a + 1, b], gid[a + 2, b + 1], ctr])
            tris.append([ll, ur, ul, ctr, gid[a + 1, b + 2], gid[a, b + 1]])
    return nodes, np.array(tris, dtype=np.int64)


def _merge_blocks(blocks):
    """Concatenate block meshes, merging coincident nodes by rounded
    coordinates. Node ids end up in lexicographic coordinate order."""
    all_nodes, all_tris, all_patch = [], [], []
    offset = 0
    for patch_id, (nodes, tris) in enumerate(blocks):
        all_nodes.append(nodes)
        all_tris.append(tris + offset)
        all_patch.append(np.full(len(tris), patch_id))
        offset += len(nodes)
    nodes = np.vstack(all_nodes)
    tris = np.vstack(all_tris)
    keys = np.round(nodes, _COORD_DECIMALS)
    keys[keys == 0.0] = 0.0  # normalize -0.0
    # rounded keys only identify coincident nodes; exact coordinates are
    # kept from the first occurrence so midpoint relations stay exact
    _, first, inverse = np.unique(
        keys, axis=0, return_index=True, return_inverse=True
    )
    return nodes[first], inverse[tris], np.concatenate(all_patch)


def _find_port_nodes(nodes, axis, value, span):
    on_line = np.abs(nodes[:, axis] - value) < 1e-9
    other = nodes[:, 1 - axis]
    in_span = (other > span[0] - 1e-9) & (other < span[1] + 1e-9)
    ids = np.nonzero(on_line & in_span)[0]
    return ids[np.argsort(nodes[ids, 1 - axis])]


def _tabulate_truth_quadrature(nodes, tris, tri_patch):
    tri = ReferenceElement("triangle")
    rule = gauss_rule(TRUTH_QUAD_ORDER, "triangle")
    nq = len(rule)
    vals, grads = tri.tabulate(rule.points)  # (nq, 6), (nq, 6, 2)

    p0 = nodes[tris[:, 0]]
    jac = np.stack([nodes[tris[:, 1]] - p0, nodes[tris[:, 2]] - p0], axis=2)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    if det.min() <= 0:
        raise GeometryError("inverted element in reference mesh")
    inv_t = (
        np.stack(
            [
                np.stack([jac[:, 1, 1], -jac[:, 1, 0]], axis=1),
                np.stack([-jac[:, 0, 1], jac[:, 0, 0]], axis=1),
            ],
            axis=1,
        )
        / det[:, None, None]
    )
    # reference-domain gradients of each shape function at each point
    gref = np.einsum("eab,qnb->eqna", inv_t, grads)  # (T, nq, 6, 2)

    n_el, n = len(tris), len(nodes)
    q_total = n_el * nq
    weights = (det[:, None] * rule.weights[None, :]).ravel()
    elem = np.repeat(np.arange(n_el), nq)
    patch = tri_patch[elem]

    rows = np.repeat(np.arange(q_total), 6)
    cols = tris[elem].ravel()
    phi_vals = np.tile(vals, (n_el, 1)).ravel()
    shape = (q_total, n)
    phi = scipy.sparse.csr_matrix((phi_vals, (rows, cols)), shape=shape)
    gx = scipy.sparse.csr_matrix(
        (gref[:, :, :, 0].reshape(q_total, 6).ravel(), (rows, cols)), shape=shape
    )
    gy = scipy.sparse.csr_matrix(
        (gref[:, :, :, 1].reshape(q_total, 6).ravel(), (rows, cols)), shape=shape
    )
    return TruthQuadrature(weights, elem, patch, phi, gx, gy), gref, det


def _patch_matrices(nodes, tris, tri_patch, gref, det, n_patches):
    """Per-patch Kxx, Kyy, and mass in reference coordinates, so that the
    physical H1 inner product is (ay/ax) Kxx + (ax/ay) Kyy + ax ay M."""
    tri = ReferenceElement("triangle")
    rule = gauss_rule(TRUTH_QUAD_ORDER, "triangle")
    vals, _ = tri.tabulate(rule.points)
    n = len(nodes)
    kxx_l, kyy_l, mass_l = [], [], []
    for p in range(n_patches):
        sel = np.nonzero(tri_patch == p)[0]
        g = gref[sel]
        d = det[sel]
        w = rule.weights
        kxx = np.einsum("q,eqi,eqj,e->eij", w, g[:, :, :, 0], g[:, :, :, 0], d)
        kyy = np.einsum("q,eqi,eqj,e->eij", w, g[:, :, :, 1], g[:, :, :, 1], d)
        mass = np.einsum("q,qi,qj->ij", w, vals, vals)[None, :, :] * d[:, None, None]
        t = tris[sel]
        rows = np.repeat(t, 6, axis=1).ravel()
        cols = np.tile(t, (1, 6)).ravel()
        mk = lambda a: scipy.sparse.csr_matrix(
            (a.ravel(), (rows, cols)), shape=(n, n)
        )
        kxx_l.append(mk(kxx))
        kyy_l.append(mk(kyy))
        mass_l.append(mk(mass))
    return kxx_l, kyy_l, mass_l


@lru_cache(maxsize=None)
def build_archetype(kind: str, refinement: int = 1) -> ArchetypeComponent:
    """Build an archetype component. Treat the result as immutable (it is
    cached and shared). ``refinement`` scales all cell counts."""
    if kind not in ARCHETYPE_KINDS:
        raise ValueError(f"unknown archetype kind {kind!r}")
    if refinement < 1 or refinement != int(refinement):
        raise ValueError("refinement must be a positive integer")

    blocks = []
    for (xr, yr) in _BLOCKS[kind]:
        def cells(lo, hi):
            if kind == "rod" and (hi - lo) == 4:
                return _ROD_LENGTH_CELLS * refinement
            return int(round((hi - lo) * _CELLS_PER_UNIT)) * refinement
        blocks.append(_block_mesh(xr, yr, cells(*xr), cells(*yr)))
    nodes, tris, tri_patch = _merge_blocks(blocks)

    node_patch = np.full(len(nodes), -1, dtype=np.int64)
    node_patch[tris[::-1].ravel()] = np.repeat(tri_patch[::-1], 6)

    ports = []
    for name, axis, value, span, wp in _PORTS[kind]:
        ids = _find_port_nodes(nodes, axis, value, span)
        expected = 16 * refinement + 1
        if len(ids) != expected:
            raise GeometryError(
                f"{kind} port {name}: found {len(ids)} nodes, expected {expected}"
            )
        length = float(
            nodes[ids[-1], 1 - axis] - nodes[ids[0], 1 - axis]
        )
        ports.append(Port(name, ids, wp, axis, length))

    seen = set()
    for p in ports:
        ids = set(p.nodes.tolist())
        if seen & ids:
            raise GeometryError(f"{kind}: ports share nodes")
        seen |= ids

    quad, gref, det = _tabulate_truth_quadrature(nodes, tris, tri_patch)
    coeffs = np.array(_PATCH_COEFFS[kind], dtype=float)
    kxx_l, kyy_l, mass_l = _patch_matrices(
        nodes, tris, tri_patch, gref, det, len(coeffs)
    )
    return ArchetypeComponent(
        kind=kind,
        refinement=refinement,
        nodes=nodes,
        tris=tris,
        tri_patch=tri_patch,
        node_patch=node_patch,
        patch_coeffs=coeffs,
        ports=ports,
        mu_bounds=np.array(_MU_BOUNDS[kind], dtype=float),
        mu_ref=np.array(_MU_REF[kind], dtype=float),
        quad=quad,
        kxx_patch=kxx_l,
        kyy_patch=kyy_l,
        mass_patch=mass_l,
    )


def validate_mu(comp: ArchetypeComponent, mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (3,):
        raise ValueError(f"{comp.kind}: expected 3 parameters, got {mu.shape}")
    lo, hi = comp.mu_bounds[:, 0], comp.mu_bounds[:, 1]
    if np.any(mu < lo - 1e-12) or np.any(mu > hi + 1e-12):
        raise ValueError(
            f"{comp.kind}: parameters {mu.tolist()} outside bounds "
            f"{comp.mu_bounds.tolist()}"
        )
    return mu


def geometric_map(comp: ArchetypeComponent, mu) -> GeometricMap:
    """Per-patch affine maps at parameter mu (identity at comp.mu_ref)."""
    mu = validate_mu(comp, mu)
    basis = np.array([1.0, mu[0], mu[1]])
    vals = comp.patch_coeffs @ basis  # (P, 4): ax, ay, bx, by
    scales = vals[:, :2]
    if scales.min() <= 0:
        raise GeometryError(f"{comp.kind}: nonpositive patch scale at mu={mu}")
    return GeometricMap(mu=mu, scales=scales, shifts=vals[:, 2:])


def physical_nodes(comp: ArchetypeComponent, mu) -> np.ndarray:
    """Mapped node coordinates (before any placement rotation/translation)."""
    gmap = geometric_map(comp, mu)
    return gmap.apply(comp.nodes, comp.node_patch)


def quad_geometry(comp: ArchetypeComponent, mu):
    """Geometric factors (cxx, cyy, cm) at every truth quadrature point.

    For the diagonal affine patch maps the physical diffusion term pulls back
    to (ay/ax) d/dx + (ax/ay) d/dy and the measure scales by ax*ay, so these
    three vectors are all the assembly needs about the geometry.
    """
    gmap = geometric_map(comp, mu)
    ax = gmap.scales[comp.quad.patch, 0]
    ay = gmap.scales[comp.quad.patch, 1]
    return ay / ax, ax / ay, ax * ay


def _port_line_matrices(comp: ArchetypeComponent, port: Port):
    line = ReferenceElement("line")
    rule = gauss_rule(4, "line")
    vals, grads = line.tabulate(rule.points[:, None])
    coords = comp.nodes[port.nodes, 1 - port.axis]
    n = len(coords)
    k = np.zeros((n, n))
    m = np.zeros((n, n))
    for conn in port.elements:
        h = coords[conn[1]] - coords[conn[0]]
        ke = np.einsum("q,qi,qj->ij", rule.weights, grads[:, :, 0],
                       grads[:, :, 0]) / h
        me = np.einsum("q,qi,qj->ij", rule.weights, vals, vals) * h
        k[np.ix_(conn, conn)] += ke
        m[np.ix_(conn, conn)] += me
    return k, m


def compute_port_basis(comp: ArchetypeComponent) -> PortBasis:
    """Trace eigenmodes of the 1D Laplacian on each port (L2-normalized,
    ascending; the first is the constant mode with eigenvalue 0), each lifted
    into the component by a discrete-harmonic extension that vanishes on the
    other ports."""
    k_ref = comp.stiffness_ref().tocsr()
    bub = comp.bubble_nodes
    all_port = comp.port_nodes
    k_bb = k_ref[bub][:, bub].tocsc()
    try:
        lu = scipy.sparse.linalg.splu(k_bb)
    except RuntimeError as exc:
        raise SolverError(f"{comp.kind}: lifting factorization failed: {exc}")

    taus, lambdas, psis = [], [], []
    for port in comp.ports:
        k1, m1 = _port_line_matrices(comp, port)
        try:
            lams, vecs = scipy.linalg.eigh(k1, m1)
        except scipy.linalg.LinAlgError as exc:
            raise SolverError(f"{comp.kind} port {port.name}: eigensolve failed: {exc}")
        # deterministic signs: first significantly nonzero entry positive
        for i in range(vecs.shape[1]):
            v = vecs[:, i]
            j = np.argmax(np.abs(v) > 1e-8 * np.abs(v).max())
            if v[j] < 0:
                vecs[:, i] = -v

        psi = np.zeros((comp.n_nodes, vecs.shape[1]))
        psi[port.nodes] = vecs
        rhs = -k_ref[bub][:, all_port] @ psi[all_port]
        psi[bub] = lu.solve(np.asarray(rhs))
        taus.append(vecs)
        lambdas.append(np.maximum(lams, 0.0))
        psis.append(psi)
    return PortBasis(taus=taus, lambdas=lambdas, psis=psis)


def split_bubble_port(comp: ArchetypeComponent, coeffs: np.ndarray,
                      basis: PortBasis) -> BubblePortSplit:
    """Split a component coefficient vector into a bubble part (zero on all
    ports) and per-port generalized coordinates (L2 projections of the trace
    onto the port eigenmodes)."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (comp.n_nodes,):
        raise ValueError(
            f"coefficient vector has shape {coeffs.shape}, expected "
            f"({comp.n_nodes},)"
        )
    port_part = np.zeros_like(coeffs)
    coords = []
    for port, tau, psi in zip(comp.ports, basis.taus, basis.psis):
        _, m1 = _port_line_matrices(comp, port)
        c = tau.T @ (m1 @ coeffs[port.nodes])
        coords.append(c)
        port_part += psi @ c
    return BubblePortSplit(bubble=coeffs - port_part, port_coords=coords)


def recombine(basis: PortBasis, split: BubblePortSplit) -> np.ndarray:
    """Inverse of split_bubble_port."""
    out = split.bubble.copy()
    for psi, c in zip(basis.psis, split.port_coords):
        out += psi @ c
    return out
