"""Per-archetype reduced operators.

The reduced coordinates of one component instance are its bubble basis
coefficients followed by one 17-coefficient block per local port, expressed
in the port trace eigenmode basis. All basis fields live on the reference
component, so a single set of quadrature tables (basis values and reference
gradients at the truth points) serves every parameter value; the geometry
enters only through the per-point factors of quad_geometry.

Port traces are shared between components through their eigenmode
coefficients. When a connection reverses the port orientation, mode k picks
up its parity sign (the 1D eigenmodes on the symmetric port mesh are even or
odd), so the global-to-local gather is signed rather than a plain selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import physics
from .components import ArchetypeComponent, PortBasis, quad_geometry
from .errors import GeometryError, SolverError
from .fem import NewtonConfig, newton_solve

PARITY_TOL = 1e-9


@dataclass
class ReducedBasis:
    """H1-orthonormal bubble basis with its POD spectrum."""

    modes: np.ndarray        # (n_nodes, n_modes), zero on all ports
    eigenvalues: np.ndarray  # full POD spectrum, descending

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]


def port_parity(port_basis: PortBasis) -> np.ndarray:
    """Sign of each trace eigenmode under reversal of the port direction.

    Raises if any mode is not (anti)symmetric, which would mean the port
    meshes lost their mirror symmetry and coefficient sharing across flipped
    connections is unsound.
    """
    taus = port_basis.taus[0]
    signs = np.zeros(taus.shape[1])
    for k in range(taus.shape[1]):
        t = taus[:, k]
        s = 1.0 if abs(t[::-1] - t).max() <= abs(t[::-1] + t).max() else -1.0
        if np.abs(t[::-1] - s * t).max() > PARITY_TOL:
            raise GeometryError(f"port mode {k} has no definite parity")
        signs[k] = s
    return signs


@dataclass
class ReducedArchetype:
    """Everything the reduced solvers need about one archetype."""

    comp: ArchetypeComponent
    basis: ReducedBasis
    port_basis: PortBasis
    bmat: np.ndarray       # (n_nodes, n_loc) bubble modes then port lifts
    phi: np.ndarray        # (Q, n_loc) basis values at truth points
    gx: np.ndarray         # (Q, n_loc) reference-x gradients
    gy: np.ndarray
    kxx_red: np.ndarray    # (P, n_loc, n_loc) per-patch reduced matrices
    kyy_red: np.ndarray
    mass_red: np.ndarray
    parity: np.ndarray     # (17,) mode signs under port reversal
    dir_coeff: np.ndarray  # (17,) coefficients of the unit constant trace

    @property
    def kind(self) -> str:
        return self.comp.kind

    @property
    def n_bubble_modes(self) -> int:
        return self.basis.n_modes

    @property
    def n_loc(self) -> int:
        return self.bmat.shape[1]

    @property
    def n_ports(self) -> int:
        return len(self.comp.ports)

    def port_block(self, p: int) -> slice:
        n = self.comp.ports[p].n_dofs
        start = self.n_bubble_modes + p * n
        return slice(start, start + n)

    def trace_coords(self, trace: np.ndarray) -> np.ndarray:
        """Eigenmode coefficients of nodal trace values on one port."""
        return np.linalg.solve(self.port_basis.taus[0], trace)


def build_reduced_archetype(comp: ArchetypeComponent, port_basis: PortBasis,
                            basis: ReducedBasis) -> ReducedArchetype:
    """Assemble basis tables for one archetype.

    All ports of all archetypes discretize the unit interval identically, so
    their trace eigenmodes must coincide; this is what lets two different
    archetypes share a port through coefficients alone, and it is asserted
    here rather than assumed.
    """
    ref = port_basis.taus[0]
    for p, taus in enumerate(port_basis.taus[1:], start=1):
        if taus.shape != ref.shape or np.abs(taus - ref).max() > 1e-12:
            raise GeometryError(
                f"{comp.kind}: port {p} trace modes differ from port 0"
            )

    cols = [basis.modes]
    for p in range(len(comp.ports)):
        cols.append(port_basis.psis[p])
    bmat = np.hstack(cols)

    phi = comp.quad.phi @ bmat
    gx = comp.quad.gx @ bmat
    gy = comp.quad.gy @ bmat

    n_p = comp.n_patches
    n_loc = bmat.shape[1]
    kxx = np.empty((n_p, n_loc, n_loc))
    kyy = np.empty((n_p, n_loc, n_loc))
    mass = np.empty((n_p, n_loc, n_loc))
    for p in range(n_p):
        kxx[p] = bmat.T @ (comp.kxx_patch[p] @ bmat)
        kyy[p] = bmat.T @ (comp.kyy_patch[p] @ bmat)
        mass[p] = bmat.T @ (comp.mass_patch[p] @ bmat)

    return ReducedArchetype(
        comp=comp,
        basis=basis,
        port_basis=port_basis,
        bmat=bmat,
        phi=phi,
        gx=gx,
        gy=gy,
        kxx_red=kxx,
        kyy_red=kyy,
        mass_red=mass,
        parity=port_parity(port_basis),
        dir_coeff=np.linalg.solve(ref, np.ones(ref.shape[0])),
    )


@dataclass
class ComponentOperator:
    """Reduced residual/Jacobian kernel for one instance at one rule.

    ``rho`` may be the truth weights or an RQ rule's weights; in the latter
    case the tables hold only the surviving rows. The kernel works entirely
    in (q, n_loc) dense arrays.
    """

    phi: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    rho: np.ndarray
    cxx: np.ndarray
    cyy: np.ndarray
    cm: np.ndarray
    mu3: float
    source_vec: np.ndarray  # phi^T (rho * cm), fixed per rule and mu

    def field(self, w: np.ndarray):
        return self.phi @ w, self.gx @ w, self.gy @ w

    def residual(self, w: np.ndarray, k_fn=None) -> np.ndarray:
        k_fn = k_fn or physics.conductivity
        wq, wx, wy = self.field(w)
        k = k_fn(wq)
        r = self.gx.T @ (self.rho * self.cxx * k * wx)
        r += self.gy.T @ (self.rho * self.cyy * k * wy)
        return r - self.mu3 * self.source_vec

    def jacobian(self, w: np.ndarray, k_fn=None, dk_fn=None) -> np.ndarray:
        k_fn = k_fn or physics.conductivity
        dk_fn = dk_fn or physics.conductivity_derivative
        wq, wx, wy = self.field(w)
        k = k_fn(wq)
        kp = dk_fn(wq)
        jac = self.gx.T @ (self.gx * (self.rho * self.cxx * k)[:, None])
        jac += self.gy.T @ (self.gy * (self.rho * self.cyy * k)[:, None])
        jac += self.gx.T @ (self.phi * (self.rho * self.cxx * kp * wx)[:, None])
        jac += self.gy.T @ (self.phi * (self.rho * self.cyy * kp * wy)[:, None])
        return jac

    def output(self, w: np.ndarray) -> float:
        """Domain integral of the field under this operator's rule."""
        return float(self.rho * self.cm @ (self.phi @ w))


def component_operator(ra: ReducedArchetype, mu, weights=None,
                       point_idx=None) -> ComponentOperator:
    """Bind an archetype's tables to a parameter value and quadrature rule."""
    cxx, cyy, cm = quad_geometry(ra.comp, mu)
    if point_idx is None:
        phi, gx, gy = ra.phi, ra.gx, ra.gy
        rho = ra.comp.quad.weights if weights is None else np.asarray(weights)
    else:
        idx = np.asarray(point_idx)
        phi, gx, gy = ra.phi[idx], ra.gx[idx], ra.gy[idx]
        cxx, cyy, cm = cxx[idx], cyy[idx], cm[idx]
        rho = np.asarray(weights)
    if rho.shape != (phi.shape[0],):
        raise ValueError(f"weights shape {rho.shape} vs {phi.shape[0]} points")
    return ComponentOperator(
        phi=phi, gx=gx, gy=gy, rho=rho, cxx=cxx, cyy=cyy, cm=cm,
        mu3=float(mu[2]), source_vec=phi.T @ (rho * cm),
    )


def reduced_inner_product(ra: ReducedArchetype, mu) -> np.ndarray:
    """Local H1 matrix in reduced coordinates at parameter mu."""
    from .components import geometric_map

    gmap = geometric_map(ra.comp, mu)
    out = np.zeros((ra.n_loc, ra.n_loc))
    for p in range(ra.comp.n_patches):
        ax, ay = gmap.scales[p]
        out += (ay / ax) * ra.kxx_red[p]
        out += (ax / ay) * ra.kyy_red[p]
        out += (ax * ay) * ra.mass_red[p]
    return out


def solve_component_bubble(ra: ReducedArchetype, mu, port_coords,
                           newton: NewtonConfig | None = None) -> np.ndarray:
    """Bubble coefficients solving the single-component problem with fixed
    port data (the ports act as Dirichlet conditions in mode coordinates).

    ``port_coords``: list of (17,) coefficient vectors, one per local port.
    Returns the (n_bubble_modes,) solution.
    """
    newton = newton or NewtonConfig()
    nb = ra.n_bubble_modes
    op = component_operator(ra, mu)
    w_full = np.zeros(ra.n_loc)
    for p, coords in enumerate(port_coords):
        w_full[ra.port_block(p)] = coords

    # frozen-conductivity start at the mean port temperature
    traces = np.concatenate(
        [ra.port_basis.taus[0] @ np.asarray(c) for c in port_coords]
    )
    t_mean = float(traces.mean()) if traces.size else 150.0
    t_mean = min(max(t_mean, physics.T_MIN), physics.T_MAX)
    k_bar = physics.conductivity(t_mean)
    kf = lambda w: np.full_like(w, k_bar)
    r0 = op.residual(w_full, k_fn=kf)[:nb]
    j0 = op.jacobian(w_full, k_fn=kf, dk_fn=lambda w: np.zeros_like(w))[:nb, :nb]
    if nb:
        try:
            b0 = -scipy.linalg.solve(j0, r0)
        except scipy.linalg.LinAlgError as exc:
            raise SolverError(f"bubble initial solve failed: {exc}")
    else:
        return np.zeros(0)

    def with_bubble(b):
        w = w_full.copy()
        w[:nb] = b
        return w

    res = newton_solve(
        lambda b: op.residual(with_bubble(b))[:nb],
        lambda b: op.jacobian(with_bubble(b))[:nb, :nb],
        b0,
        newton,
        linear_solve=scipy.linalg.solve,
    )
    return res.x
