"""Per-component reduced operators checked against the truth discretization.

The strongest oracle here uses the full bubble basis (one unit vector per
interior node): the reduced space then contains the truth solution exactly,
so the single-component reduced solve must reproduce the truth solve to
roundoff, and the reduced inner product must equal the assembled one.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from finrom.assembly import (
    ComponentInstance,
    GlobalPort,
    SystemTopology,
    build_dof_map,
    evaluate_output,
    inner_product_matrix,
    solve_truth,
)
from finrom.components import (
    ARCHETYPE_KINDS,
    build_archetype,
    compute_port_basis,
    split_bubble_port,
)
from finrom.errors import GeometryError
from finrom.reduced import (
    ReducedBasis,
    build_reduced_archetype,
    component_operator,
    port_parity,
    reduced_inner_product,
    solve_component_bubble,
)

PORT_DOFS = 17


def full_bubble_archetype(kind):
    comp = build_archetype(kind)
    pb = compute_port_basis(comp)
    nb = comp.n_bubble
    modes = np.zeros((comp.n_nodes, nb))
    modes[comp.bubble_nodes, np.arange(nb)] = 1.0
    return build_reduced_archetype(comp, pb, ReducedBasis(modes, np.ones(nb)))


def small_archetype(kind, n_modes=3, seed=0):
    """A few random interior fields as bubble modes; enough to exercise the
    operator algebra without a training run."""
    comp = build_archetype(kind)
    pb = compute_port_basis(comp)
    rng = np.random.default_rng(seed)
    modes = np.zeros((comp.n_nodes, n_modes))
    modes[comp.bubble_nodes] = rng.standard_normal((comp.n_bubble, n_modes))
    return build_reduced_archetype(comp, pb, ReducedBasis(modes, np.ones(n_modes)))


class TestPortParity:
    def test_signs_alternate(self):
        # Sturm-Liouville modes on a symmetric interval are alternately even
        # and odd, starting from the even constant mode
        pb = compute_port_basis(build_archetype("rod"))
        signs = port_parity(pb)
        assert_allclose(signs, (-1.0) ** np.arange(PORT_DOFS))

    @pytest.mark.parametrize("kind", ARCHETYPE_KINDS)
    def test_reversal_identity(self, kind):
        comp = build_archetype(kind)
        pb = compute_port_basis(comp)
        signs = port_parity(pb)
        for taus in pb.taus:
            assert np.abs(taus[::-1] * signs - taus).max() < 1e-12

    def test_rejects_mixed_parity(self):
        pb = compute_port_basis(build_archetype("rod"))
        taus = pb.taus[0].copy()
        taus[:, 1] = taus[:, 1] + 0.3 * taus[:, 2]  # odd plus even: no parity
        broken = type(pb)(taus=[taus], lambdas=pb.lambdas, psis=pb.psis[:1])
        with pytest.raises(GeometryError):
            port_parity(broken)


class TestReducedArchetype:
    def test_shapes_and_blocks(self):
        ra = small_archetype("tee", n_modes=4)
        comp = ra.comp
        n_ports = len(comp.ports)
        assert ra.n_loc == 4 + n_ports * PORT_DOFS
        assert ra.bmat.shape == (comp.n_nodes, ra.n_loc)
        assert ra.phi.shape == (len(comp.quad), ra.n_loc)
        for p in range(n_ports):
            blk = ra.port_block(p)
            assert blk.stop - blk.start == PORT_DOFS
        assert ra.port_block(0).start == 4

    def test_dirichlet_coefficients_reproduce_constants(self):
        for kind in ARCHETYPE_KINDS:
            ra = small_archetype(kind)
            trace = ra.port_basis.taus[0] @ (42.0 * ra.dir_coeff)
            assert np.abs(trace - 42.0).max() < 1e-12

    def test_trace_coords_roundtrip(self):
        ra = small_archetype("bracket")
        rng = np.random.default_rng(3)
        g = rng.uniform(10.0, 200.0, PORT_DOFS)
        c = ra.trace_coords(g)
        assert_allclose(ra.port_basis.taus[0] @ c, g, rtol=0, atol=1e-10)


class TestComponentOperator:
    def test_jacobian_matches_finite_differences(self):
        ra = small_archetype("bracket", n_modes=3, seed=1)
        mu = (0.8, 0.7, 2.0)
        op = component_operator(ra, mu)
        rng = np.random.default_rng(7)
        w = np.zeros(ra.n_loc)
        w[: ra.n_bubble_modes] = rng.standard_normal(ra.n_bubble_modes)
        for p in range(ra.n_ports):
            w[ra.port_block(p)] = rng.uniform(50.0, 150.0) * ra.dir_coeff
        jac = op.jacobian(w)
        h = 1e-6
        fd = np.empty_like(jac)
        for j in range(ra.n_loc):
            e = np.zeros(ra.n_loc)
            e[j] = h
            fd[:, j] = (op.residual(w + e) - op.residual(w - e)) / (2 * h)
        scale = np.abs(jac).max()
        assert np.abs(jac - fd).max() < 1e-5 * scale

    def test_constant_field_has_zero_flux_residual(self):
        ra = full_bubble_archetype("rod")
        mu = (3.7, 0.8, 4.0)
        op = component_operator(ra, mu)
        w = constant_state(ra, 120.0)
        flux = op.residual(w) + mu[2] * op.source_vec
        assert np.abs(flux).max() < 1e-9

    def test_output_of_constant_is_temperature_times_area(self):
        ra = full_bubble_archetype("rod")
        mu = (3.7, 0.8, 4.0)
        op = component_operator(ra, mu)
        w = constant_state(ra, 2.0)
        assert_allclose(op.output(w), 2.0 * 3.7 * 0.8, rtol=1e-12)

    def test_point_subset_with_truth_weights_is_identity(self):
        ra = small_archetype("rod", n_modes=2)
        mu = (4.0, 0.6, 1.0)
        quad = ra.comp.quad
        op_all = component_operator(ra, mu)
        idx = np.arange(len(quad))
        op_sub = component_operator(ra, mu, weights=quad.weights, point_idx=idx)
        rng = np.random.default_rng(11)
        w = np.zeros(ra.n_loc)
        w[: ra.n_bubble_modes] = 0.05 * rng.standard_normal(ra.n_bubble_modes)
        for p in range(ra.n_ports):
            w[ra.port_block(p)] = rng.uniform(50.0, 150.0) * ra.dir_coeff
        r_ref = op_all.residual(w)
        assert_allclose(op_sub.residual(w), r_ref, rtol=0, atol=1e-12 * np.abs(r_ref).max())
        j_ref = op_all.jacobian(w)
        assert_allclose(op_sub.jacobian(w), j_ref, rtol=0, atol=1e-12 * np.abs(j_ref).max())

    def test_sparse_subset_only_touches_selected_points(self):
        # zero weight on every unselected point: residual must only depend on
        # the selected rows of the tables
        ra = small_archetype("rod", n_modes=2, seed=5)
        mu = (4.0, 0.6, 1.0)
        rng = np.random.default_rng(2)
        idx = np.sort(rng.choice(len(ra.comp.quad), 40, replace=False))
        wts = rng.uniform(0.1, 1.0, len(idx))
        op = component_operator(ra, mu, weights=wts, point_idx=idx)
        w = rng.uniform(20.0, 80.0, ra.n_loc)
        uq = ra.phi[idx] @ w
        assert op.phi.shape[0] == len(idx)
        assert_allclose(op.field(w)[0], uq, rtol=0, atol=1e-12)


def constant_state(ra, temp):
    """Reduced coordinates of the spatially constant field, valid for the
    full bubble basis."""
    comp = ra.comp
    coeffs = np.full(comp.n_nodes, float(temp))
    split = split_bubble_port(comp, coeffs, ra.port_basis)
    return np.concatenate([split.bubble[comp.bubble_nodes], *split.port_coords])


class TestFullBubbleEquivalence:
    """With every interior node as a bubble mode, the reduced model is an
    exact re-parameterization of the truth problem."""

    @pytest.mark.parametrize("kind,mu", [
        ("rod", (3.7, 0.8, 4.0)),
        ("bracket", (0.8, 0.7, 2.5)),
    ])
    def test_reduced_solve_matches_truth(self, kind, mu):
        ra = full_bubble_archetype(kind)
        comp = ra.comp
        temps = np.linspace(40.0, 180.0, ra.n_ports)
        ports = [
            GlobalPort(((0, p),), dirichlet=temps[p]) for p in range(ra.n_ports)
        ]
        topo = SystemTopology([ComponentInstance(kind, mu)], ports)
        dmap = build_dof_map(topo)
        res = solve_truth(topo, dmap)
        u_truth = res.state[dmap.comp_dofs[0]]

        pc = [temps[p] * ra.dir_coeff for p in range(ra.n_ports)]
        b = solve_component_bubble(ra, mu, pc)
        u_red = ra.bmat @ np.concatenate([b, *pc])
        assert np.abs(u_red - u_truth).max() < 1e-9 * np.abs(u_truth).max()

    def test_inner_product_matches_assembled_block(self):
        kind, mu = "rod", (3.7, 0.8, 4.0)
        ra = full_bubble_archetype(kind)
        ports = [
            GlobalPort(((0, p),), dirichlet=1.0) for p in range(ra.n_ports)
        ]
        topo = SystemTopology([ComponentInstance(kind, mu)], ports)
        dmap = build_dof_map(topo)
        vfull = inner_product_matrix(dmap).toarray()
        vred = reduced_inner_product(ra, mu)
        nb = ra.comp.n_bubble
        assert np.abs(vred[:nb, :nb] - vfull).max() < 1e-12

    def test_output_matches_truth_functional(self):
        kind, mu = "bracket", (0.8, 0.7, 2.5)
        ra = full_bubble_archetype(kind)
        ports = [
            GlobalPort(((0, p),), dirichlet=90.0) for p in range(ra.n_ports)
        ]
        topo = SystemTopology([ComponentInstance(kind, mu)], ports)
        dmap = build_dof_map(topo)
        res = solve_truth(topo, dmap)
        split = split_bubble_port(ra.comp, res.state[dmap.comp_dofs[0]], ra.port_basis)
        w = np.concatenate([split.bubble[ra.comp.bubble_nodes], *split.port_coords])
        op = component_operator(ra, mu)
        assert_allclose(op.output(w), evaluate_output(dmap, res.state), rtol=1e-10)


class TestSolveComponentBubble:
    def test_zero_source_constant_ports_gives_constant(self):
        # with matching constant port data and no source the exact solution
        # is constant, which the reduced space always contains via the lifts
        ra = small_archetype("rod", n_modes=3, seed=4)
        mu = (4.0, 0.7, 0.0)
        pc = [75.0 * ra.dir_coeff for _ in range(ra.n_ports)]
        b = solve_component_bubble(ra, mu, pc)
        u = ra.bmat @ np.concatenate([b, *pc])
        assert np.abs(u - 75.0).max() < 1e-8
