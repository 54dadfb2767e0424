"""Offline training stage: random subsystems, POD, RB regeneration.

The RB regeneration oracle mirrors the one in test_reduced: the truth
equations at interior nodes of a component touch only that component's
unknowns, so with the full bubble basis the single-component re-solve must
return exactly the restriction of the subsystem truth solution.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from finrom.assembly import build_dof_map
from finrom.components import ARCHETYPE_KINDS, build_archetype, compute_port_basis
from finrom.errors import ConfigError
from finrom.reduced import ReducedBasis, build_reduced_archetype
from finrom.training import (
    TrainingConfig,
    compute_pod,
    generate_rb_snapshots,
    generate_truth_snapshots,
    train_archetypes,
    training_subsystem,
)


class TestTrainingConfig:
    def test_defaults_valid(self):
        cfg = TrainingConfig()
        assert cfg.n_sample == 100
        assert cfg.beta == 0.8

    @pytest.mark.parametrize("kwargs", [
        {"n_sample": 0},
        {"beta": -0.1},
        {"beta": 1.5},
        {"dirichlet_range": (0.0, 250.0)},
        {"dirichlet_range": (250.0, 1.0)},
        {"energy_fraction": 1.0},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            TrainingConfig(**kwargs)


class TestTrainingSubsystem:
    def test_beta_zero_is_lone_component(self):
        cfg = TrainingConfig(beta=0.0)
        rng = np.random.default_rng(0)
        topo, mu, n_att = training_subsystem("cross", rng, cfg)
        assert len(topo.components) == 1
        assert n_att == 0
        assert all(gp.dirichlet is not None for gp in topo.global_ports)
        assert len(topo.global_ports) == 4

    @pytest.mark.parametrize("kind", ARCHETYPE_KINDS)
    def test_beta_one_attaches_every_port(self, kind):
        cfg = TrainingConfig(beta=1.0)
        rng = np.random.default_rng(1)
        topo, mu, n_att = training_subsystem(kind, rng, cfg)
        n_ports = len(build_archetype(kind).ports)
        assert n_att == n_ports
        assert len(topo.components) == 1 + n_ports
        shared = [gp for gp in topo.global_ports if gp.dirichlet is None]
        assert len(shared) == n_ports

    def test_neighbors_conform_and_inherit_width(self):
        cfg = TrainingConfig(beta=1.0)
        rng = np.random.default_rng(2)
        for _ in range(6):
            topo, mu, _ = training_subsystem("tee", rng, cfg)
            build_dof_map(topo)  # raises unless every shared port conforms
            target = build_archetype("tee")
            for gp in topo.global_ports:
                if gp.dirichlet is not None:
                    continue
                (ci, pi), (cj, pj) = gp.incidences
                assert ci == 0
                nb = topo.components[cj]
                nb_port = build_archetype(nb.kind).ports[pj]
                w_target = mu[target.ports[pi].width_param]
                assert nb.mu[nb_port.width_param] == w_target

    def test_same_stream_reproduces_subsystem(self):
        cfg = TrainingConfig(beta=0.6)
        a = training_subsystem("bracket", np.random.default_rng(9), cfg)
        b = training_subsystem("bracket", np.random.default_rng(9), cfg)
        assert a[0].components == b[0].components
        assert a[0].global_ports == b[0].global_ports
        assert a[1] == b[1]

    def test_dirichlet_values_in_range(self):
        cfg = TrainingConfig(beta=0.3, dirichlet_range=(5.0, 50.0))
        rng = np.random.default_rng(4)
        for _ in range(10):
            topo, _, _ = training_subsystem("cross", rng, cfg)
            for gp in topo.global_ports:
                if gp.dirichlet is not None:
                    assert 5.0 <= gp.dirichlet <= 50.0


@pytest.fixture(scope="module")
def rod_snaps():
    cfg = TrainingConfig(n_sample=4, beta=0.5, seed=77)
    return cfg, generate_truth_snapshots(cfg, kinds=("rod",))["rod"]


@pytest.fixture(scope="module")
def small_library():
    cfg = TrainingConfig(n_sample=6, beta=0.7, seed=12)
    return train_archetypes(cfg, kinds=("rod", "bracket"))


class TestTruthSnapshots:
    def test_shapes_and_ranges(self, rod_snaps):
        cfg, s = rod_snaps
        comp = build_archetype("rod")
        assert s.truth.shape == (comp.n_nodes, 4)
        assert s.mus.shape == (4, 3)
        assert np.all(s.mus >= comp.mu_bounds[:, 0])
        assert np.all(s.mus <= comp.mu_bounds[:, 1])
        assert np.all(s.attach_counts >= 0) and np.all(s.attach_counts <= 2)
        assert np.isfinite(s.truth).all()

    def test_deterministic_rerun(self, rod_snaps):
        cfg, s = rod_snaps
        again = generate_truth_snapshots(cfg, kinds=("rod",))["rod"]
        assert np.array_equal(s.truth, again.truth)
        assert np.array_equal(s.mus, again.mus)

    def test_kind_subset_matches_full_run(self, rod_snaps):
        # per-archetype substreams: training one kind alone must give the
        # same snapshots that kind gets in a full library run
        cfg, s = rod_snaps
        full = generate_truth_snapshots(
            TrainingConfig(n_sample=4, beta=0.5, seed=77)
        )
        assert np.array_equal(full["rod"].truth, s.truth)


class TestComputePod:
    def test_known_spectrum(self):
        # two orthonormal directions scaled 2 and 1e-3: eigenvalues 4, 1e-6
        n = 30
        snaps = np.zeros((n, 2))
        snaps[0, 0] = 2.0
        snaps[1, 1] = 1e-3
        basis = compute_pod(snaps, 0.999, np.eye(n))
        assert basis.n_modes == 1
        assert_allclose(basis.eigenvalues[:2], [4.0, 1e-6], rtol=1e-12)
        assert_allclose(basis.modes[:, 0], np.eye(n)[0], atol=1e-14)

        rich = compute_pod(snaps, 1.0 - 1e-9, np.eye(n))
        assert rich.n_modes == 2

    def test_orthonormal_in_given_inner_product(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((40, 40))
        vmat = a @ a.T + 40.0 * np.eye(40)
        snaps = rng.standard_normal((40, 12))
        basis = compute_pod(snaps, 0.9999, vmat)
        gram = basis.modes.T @ vmat @ basis.modes
        assert np.abs(gram - np.eye(basis.n_modes)).max() < 1e-10

    def test_sign_convention_is_deterministic(self):
        rng = np.random.default_rng(3)
        snaps = rng.standard_normal((25, 6))
        m1 = compute_pod(snaps, 0.999, np.eye(25)).modes
        m2 = compute_pod(-snaps, 0.999, np.eye(25)).modes
        assert_allclose(m1, m2, atol=1e-12)

    def test_degenerate_input_raises(self):
        with pytest.raises(ValueError):
            compute_pod(np.zeros((10, 3)), 0.999, np.eye(10))
        with pytest.raises(ConfigError):
            compute_pod(np.eye(3), 1.5, np.eye(3))


class TestRbRegeneration:
    def test_full_bubble_basis_recovers_truth_restriction(self):
        cfg = TrainingConfig(n_sample=3, beta=0.7, seed=21)
        snaps = generate_truth_snapshots(cfg, kinds=("rod",))["rod"]
        comp = build_archetype("rod")
        pb = compute_port_basis(comp)
        nb = comp.n_bubble
        modes = np.zeros((comp.n_nodes, nb))
        modes[comp.bubble_nodes, np.arange(nb)] = 1.0
        ra = build_reduced_archetype(comp, pb, ReducedBasis(modes, np.ones(nb)))
        generate_rb_snapshots(ra, snaps)
        assert snaps.rb_failures == 0
        assert snaps.rb.shape == (ra.n_loc, 3)
        for n in range(3):
            recon = ra.bmat @ snaps.rb[:, n]
            scale = np.abs(snaps.truth[:, n]).max()
            assert np.abs(recon - snaps.truth[:, n]).max() < 1e-8 * scale


class TestTrainArchetypes:
    def test_pipeline_products(self, small_library):
        for kind, ta in small_library.items():
            comp = ta.ra.comp
            s = ta.snapshots
            assert np.abs(s.bubble[comp.port_nodes]).max() < 1e-10
            assert ta.ra.basis.n_modes >= 1
            assert s.rb.shape[0] == ta.ra.n_loc
            assert s.rb.shape[1] + s.rb_failures == 6

    def test_pod_basis_is_h1_orthonormal(self, small_library):
        for ta in small_library.values():
            v = ta.ra.comp.h1_ref()
            m = ta.ra.basis.modes
            gram = m.T @ (v @ m)
            assert np.abs(gram - np.eye(m.shape[1])).max() < 1e-10

    def test_rb_states_stay_in_physical_range(self, small_library):
        for ta in small_library.values():
            fields = ta.ra.bmat @ ta.snapshots.rb
            assert fields.min() > 0.0
            assert fields.max() < 300.0
