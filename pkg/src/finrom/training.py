"""Offline training: snapshot generation, POD bases, RB snapshot regeneration.

Snapshots for an archetype come from random depth-1 subsystems: the target
component, a random neighbor glued to each port with probability beta, and
uniform random constant Dirichlet data on every remaining port. The truth
solve of each subsystem is restricted to the target component. POD of the
bubble parts (in the reference H1 inner product, method of snapshots) gives
the bubble basis; re-solving each sample as a single-component reduced
problem with the snapshot's own port traces gives the RB training states
that hyperreduction is calibrated against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import (
    ROTATIONS,
    ComponentInstance,
    GlobalPort,
    SystemTopology,
    build_dof_map,
    solve_truth,
)
from .components import (
    ARCHETYPE_KINDS,
    build_archetype,
    compute_port_basis,
    physical_nodes,
    split_bubble_port,
)
from .errors import ConfigError, ConvergenceError, SolverError
from .reduced import (
    ReducedArchetype,
    ReducedBasis,
    build_reduced_archetype,
    solve_component_bubble,
)

DIRICHLET_RANGE = (1.0, 250.0)
POD_ENERGY_FRACTION = 0.999
N_SAMPLE_DEFAULT = 100
BETA_DEFAULT = 0.8


@dataclass(frozen=True)
class TrainingConfig:
    n_sample: int = N_SAMPLE_DEFAULT
    beta: float = BETA_DEFAULT
    dirichlet_range: tuple = DIRICHLET_RANGE
    energy_fraction: float = POD_ENERGY_FRACTION
    seed: int = 0
    max_retries: int = 3

    def __post_init__(self):
        if self.n_sample < 1:
            raise ConfigError("n_sample must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        lo, hi = self.dirichlet_range
        if not (1.0 <= lo < hi <= 300.0):
            raise ConfigError("dirichlet_range must be within [1, 300] K")
        if not 0.0 < self.energy_fraction < 1.0:
            raise ConfigError("energy_fraction must lie in (0, 1)")


@dataclass
class ArchetypeSnapshots:
    kind: str
    mus: np.ndarray            # (n_sample, 3) target parameters
    truth: np.ndarray          # (n_nodes, n_sample) restricted truth solves
    attach_counts: np.ndarray  # (n_sample,) neighbors attached per sample
    bubble: np.ndarray = None  # (n_nodes, n_sample), zero on ports
    rb: np.ndarray = None      # (n_loc, n_used) reduced training states
    rb_mus: np.ndarray = None  # (n_used, 3) parameters of the kept states
    rb_failures: int = 0

    @property
    def n_sample(self) -> int:
        return self.truth.shape[1]


def _port_frame(comp, mu, port):
    """Segment endpoints (min corner first) and outward axis direction of one
    port at identity placement."""
    nodes = physical_nodes(comp, mu)
    xy = nodes[port.nodes]
    centroid = nodes.mean(axis=0)
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    normal_axis = port.axis  # 0: port on vertical line, outward along x
    direction = np.zeros(2)
    direction[normal_axis] = 1.0 if lo[normal_axis] > centroid[normal_axis] else -1.0
    return lo, hi, direction


def _rotation_mapping(d_from, d_to):
    """Quarter-turn count r with ROTATIONS[r] @ d_from = d_to."""
    for r, rot in enumerate(ROTATIONS):
        if np.allclose(rot @ d_from, d_to):
            return r
    raise SolverError("no quarter-turn maps the port directions")


def training_subsystem(kind: str, rng: np.random.Generator,
                       cfg: TrainingConfig) -> tuple:
    """One random depth-1 subsystem around a target archetype.

    Draw order is fixed (target mu; per port: attach flag, neighbor kind,
    neighbor port, neighbor mu; then Dirichlet values in global-port order)
    so a given substream always produces the same subsystem.
    """
    comp = build_archetype(kind)
    mu = tuple(rng.uniform(comp.mu_bounds[:, 0], comp.mu_bounds[:, 1]))
    components = [ComponentInstance(kind, mu)]
    attached = []  # (target port index, neighbor comp index, neighbor port)
    free_ports = []  # (comp index, port index) awaiting Dirichlet data

    for p, port in enumerate(comp.ports):
        if rng.random() >= cfg.beta:
            free_ports.append((0, p))
            continue
        nb_kind = ARCHETYPE_KINDS[rng.integers(len(ARCHETYPE_KINDS))]
        nb_comp = build_archetype(nb_kind)
        q = int(rng.integers(len(nb_comp.ports)))
        nb_mu = rng.uniform(nb_comp.mu_bounds[:, 0], nb_comp.mu_bounds[:, 1])
        # the pair shares one width, fixed by the target's parameter
        width = mu[port.width_param]
        nb_mu[nb_comp.ports[q].width_param] = width
        nb_mu = tuple(nb_mu)

        lo_t, hi_t, d_t = _port_frame(comp, mu, port)
        lo_n, hi_n, d_n = _port_frame(nb_comp, nb_mu, nb_comp.ports[q])
        rot = _rotation_mapping(d_n, -d_t)
        corners = np.stack([lo_n, hi_n, [lo_n[0], hi_n[1]], [hi_n[0], lo_n[1]]])
        rotated = corners @ ROTATIONS[rot].T
        translation = tuple(lo_t - rotated.min(axis=0))

        c_idx = len(components)
        components.append(ComponentInstance(nb_kind, nb_mu, rot, translation))
        attached.append((p, c_idx, q))
        for q2 in range(len(nb_comp.ports)):
            if q2 != q:
                free_ports.append((c_idx, q2))

    ports = [
        GlobalPort(((0, p), (c_idx, q))) for p, c_idx, q in attached
    ]
    lo, hi = cfg.dirichlet_range
    for c_idx, q in free_ports:
        ports.append(GlobalPort(((c_idx, q),), dirichlet=rng.uniform(lo, hi)))

    return SystemTopology(components, ports), mu, len(attached)


def generate_truth_snapshots(cfg: TrainingConfig,
                             kinds=ARCHETYPE_KINDS) -> dict:
    """Truth snapshot sets from random subsystems, one per archetype kind.

    Each (archetype, sample) pair gets its own RNG substream, so results do
    not depend on scheduling order and failed solves can be resampled from
    the same stream.
    """
    root = np.random.SeedSequence(cfg.seed)
    streams = root.spawn(len(ARCHETYPE_KINDS))
    out = {}
    for kind in kinds:
        stream = streams[ARCHETYPE_KINDS.index(kind)]
        comp = build_archetype(kind)
        sample_streams = stream.spawn(cfg.n_sample)
        mus = np.empty((cfg.n_sample, 3))
        truth = np.empty((comp.n_nodes, cfg.n_sample))
        counts = np.empty(cfg.n_sample, dtype=int)
        for n in range(cfg.n_sample):
            rng = np.random.default_rng(sample_streams[n])
            for attempt in range(cfg.max_retries + 1):
                topo, mu, n_att = training_subsystem(kind, rng, cfg)
                dmap = build_dof_map(topo)
                try:
                    res = solve_truth(topo, dmap)
                except ConvergenceError:
                    if attempt == cfg.max_retries:
                        raise SolverError(
                            f"training sample {n} for {kind} failed "
                            f"{cfg.max_retries + 1} times"
                        )
                    continue
                break
            mus[n] = mu
            counts[n] = n_att
            truth[:, n] = res.state[dmap.comp_dofs[0]]
        out[kind] = ArchetypeSnapshots(
            kind=kind, mus=mus, truth=truth, attach_counts=counts
        )
    return out


def compute_pod(snapshots: np.ndarray, energy_fraction: float,
                vmat) -> ReducedBasis:
    """POD by the method of snapshots in the inner product of ``vmat``.

    Returns the smallest basis capturing ``energy_fraction`` of the total
    eigenvalue sum, with H1-orthonormal columns and deterministic signs.
    """
    if not 0.0 < energy_fraction < 1.0:
        raise ConfigError("energy_fraction must lie in (0, 1)")
    snaps = np.asarray(snapshots, dtype=float)
    if snaps.ndim != 2 or snaps.shape[1] < 1:
        raise ValueError("need a (n_dofs, n_snapshots) matrix")
    if not np.isfinite(snaps).all():
        raise ValueError("snapshots contain non-finite values")
    gram = snaps.T @ (vmat @ snaps)
    gram = 0.5 * (gram + gram.T)
    if np.abs(gram).max() == 0.0:
        raise ValueError("all snapshots are zero; POD is degenerate")

    import scipy.linalg

    lam, vecs = scipy.linalg.eigh(gram)
    lam = np.maximum(lam[::-1], 0.0)
    vecs = vecs[:, ::-1]
    total = lam.sum()
    cumulative = np.cumsum(lam)
    n_modes = int(np.searchsorted(cumulative, energy_fraction * total) + 1)
    n_modes = min(n_modes, int((lam > 1e-14 * lam[0]).sum()))

    modes = np.empty((snaps.shape[0], n_modes))
    for i in range(n_modes):
        m = snaps @ vecs[:, i] / np.sqrt(lam[i])
        # canonical sign: largest-magnitude entry positive, so the basis does
        # not depend on the eigensolver's arbitrary eigenvector signs
        if m[np.argmax(np.abs(m))] < 0:
            m = -m
        modes[:, i] = m
    return ReducedBasis(modes=modes, eigenvalues=lam)


def generate_rb_snapshots(ra: ReducedArchetype,
                          snaps: ArchetypeSnapshots) -> None:
    """For each truth snapshot, re-solve the single-component reduced
    problem with the snapshot's own port traces as Dirichlet data, and
    store bubble coefficients plus port coordinates.

    Non-converged samples are dropped and counted in ``rb_failures``.
    """
    cols = []
    kept_mus = []
    failures = 0
    bubble = np.empty_like(snaps.truth)
    for n in range(snaps.n_sample):
        split = split_bubble_port(ra.comp, snaps.truth[:, n], ra.port_basis)
        bubble[:, n] = split.bubble
        try:
            b = solve_component_bubble(ra, snaps.mus[n], split.port_coords)
        except (ConvergenceError, SolverError):
            failures += 1
            continue
        cols.append(np.concatenate([b, *split.port_coords]))
        kept_mus.append(snaps.mus[n])
    if not cols:
        raise SolverError(f"{snaps.kind}: every RB training solve failed")
    snaps.bubble = bubble
    snaps.rb = np.stack(cols, axis=1)
    snaps.rb_mus = np.stack(kept_mus)
    snaps.rb_failures = failures


@dataclass
class TrainedArchetype:
    ra: ReducedArchetype
    snapshots: ArchetypeSnapshots

    @property
    def kind(self) -> str:
        return self.ra.kind


def train_archetypes(cfg: TrainingConfig, kinds=ARCHETYPE_KINDS) -> dict:
    """Full offline chain short of hyperreduction: snapshots, POD, reduced
    operators, RB training states."""
    raw = generate_truth_snapshots(cfg, kinds)
    out = {}
    for kind in kinds:
        comp = build_archetype(kind)
        port_basis = compute_port_basis(comp)
        snaps = raw[kind]
        bubble = np.empty_like(snaps.truth)
        for n in range(snaps.n_sample):
            split = split_bubble_port(comp, snaps.truth[:, n], port_basis)
            bubble[:, n] = split.bubble
        snaps.bubble = bubble
        basis = compute_pod(bubble, cfg.energy_fraction, comp.h1_ref())
        ra = build_reduced_archetype(comp, port_basis, basis)
        generate_rb_snapshots(ra, snaps)
        out[kind] = TrainedArchetype(ra=ra, snapshots=snaps)
    return out
