"""The trained component library: everything the online stage needs.

One entry per archetype kind: the reduced operator tables, the sparse
residual/Jacobian rule and output rule per tolerance, and the basis values
tabulated at each rule's points. Provenance (seed and a digest of the
training configuration) rides along so artifacts written from the same
inputs are comparable.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .components import ARCHETYPE_KINDS
from .eqp import DELTA_GRID, EqpTrainer, QuadRule, train_output_rules
from .errors import ConfigError
from .reduced import ReducedArchetype
from .training import TrainedArchetype, TrainingConfig, train_archetypes


@dataclass(frozen=True)
class RuleTables:
    """Basis values and reference gradients at one rule's points."""

    phi: np.ndarray     # (n_points, n_loc)
    gx: np.ndarray
    gy: np.ndarray


@dataclass
class LibraryEntry:
    kind: str
    ra: ReducedArchetype
    residual_rules: dict
    output_rules: dict
    tables: dict                    # delta -> RuleTables at the residual rule
    n_train_states: int = 0

    def rule(self, delta: float) -> QuadRule:
        try:
            return self.residual_rules[delta]
        except KeyError:
            raise ConfigError(
                f"no rule trained at delta={delta:g} for {self.kind}; "
                f"available: {sorted(self.residual_rules)}"
            ) from None

    def output_rule(self, delta: float) -> QuadRule:
        try:
            return self.output_rules[delta]
        except KeyError:
            raise ConfigError(
                f"no output rule at delta={delta:g} for {self.kind}"
            ) from None


@dataclass
class Library:
    entries: dict
    seed: int
    config_digest: str
    deltas: tuple

    def __getitem__(self, kind: str) -> LibraryEntry:
        try:
            return self.entries[kind]
        except KeyError:
            raise ConfigError(f"library has no archetype {kind!r}") from None

    def __contains__(self, kind) -> bool:
        return kind in self.entries


def config_digest(cfg: TrainingConfig, deltas, kinds) -> str:
    payload = {
        "n_sample": cfg.n_sample,
        "beta": cfg.beta,
        "dirichlet_range": list(cfg.dirichlet_range),
        "energy_fraction": cfg.energy_fraction,
        "seed": cfg.seed,
        "deltas": [float(d) for d in deltas],
        "kinds": list(kinds),
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _tabulate(ra: ReducedArchetype, rule: QuadRule) -> RuleTables:
    idx = rule.point_idx
    return RuleTables(phi=ra.phi[idx].copy(), gx=ra.gx[idx].copy(),
                      gy=ra.gy[idx].copy())


def _train_entry(ta: TrainedArchetype, deltas, progress) -> LibraryEntry:
    snaps = ta.snapshots
    trainer = EqpTrainer(ta.ra, snaps.rb, snaps.rb_mus)
    residual_rules = trainer.train(deltas=deltas, progress=progress)
    output_rules = train_output_rules(ta.ra, snaps.rb, snaps.rb_mus,
                                      deltas=deltas)
    tables = {d: _tabulate(ta.ra, r) for d, r in residual_rules.items()}
    return LibraryEntry(
        kind=ta.kind,
        ra=ta.ra,
        residual_rules=residual_rules,
        output_rules=output_rules,
        tables=tables,
        n_train_states=snaps.rb.shape[1],
    )


def build_library(cfg: TrainingConfig, deltas=DELTA_GRID,
                  kinds=ARCHETYPE_KINDS, workers: int = 1,
                  progress=None) -> Library:
    """Run the whole offline stage and bundle the result.

    Rule training for different archetypes is independent, so with
    ``workers > 1`` archetypes are trained in parallel threads (the LP
    solver releases the interpreter lock).
    """
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    trained = train_archetypes(cfg, kinds)
    if workers == 1:
        entries = {k: _train_entry(trained[k], deltas, progress)
                   for k in kinds}
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {k: pool.submit(_train_entry, trained[k], deltas,
                                      progress) for k in kinds}
            entries = {k: futures[k].result() for k in kinds}
    return Library(
        entries=entries,
        seed=cfg.seed,
        config_digest=config_digest(cfg, deltas, kinds),
        deltas=tuple(sorted((float(d) for d in deltas), reverse=True)),
    )
