"""Per-trial random streams.

Each trial owns a ``numpy.random.Generator`` seeded from
``SeedSequence([master_seed, trial_index])``; SeedSequence hashing is
platform-independent, so logs replay anywhere. Trials are simulated in
vectorized blocks, but every draw is taken from the trial's own stream with a
shape that does not depend on the block, so results are independent of how
trials are grouped or distributed over workers.
"""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np


def trial_seed(master_seed: int, trial_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, int(trial_index)])


def trial_generator(master_seed: int, trial_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(trial_seed(master_seed, trial_index)))


def disorder_normals(master_seed: int, size: int) -> np.ndarray:
    """Standard normals shared by every trial of a run (quenched disorder).

    The stream carries a spawn key, so it never coincides with a trial stream.
    """
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF], spawn_key=(1,))
    return np.random.Generator(np.random.PCG64(ss)).standard_normal(size)


class TrialRngs:
    """A stack of per-trial generators; draws come back with a leading trial axis."""

    def __init__(self, generators: Sequence[np.random.Generator]):
        self.generators = list(generators)

    @classmethod
    def for_trials(cls, master_seed: int, trial_indices) -> TrialRngs:
        return cls([trial_generator(master_seed, i) for i in trial_indices])

    def __len__(self):
        return len(self.generators)

    def random(self, size) -> np.ndarray:
        return np.stack([g.random(size) for g in self.generators])

    def normal(self, size) -> np.ndarray:
        return np.stack([g.standard_normal(size) for g in self.generators])

    def normal_where(self, size, which) -> np.ndarray:
        """Standard normals only for trials flagged in ``which``; zeros elsewhere."""
        out = np.zeros((len(self.generators),) + tuple(np.atleast_1d(size)))
        for i, g in enumerate(self.generators):
            if which[i]:
                out[i] = g.standard_normal(size)
        return out

    def poisson(self, lam: np.ndarray) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        return np.stack([g.poisson(row) for g, row in zip(self.generators, lam)])


def as_trial_rngs(rng, n_trials: int | None = None) -> TrialRngs:
    if isinstance(rng, TrialRngs):
        out = rng
    elif isinstance(rng, np.random.Generator):
        out = TrialRngs([rng])
    elif isinstance(rng, (int, np.integer)):
        out = TrialRngs([np.random.default_rng(int(rng))])
    else:
        out = TrialRngs(list(rng))
    if n_trials is not None and len(out) != n_trials:
        raise ValueError(f"{len(out)} random streams for {n_trials} trials")
    return out
