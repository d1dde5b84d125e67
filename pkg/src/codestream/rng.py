"""Deterministic random substreams.

Every random draw in a guided run comes from a generator derived from ``(seed, purpose, run, ...)``
through :class:`numpy.random.SeedSequence`, so results depend only on the seed and the run/stream
ids, never on batching, chunking or thread scheduling.

Reverse-step noise is counter-indexed: stream ``n`` of run ``r`` owns a table whose row ``t - 1``
drives reverse step ``t``. Which block a step falls in therefore never changes its noise, and the
special cases of blockwise selection (B = T, B = 1, N = 1) reproduce the base chain exactly.
"""

import numpy as np

# Purpose tags keep substreams for different uses apart.
INIT = 0
NOISE = 1
REFERENCE = 2
SELECT = 3
DATA = 4
DERIVE = 5


def substream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def derive_seed(seed, *key):
    "A new integer seed mixed from `seed` and `key`, for handing a whole sub-experiment its own seed."
    state = np.random.SeedSequence(int(seed), spawn_key=(DERIVE,) + tuple(int(k) for k in key)).generate_state(2)
    return int(state[0]) << 32 | int(state[1])


def initial_noise(seed, runs):
    "x_T for each run, shape (len(runs), 2)."
    return np.stack([substream(seed, INIT, run).standard_normal(2) for run in runs]) if len(runs) else np.empty((0, 2))


def noise_table(seed, runs, streams, T):
    "Reverse-step noise, shape (len(runs) * streams, T, 2); row r * streams + n belongs to stream n of runs[r]."
    table = np.empty((len(runs) * streams, T, 2))
    for i, run in enumerate(runs):
        for n in range(streams):
            table[i * streams + n] = substream(seed, NOISE, run, n).standard_normal((T, 2))
    return table
