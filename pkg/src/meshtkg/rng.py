"""Deterministic random streams.

Every stochastic choice in the package (init, dropout masks, history
subsampling, synthetic embeddings) draws from a Philox counter-based
generator keyed by (seed, domain, index). Philox output is fixed by its
key, so results are reproducible across runs and platforms, and streams
for different purposes never interact.
"""

import numpy as np

# domain codes for substreams derived from one run seed
INIT = 1
DROPOUT = 2
DROP_HISTORY = 3
SYNTH_ENTITY = 4
SYNTH_RELATION = 5

_MASK64 = (1 << 64) - 1


def stream(seed: int, domain: int, index: int = 0) -> np.random.Generator:
    """Independent generator for (seed, domain, index)."""
    key = np.array(
        [seed & _MASK64, ((domain & 0xFFFFFFFF) << 32) | (index & 0xFFFFFFFF)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))
