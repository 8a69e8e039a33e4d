"""Counter-based random substreams for reproducible parallel Monte Carlo."""

import numpy as np


def substream(seed: int, *lane) -> np.random.Generator:
    """Philox generator keyed by (seed, lane...).

    Distinct lanes give statistically independent streams; the same
    (seed, lane) always reproduces the same draws, independent of how many
    other streams exist or in which order they are consumed.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(x) for x in lane))
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))
