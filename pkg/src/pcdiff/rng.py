"""Counter-based random streams (Philox) so every draw is replayable.

A stream is addressed by (seed, domain, *counters); the same address
always yields the same sequence, independent of draw order elsewhere.
"""

from __future__ import annotations

import numpy as np

# domain tags keep unrelated draws on disjoint counter lanes
DOMAIN_INIT = 1  # parameter initialization
DOMAIN_TIMESTEP = 2  # per-item diffusion timestep
DOMAIN_LATENT_EPS = 3  # encoder reparameterization noise
DOMAIN_FORWARD_NOISE = 4  # forward-process noise fields
DOMAIN_BATCH = 5  # batch index selection
DOMAIN_SAMPLE_START = 6  # reverse-process initial state
DOMAIN_SAMPLE_STEP = 7  # ancestral per-step noise
DOMAIN_SYNTH = 8  # synthetic shape generation
DOMAIN_LABELS = 9  # label realization shuffles


def stream(seed: int, domain: int, *counters: int) -> np.random.Generator:
    if len(counters) > 3:
        raise ValueError("at most 3 counter values fit a Philox lane")
    # word 0 is the running block counter; stream identifiers go in the
    # high words so long draws never run into a neighboring stream
    counter = np.zeros(4, dtype=np.uint64)
    for i, c in enumerate(counters):
        counter[i + 1] = np.uint64(c)
    key = np.array([np.uint64(seed), np.uint64(domain)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))
