"""Seed derivation.

Every random stream comes from one root seed. A stream is named by a tuple of
small integers (its spawn key) and materialised as a 63-bit integer seed that
drives a counter-based Philox generator, so any single recording can be
regenerated from the seed stored in a manifest.
"""

import numpy as np

# spawn-key namespaces
DEVICE_BIAS = 1
CYCLE_BIAS = 2
ORIENTATION = 3
NOISE = 4
FOLDS = 5
VALIDATION = 6
INIT = 7
SHUFFLE = 8
DROPOUT = 9
FOLD_TRAINING = 10


def derive_seed(root, *keys):
    seq = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(seed):
    return np.random.Generator(np.random.Philox(int(seed)))
