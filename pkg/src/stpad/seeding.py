"""Named random substreams derived from one global seed."""

import zlib

import numpy as np
import torch


def derive_seed(seed, *names):
    """Deterministic 63-bit seed for the substream ``names`` of ``seed``."""
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    hi, lo = ss.generate_state(2, np.uint32)
    return int((int(hi) << 32 | int(lo)) & (2**63 - 1))


def generator(seed, *names):
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *names) if names else int(seed))
    return g


def set_deterministic(enabled=True):
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    else:
        torch.use_deterministic_algorithms(False)
