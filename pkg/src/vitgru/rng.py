"""Named random substreams derived from a single root seed.

Every source of randomness in the package (parameter init, shuffling,
augmentation, synthetic data) pulls its own generator from ``substream`` so
streams stay independent and runs are reproducible from one integer.
"""

import hashlib

import numpy as np


def _label_entropy(label) -> int:
    digest = hashlib.sha256(repr(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(root_seed: int, *labels) -> np.random.Generator:
    """Generator for the (root_seed, *labels) stream; stable across platforms."""
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(_label_entropy(label) for label in labels)
    return np.random.default_rng(np.random.SeedSequence(entropy))
