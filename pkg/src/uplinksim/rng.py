"""Labeled RNG substreams so every stochastic stage is independently reproducible."""

import hashlib

import numpy as np


def substream(seed: int, *labels) -> np.random.Generator:
    """Derive an independent random stream from a master seed and a label path.

    Labels may be ints or strings, e.g. ``substream(7, "evaluation", "spsa", 12)``.
    The same ``(seed, labels)`` always yields the same stream, no matter how many
    other streams were created before it, so adding episodes or stages never
    perturbs existing ones.
    """
    words = []
    for lab in labels:
        if isinstance(lab, (int, np.integer)):
            if int(lab) < 0:
                raise ValueError(f"labels must be non-negative ints or strings, got {lab!r}")
            words.append(int(lab))
        else:
            digest = hashlib.blake2b(str(lab).encode("utf-8"), digest_size=8).digest()
            words.append(int.from_bytes(digest, "little"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(words))
    return np.random.default_rng(ss)


def derive_seed(seed: int, *labels) -> int:
    """A 63-bit integer seed deterministically derived from (seed, labels)."""
    payload = repr((int(seed),) + tuple(str(lab) for lab in labels)).encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1
