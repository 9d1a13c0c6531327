"""Deterministic random draws derived from hash streams.

Every randomized decision in the toolkit is keyed by an explicit seed trace
(global seed plus contextual identifiers), so replaying a run with the same
seed reproduces it bit-for-bit regardless of worker count, process, or
platform.  The stream is built on SHA-256 rather than ``random.Random`` so
digests cannot drift with interpreter versions.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

_SEP = b"\x1f"


class SeededStream:
    """Counter-mode SHA-256 stream yielding bounded integers."""

    def __init__(self, *trace: object) -> None:
        h = hashlib.sha256()
        for part in trace:
            h.update(str(part).encode("utf-8"))
            h.update(_SEP)
        self._key = h.digest()
        self._counter = 0

    def next_int(self, bound: int) -> int:
        """Return an integer in [0, bound); bound must be positive.

        Modulo bias is below 2**-240 for any practical bound.
        """
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        block = hashlib.sha256(self._key + self._counter.to_bytes(8, "big")).digest()
        self._counter += 1
        return int.from_bytes(block, "big") % bound

    def randint(self, lo: int, hi: int) -> int:
        """Return an integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.next_int(hi - lo + 1)

    def sample(self, items: Sequence, k: int) -> list:
        """Draw a uniform k-subset, preserving the input order of items."""
        if not 0 <= k <= len(items):
            raise ValueError(f"cannot sample {k} of {len(items)} items")
        indices = list(range(len(items)))
        chosen: list[int] = []
        for _ in range(k):
            pick = self.next_int(len(indices))
            chosen.append(indices.pop(pick))
        return [items[i] for i in sorted(chosen)]

    def shuffle(self, items: Sequence) -> list:
        """Return a new uniformly shuffled list (Fisher-Yates)."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.next_int(i + 1)
            out[i], out[j] = out[j], out[i]
        return out
