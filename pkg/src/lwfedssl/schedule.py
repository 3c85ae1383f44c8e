"""Round-to-stage allocation and per-round exchange sets."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

STRATEGIES = ("end_to_end", "layer_wise", "lw_fedssl", "progressive")
ALLOCATIONS = ("uniform", "right_skewed", "left_skewed")
LAYERWISE = ("layer_wise", "lw_fedssl")


class ConfigError(ValueError):
    pass


def _largest_remainder(weights: list[int], total: int) -> list[int]:
    wsum = sum(weights)
    shares = [Fraction(w * total, wsum) for w in weights]
    counts = [math.floor(s) for s in shares]
    left = total - sum(counts)
    # ties go to the earliest stage
    order = sorted(range(len(weights)), key=lambda i: (-(shares[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def make_schedule(num_stages: int, rounds: int, allocation: str = "uniform") -> list[int]:
    """Rounds per stage, summing to ``rounds`` with every stage getting at least one."""
    S, R = num_stages, rounds
    if S < 1:
        raise ConfigError("need at least one stage")
    if R < S:
        raise ConfigError(f"R < S: {R} rounds cannot cover {S} stages")
    if allocation == "uniform":
        base, extra = divmod(R, S)
        return [base + (1 if s < extra else 0) for s in range(S)]
    if allocation == "right_skewed":
        counts = _largest_remainder(list(range(S, 0, -1)), R)
    elif allocation == "left_skewed":
        counts = _largest_remainder(list(range(1, S + 1)), R)
    else:
        raise ConfigError(f"unknown allocation {allocation!r}")
    # lift empty stages by borrowing from the largest (latest on ties)
    while min(counts) == 0:
        donor = max(range(S), key=lambda i: (counts[i], i))
        counts[donor] -= 1
        counts[counts.index(0)] += 1
    return counts


@dataclass(frozen=True)
class StageSchedule:
    strategy: str
    num_layers: int
    rounds_per_stage: tuple[int, ...]

    @classmethod
    def build(cls, strategy: str, num_layers: int, rounds: int, allocation: str = "uniform") -> "StageSchedule":
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}")
        if rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if strategy == "end_to_end":
            return cls(strategy, num_layers, (rounds,))
        return cls(strategy, num_layers, tuple(make_schedule(num_layers, rounds, allocation)))

    @property
    def rounds(self) -> int:
        return sum(self.rounds_per_stage)

    @property
    def staged(self) -> bool:
        return self.strategy != "end_to_end"

    def stage(self, r: int) -> int:
        """1-based stage of 0-based round ``r``."""
        if not 0 <= r < self.rounds:
            raise IndexError(f"round {r} outside [0, {self.rounds})")
        acc = 0
        for s, n in enumerate(self.rounds_per_stage, start=1):
            acc += n
            if r < acc:
                return s
        raise AssertionError("unreachable")

    def stage_start(self, s: int) -> int:
        return sum(self.rounds_per_stage[: s - 1])

    def depth(self, r: int) -> int:
        return self.num_layers if not self.staged else self.stage(r)

    def frozen_prefix(self, r: int) -> int:
        return self.stage(r) - 1 if self.strategy in LAYERWISE else 0

    def _encoder(self, first: int, depth: int) -> list[str]:
        return [f"enc.{i}" for i in range(first, depth)]

    def trainable(self, r: int) -> list[str]:
        return self._encoder(self.frozen_prefix(r), self.depth(r)) + ["proj", "pred"]

    def upload(self, r: int) -> list[str]:
        return self.trainable(r)

    def download(self, r: int) -> list[str]:
        if self.strategy == "lw_fedssl":
            return self._encoder(0, self.depth(r)) + ["proj", "pred"]
        return self.trainable(r)
