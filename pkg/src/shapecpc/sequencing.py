"""Training-block / target-region index sequences over a patch grid.

A training block is the ``k×k`` square of grid cells at an anchor. Its target
is the ``(k+2)×(k+2)`` block minus the training block: an L-shaped band two
cells thick. ``FORWARD`` puts the band along the right and bottom edges,
``BACKWARD`` along the left and top. All coordinate lists are row-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .imaging import PatchGrid


class Direction(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


class SequenceConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorSpec:
    row: int
    col: int
    k: int
    direction: Direction
    grid_side: int

    def __post_init__(self):
        object.__setattr__(self, "direction", as_direction(self.direction))

    def is_valid(self) -> bool:
        i, j, k, s = self.row, self.col, self.k, self.grid_side
        if k < 1 or i < 0 or j < 0:
            return False
        if self.direction is Direction.FORWARD:
            return max(i + k + 2, j + k + 2) <= s
        return min(i - 2, j - 2) >= 0 and i + k <= s and j + k <= s

    @property
    def outer_origin(self) -> tuple[int, int]:
        if self.direction is Direction.FORWARD:
            return self.row, self.col
        return self.row - 2, self.col - 2


@dataclass(frozen=True)
class IndexSequence:
    coords: tuple[tuple[int, int], ...]
    role: str  # "train" | "target"
    texture_id: int = 0

    def __len__(self) -> int:
        return len(self.coords)

    def flat(self, grid_side: int) -> list[int]:
        return [r * grid_side + c for r, c in self.coords]


@dataclass(frozen=True)
class ContrastiveSample:
    anchor: AnchorSpec
    train: IndexSequence
    target: IndexSequence

    @property
    def texture_id(self) -> int:
        return self.target.texture_id


def as_direction(value) -> Direction:
    try:
        return Direction(value.value if isinstance(value, Direction) else str(value).lower())
    except ValueError:
        raise SequenceConfigError(f"unknown direction {value!r}; expected 'forward' or 'backward'") from None


def enumerate_anchors(s: int, k: int, direction) -> list[AnchorSpec]:
    direction = as_direction(direction)
    if k < 1:
        raise SequenceConfigError(f"perception k must be >= 1, got {k}")
    if s < k:
        raise SequenceConfigError(f"grid side {s} is smaller than perception {k}")
    if s < k + 2:
        return []
    if direction is Direction.FORWARD:
        rows = range(0, s - k - 1)
    else:
        rows = range(2, s - k + 1)
    return [AnchorSpec(i, j, k, direction, s) for i in rows for j in rows]


def _block(r0: int, c0: int, n: int) -> list[tuple[int, int]]:
    return [(r, c) for r in range(r0, r0 + n) for c in range(c0, c0 + n)]


def build_sequences(anchor: AnchorSpec, texture_id: int = 0) -> tuple[IndexSequence, IndexSequence]:
    if not anchor.is_valid():
        raise SequenceConfigError(f"invalid anchor {anchor}")
    train = _block(anchor.row, anchor.col, anchor.k)
    inner = set(train)
    outer = _block(*anchor.outer_origin, anchor.k + 2)
    target = [rc for rc in outer if rc not in inner]
    return IndexSequence(tuple(train), "train", 0), IndexSequence(tuple(target), "target", texture_id)


def make_samples(grids: Sequence[PatchGrid], k: int, directions: Iterable = (Direction.FORWARD,)) -> list[ContrastiveSample]:
    """Anchors × directions × texture variants; order is direction, anchor, texture."""
    if not grids:
        raise SequenceConfigError("at least the original grid is required")
    spec = grids[0].spec
    for g in grids[1:]:
        if g.spec != spec:
            raise SequenceConfigError(f"grid specs differ: {spec} vs {g.spec}")
    s = spec.grid_side
    samples = []
    for direction in directions:
        for anchor in enumerate_anchors(s, k, direction):
            train, _ = build_sequences(anchor)
            for g in grids:
                _, target = build_sequences(anchor, g.texture_id)
                samples.append(ContrastiveSample(anchor, train, target))
    return samples
