"""Gold action labels from consecutive gallery states."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .game_state import GALLERY_SIZE, Gallery

ACTIONS = ("add_delete", "move", "flip", "resize", "acted_upon")
CONCRETE_ACTIONS = ACTIONS[:4]
N_ACTIONS = len(ACTIONS)


@dataclass(frozen=True)
class ActionLabels:
    """Binary (28, 5) label matrix; columns follow :data:`ACTIONS`."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.int8)
        if m.shape != (GALLERY_SIZE, N_ACTIONS):
            raise ValueError(f"action labels must be {GALLERY_SIZE}x{N_ACTIONS}, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ActionLabels) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self) -> int:
        return hash(self.matrix.tobytes())

    def column(self, action: str) -> np.ndarray:
        return self.matrix[:, ACTIONS.index(action)]

    @property
    def add_delete(self) -> np.ndarray:
        return self.column("add_delete")

    @property
    def move(self) -> np.ndarray:
        return self.column("move")

    @property
    def flip(self) -> np.ndarray:
        return self.column("flip")

    @property
    def resize(self) -> np.ndarray:
        return self.column("resize")

    @property
    def acted_upon(self) -> np.ndarray:
        return self.column("acted_upon")

    @property
    def n_actions(self) -> int:
        """Number of concrete actions (meta-action excluded)."""
        return int(self.matrix[:, :4].sum())

    @classmethod
    def empty(cls) -> "ActionLabels":
        return cls(np.zeros((GALLERY_SIZE, N_ACTIONS), dtype=np.int8))


def derive_actions(prev: Gallery, curr: Gallery) -> ActionLabels:
    """Diff two states of the same gallery.

    An addition or deletion suppresses the edit labels of that clipart, so
    edits are only counted for cliparts that stay on (or off) the canvas.
    """
    if prev.ids != curr.ids:
        raise ValueError("galleries must list the same cliparts in the same order")
    m = np.zeros((GALLERY_SIZE, N_ACTIONS), dtype=np.int8)
    for i, (a, b) in enumerate(zip(prev.cliparts, curr.cliparts)):
        if a.present != b.present:
            m[i, 0] = 1
        elif a.present:
            m[i, 1] = a.x != b.x or a.y != b.y
            m[i, 2] = a.orientation != b.orientation
            m[i, 3] = a.size != b.size
        m[i, 4] = m[i, :4].any()
    return ActionLabels(m)


def action_statistics(records: Iterable) -> dict[str, dict[str, float]]:
    """Per-split percentage of positive (turn, clipart) labels per action.

    Also reports the mean and standard deviation of concrete actions per
    turn. Only turn-level (``task == "when"``) records are counted, since
    those cover every turn of the corpus.
    """
    per_split: dict[str, list] = {}
    for rec in records:
        if getattr(rec, "task", "when") != "when":
            continue
        per_split.setdefault(rec.split, []).append(rec.actions.matrix)
    out = {}
    for split in sorted(per_split):
        stack = np.stack(per_split[split]).astype(np.float64)
        rates = stack.mean(axis=(0, 1)) * 100
        counts = stack[:, :, :4].sum(axis=(1, 2))
        row = {name: round(float(rates[k]), 2) for k, name in enumerate(ACTIONS)}
        row["mean_actions_per_turn"] = round(float(counts.mean()), 2)
        row["std_actions_per_turn"] = round(float(counts.std(ddof=1)) if len(counts) > 1 else 0.0, 2)
        out[split] = row
    return out
