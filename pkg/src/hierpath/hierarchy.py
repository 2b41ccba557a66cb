"""Two-level label space: anatomical sites and the diagnoses under them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ClassHierarchy:
    """Coarse classes, fine classes, and the parent of each fine class.

    ``parent`` maps fine index -> coarse index.  Children of one parent
    need not be contiguous; the only structural requirement is that every
    coarse class has at least one child.
    """

    coarse_names: tuple
    fine_names: tuple
    parent: tuple

    def __post_init__(self):
        if len(self.parent) != len(self.fine_names):
            raise ValueError("one parent per fine class required")
        if len(set(self.coarse_names)) != len(self.coarse_names):
            raise ValueError("duplicate coarse class name")
        if len(set(self.fine_names)) != len(self.fine_names):
            raise ValueError("duplicate fine class name")
        seen = set(self.parent)
        for p in self.parent:
            if not 0 <= p < len(self.coarse_names):
                raise ValueError(f"parent index {p} out of range")
        if seen != set(range(len(self.coarse_names))):
            missing = set(range(len(self.coarse_names))) - seen
            raise ValueError(f"coarse classes without children: {sorted(missing)}")

    @property
    def n_coarse(self) -> int:
        return len(self.coarse_names)

    @property
    def n_fine(self) -> int:
        return len(self.fine_names)

    def children(self, coarse_index: int) -> list:
        return [i for i, p in enumerate(self.parent) if p == coarse_index]

    def lift_index(self, fine_index: int) -> int:
        return self.parent[fine_index]

    def lift_indices(self, fine_indices) -> np.ndarray:
        arr = np.asarray(fine_indices)
        return np.asarray(self.parent)[arr]

    def lift_probs(self, fine_probs: np.ndarray) -> np.ndarray:
        """Sum fine probabilities into their parents; rows keep their mass."""
        fine_probs = np.asarray(fine_probs)
        if fine_probs.ndim != 2 or fine_probs.shape[1] != self.n_fine:
            raise ValueError(f"expected [N,{self.n_fine}] probabilities, got {fine_probs.shape}")
        out = np.zeros((fine_probs.shape[0], self.n_coarse), dtype=fine_probs.dtype)
        for fine_idx, coarse_idx in enumerate(self.parent):
            out[:, coarse_idx] += fine_probs[:, fine_idx]
        return out


def gi_tract_hierarchy() -> ClassHierarchy:
    """The biopsy-site / diagnosis tree used throughout this project."""
    return ClassHierarchy(
        coarse_names=("Duodenum", "Esophagus", "Ileum"),
        fine_names=(
            "Celiac",
            "EE",
            "Normal-Duodenum",
            "EoE",
            "Normal-Esophagus",
            "Crohn's",
            "Normal-Ileum",
        ),
        parent=(0, 0, 0, 1, 1, 2, 2),
    )
