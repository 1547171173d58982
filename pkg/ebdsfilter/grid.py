from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ebdsfilter.exception import InvalidParams

TimeIndex = Tuple[int, int]


@dataclass(frozen=True)
class Grid1D:
    lower: float
    upper: float
    points: int

    def __post_init__(self):
        if self.points < 2:
            raise InvalidParams(
                "a grid needs at least 2 points", {"points": self.points}
            )
        if not self.lower < self.upper:
            raise InvalidParams(
                "grid lower bound must be below the upper bound",
                {"lower": self.lower, "upper": self.upper},
            )

    @property
    def spacing(self) -> float:
        return (self.upper - self.lower) / (self.points - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.points)

    @property
    def column(self) -> np.ndarray:
        """Nodes as a (|B|, 1) batch of 1D states."""
        return self.nodes[:, None]

    def coarsen(self, points: Optional[int]) -> "Grid1D":
        if points is None or points == self.points:
            return self
        return Grid1D(self.lower, self.upper, points)

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "points": self.points}


@dataclass
class GridDensity:
    grid: Grid1D
    values: np.ndarray
    time_index: Optional[TimeIndex] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.points,):
            raise InvalidParams(
                "density values do not match the grid",
                {"shape": list(self.values.shape), "points": self.grid.points},
            )

    @property
    def gradient(self) -> np.ndarray:
        """Central differences inside, one-sided at the boundary nodes."""
        return np.gradient(self.values, self.grid.spacing, edge_order=1)

    def sup_distance(self, other: "GridDensity") -> float:
        return float(np.max(np.abs(self.values - other.values)))
