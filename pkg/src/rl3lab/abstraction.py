"""Incremental clustering of concrete states into abstract states (RL3-coarse)."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np


def grid_manhattan(size: int) -> Callable[[int, int], float]:
    def dist(s1: int, s2: int) -> float:
        return abs(s1 // size - s2 // size) + abs(s1 % size - s2 % size)
    return dist


def identity_distance(s1: int, s2: int) -> float:
    return 0.0 if s1 == s2 else math.inf


class StateAbstraction:
    """Assigns each newly visited concrete state to an abstract state.

    A new state joins the closest previously visited state within ``radius``
    whose cluster still has room (ties go to the earliest visited); otherwise it
    opens a new cluster. Abstract ids are the concrete index of the cluster's
    first member, so radius 0 yields the identity map.
    """

    def __init__(self, distance: Callable[[int, int], float], radius: float = 1,
                 max_cluster_size: int = 2):
        self.distance = distance
        self.radius = radius
        self.max_cluster_size = max_cluster_size
        self.assignment: dict[int, int] = {}
        self.cluster_sizes: dict[int, int] = {}
        self.visit_order: list[int] = []

    def __contains__(self, s: int) -> bool:
        return s in self.assignment

    @property
    def num_abstract(self) -> int:
        return len(self.cluster_sizes)

    def assign(self, s: int) -> int:
        if s in self.assignment:
            return self.assignment[s]
        best, best_d = None, math.inf
        for v in self.visit_order:
            d = self.distance(v, s)
            if d <= self.radius and d < best_d and self.cluster_sizes[self.assignment[v]] < self.max_cluster_size:
                best, best_d = v, d
        abstract = self.assignment[best] if best is not None else s
        self.assignment[s] = abstract
        self.cluster_sizes[abstract] = self.cluster_sizes.get(abstract, 0) + 1
        self.visit_order.append(s)
        return abstract

    def lookup(self, s: int) -> int:
        try:
            return self.assignment[s]
        except KeyError:
            raise KeyError(f"concrete state {s} has not been assigned an abstract state") from None

    def dump(self) -> list[tuple[int, int]]:
        return [(s, self.assignment[s]) for s in self.visit_order]


def assign_abstract(abs_: StateAbstraction, s_new: int) -> int:
    return abs_.assign(s_new)


def abstract_q_lookup(abs_: StateAbstraction, q_abstract: np.ndarray, s_concrete: int) -> np.ndarray:
    return q_abstract[abs_.lookup(s_concrete)]
