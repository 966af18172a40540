import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from pqf_bench.conf import settings
from pqf_bench.linalg import FockPattern, Unitary


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class SwapGadget:
    """Beam splitter on modes (i, i + 1) followed by a phase shifter on each output.

    Modes are 0-based. With theta = pi/2, phi = 0, gamma = -pi/2 it swaps the two modes exactly.
    """

    i: int
    theta: float = math.pi / 2
    phi: float = 0.0
    gamma: float = -math.pi / 2

    def block(self, phase_shifters: bool = True) -> np.ndarray:
        cos, sin = math.cos(self.theta), math.sin(self.theta)
        splitter = np.array(
            [
                [cos, 1j * np.exp(-1j * self.phi) * sin],
                [1j * np.exp(1j * self.phi) * sin, cos],
            ]
        )
        if not phase_shifters:
            return splitter
        return np.exp(1j * self.gamma) * splitter

    def to_json(self) -> Dict[str, float]:
        return {"i": self.i, "theta": self.theta, "phi": self.phi, "gamma": self.gamma}


@dataclass(frozen=True)
class RoutingPlan:
    m: int
    gadgets: Tuple[SwapGadget, ...]
    source: FockPattern

    @property
    def target(self) -> FockPattern:
        return FockPattern.canonical(self.source.total, self.m)

    def __len__(self) -> int:
        return len(self.gadgets)

    def apply(self, pattern: FockPattern) -> FockPattern:
        """Occupations after the gadgets act in order."""
        occupations = list(pattern)
        for gadget in self.gadgets:
            i = gadget.i
            occupations[i], occupations[i + 1] = occupations[i + 1], occupations[i]
        return FockPattern(occupations)

    def to_json(self) -> List[Dict[str, float]]:
        return [gadget.to_json() for gadget in self.gadgets]


def gadget_unitary(m: int, i: int, phase_shifters: bool = True, **angles: float) -> Unitary:
    """m x m identity with the swap gadget's 2 x 2 block on modes (i, i + 1)."""
    if not 0 <= i < m - 1:
        raise RoutingError(f"Gadget position {i} outside [0, {m - 2}]")
    matrix = np.eye(m, dtype=np.complex128)
    matrix[i : i + 2, i : i + 2] = SwapGadget(i, **angles).block(phase_shifters)
    return Unitary(matrix)


def plan_routing(pattern: FockPattern) -> RoutingPlan:
    """Greedy adjacent swaps bringing each photon down to the first free target position."""
    pattern = FockPattern(pattern)
    if not pattern.is_collision_free:
        raise RoutingError(f"Cannot route a pattern with collisions: {tuple(pattern)}")
    occupations = list(pattern)
    gadgets = []
    for target in range(pattern.total):
        nearest = next(mode for mode in range(target, pattern.m) if occupations[mode])
        for mode in range(nearest - 1, target - 1, -1):
            gadgets.append(SwapGadget(mode))
            occupations[mode], occupations[mode + 1] = occupations[mode + 1], occupations[mode]
    return RoutingPlan(pattern.m, tuple(gadgets), pattern)


def routing_unitary(plan: RoutingPlan) -> Unitary:
    """Product of the plan's gadgets; the first gadget acts first (rightmost factor)."""
    matrix = np.eye(plan.m, dtype=np.complex128)
    for gadget in plan.gadgets:
        i = gadget.i
        matrix[i : i + 2, :] = gadget.block() @ matrix[i : i + 2, :]
    return Unitary(matrix)


def maps_to_canonical(U: Unitary, pattern: FockPattern) -> bool:
    """True when each occupied column of U is 1 on a distinct canonical mode and 0 elsewhere."""
    tolerance = settings.routing_tolerance
    occupied = pattern.modes
    columns = U.matrix[:, list(occupied)]
    targets = set()
    for column in columns.T:
        row = int(np.argmax(np.abs(column)))
        expected = np.zeros(U.m, dtype=np.complex128)
        expected[row] = 1.0
        if np.max(np.abs(column - expected)) > tolerance:
            return False
        targets.add(row)
    return targets == set(range(len(occupied)))
