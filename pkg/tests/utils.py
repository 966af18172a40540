from itertools import permutations
from typing import Dict, Iterable

import numpy as np

from pqf_bench.linalg import FockPattern


def naive_permanent(M: np.ndarray) -> complex:
    M = np.asarray(M)
    n = M.shape[0]
    terms = (np.prod([M[i, sigma[i]] for i in range(n)]) for sigma in permutations(range(n)))
    return complex(sum(terms))


def empirical_distribution(patterns: Iterable) -> Dict[FockPattern, float]:
    patterns = [FockPattern(row) for row in patterns]
    distribution: Dict[FockPattern, float] = {}
    for pattern in patterns:
        distribution[pattern] = distribution.get(pattern, 0.0) + 1.0 / len(patterns)
    return distribution


def pattern_rows(*bitstrings: str) -> np.ndarray:
    return np.array([[int(bit) for bit in bits] for bits in bitstrings], dtype=np.int64)
