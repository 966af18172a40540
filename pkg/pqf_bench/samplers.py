import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from itertools import combinations
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import binom

from pqf_bench.conf import settings
from pqf_bench.linalg import (
    FockPattern,
    Unitary,
    _enumerated_outputs,
    batch_permanent,
    multiset_count,
)

logger = logging.getLogger(__name__)

PatternOrBatch = Union[FockPattern, np.ndarray]


class InvalidInputError(ValueError):
    pass


class BudgetExceededError(RuntimeError):
    pass


class Species(str, Enum):
    IDEAL = "ideal"
    DISTINGUISHABLE = "distinguishable"
    MEANFIELD = "meanfield"
    UNIFORM = "uniform"
    DAD = "dad"


class NoiseParams(BaseModel):
    """Per-photon loss probability and pairwise internal-state overlap."""

    model_config = ConfigDict(frozen=True)

    loss: float = Field(0.0, ge=0.0, le=1.0)
    overlap: float = Field(1.0, ge=0.0, le=1.0)

    @property
    def fidelity(self) -> float:
        return self.overlap**2


@dataclass(frozen=True)
class ClickRecord:
    unitary_id: str
    pattern: FockPattern
    n: int

    @property
    def lost(self) -> int:
        return self.n - self.pattern.total


@dataclass(frozen=True)
class ClickBatch:
    """All runs recorded for one unitary, as an (N, m) occupation array."""

    unitary_id: str
    n: int
    patterns: np.ndarray

    def __post_init__(self):
        patterns = np.asarray(self.patterns, dtype=np.int64)
        if patterns.ndim != 2:
            raise InvalidInputError(f"Patterns must be a 2-d array, got shape {patterns.shape}")
        if patterns.size and (patterns.min() < 0 or patterns.sum(axis=1).max() > self.n):
            raise InvalidInputError(f"Pattern totals must lie in [0, {self.n}]")
        patterns.setflags(write=False)
        object.__setattr__(self, "patterns", patterns)

    @property
    def m(self) -> int:
        return self.patterns.shape[1]

    @property
    def lost(self) -> np.ndarray:
        return self.n - self.patterns.sum(axis=1)

    @property
    def collisions(self) -> int:
        return int((self.patterns > 1).any(axis=1).sum())

    def __len__(self) -> int:
        return len(self.patterns)

    def __iter__(self) -> Iterator[ClickRecord]:
        for row in self.patterns:
            yield ClickRecord(self.unitary_id, FockPattern(row), self.n)


@dataclass(frozen=True)
class InternalPartition:
    """Survivors split into the jointly interfering set and singletons (masks over photons)."""

    interfering: np.ndarray
    singletons: np.ndarray

    @property
    def interfering_photons(self) -> Tuple[int, ...]:
        return tuple(np.flatnonzero(self.interfering))

    @property
    def singleton_photons(self) -> Tuple[int, ...]:
        return tuple(np.flatnonzero(self.singletons))


def _input_modes(n: int, m: int, input_modes: Optional[Sequence[int]]) -> np.ndarray:
    modes = np.arange(n) if input_modes is None else np.asarray(input_modes, dtype=np.int64)
    if len(modes) > m:
        raise InvalidInputError(f"{len(modes)} photons cannot enter {m} modes")
    out_of_range = len(modes) and not 0 <= modes.min() <= modes.max() < m
    if len(set(modes.tolist())) != len(modes) or out_of_range:
        raise InvalidInputError(f"Input modes must be distinct and in [0, {m}), got {modes}")
    return modes


def _counts(rows: np.ndarray, m: int) -> np.ndarray:
    patterns = np.zeros((rows.shape[0], m), dtype=np.int64)
    np.add.at(patterns, (np.arange(rows.shape[0])[:, None], rows), 1)
    return patterns


def _draw_rows(cdf: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws; cdf (..., m) non-decreasing, uniforms in [0, 1)."""
    index = (cdf <= uniforms[..., None] * cdf[..., -1:]).sum(axis=-1)
    return np.minimum(index, cdf.shape[-1] - 1)


def _single_or_batch(patterns: np.ndarray, size: Optional[int]) -> PatternOrBatch:
    return FockPattern(patterns[0]) if size is None else patterns


def apply_loss(n: int, loss: float, rng: np.random.Generator, size: Optional[int] = None):
    """Survivor mask: each photon kept independently with probability 1 - loss."""
    shape = (n,) if size is None else (size, n)
    return rng.random(shape) >= loss


def collapse_internal(
    survivors: np.ndarray, overlap: float, rng: np.random.Generator
) -> InternalPartition:
    """Each survivor joins the interfering set with probability ``overlap``.

    With internal states sqrt(x)|0> + sqrt(1-x)|i>, measuring the internal
    label commutes with the interferometer, so this collapse is exact.
    """
    survivors = np.asarray(survivors, dtype=bool)
    joins = rng.random(survivors.shape) < overlap
    return InternalPartition(interfering=survivors & joins, singletons=survivors & ~joins)


@lru_cache(maxsize=None)
def _drop_one_column(c: int) -> np.ndarray:
    kept = [[j for j in range(c) if j != col] for col in range(c)]
    return np.array(kept, dtype=np.int64).reshape(c, c - 1)


def _chain_rule_rows(
    U: Unitary, modes: np.ndarray, rng: np.random.Generator, size: int
) -> np.ndarray:
    """Mode-by-mode sampling with Laplace-expanded permanents of growing minors."""
    k = len(modes)
    order = np.argsort(rng.random((size, k)), axis=1)
    columns = np.transpose(U.matrix[:, modes][:, order], (1, 0, 2))  # (size, m, k)
    rows = np.empty((size, k), dtype=np.int64)
    samples = np.arange(size)[:, None]
    for step in range(k):
        if step == 0:
            weights = np.abs(columns[:, :, 0]) ** 2
        else:
            placed = columns[samples, rows[:, :step], : step + 1]
            minors = np.transpose(placed[:, :, _drop_one_column(step + 1)], (0, 2, 1, 3))
            cofactors = batch_permanent(minors)
            amplitudes = np.einsum("bml,bl->bm", columns[:, :, : step + 1], cofactors)
            weights = np.abs(amplitudes) ** 2
        rows[:, step] = _draw_rows(np.cumsum(weights, axis=1), rng.random(size))
    return np.sort(rows, axis=1)


def _ideal_rows(U: Unitary, modes: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
    k = len(modes)
    if k == 0 or size == 0:
        return np.empty((size, k), dtype=np.int64)
    if multiset_count(U.m, k) <= settings.enumeration_limit:
        table, probabilities = _enumerated_outputs(U, tuple(int(mode) for mode in modes))
        cdf = np.cumsum(probabilities)
        picks = np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right")
        return table[np.minimum(picks, len(table) - 1)]
    logger.debug("chain-rule sampling: m=%d k=%d size=%d", U.m, k, size)
    block = settings.sample_block_size
    return np.concatenate(
        [
            _chain_rule_rows(U, modes, rng, min(block, size - start))
            for start in range(0, size, block)
        ]
    )


def sample_ideal_output(
    U: Unitary, input_modes: Sequence[int], rng: np.random.Generator, size: Optional[int] = None
) -> PatternOrBatch:
    """Indistinguishable photons entering ``input_modes``; exact sampling."""
    modes = _input_modes(len(input_modes), U.m, input_modes)
    rows = _ideal_rows(U, modes, rng, 1 if size is None else size)
    return _single_or_batch(_counts(rows, U.m), size)


def _place_classically(
    U: Unitary, modes: np.ndarray, mask: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Each masked photon lands in mode j with probability |U[j, mode]|^2."""
    cdf = np.cumsum(np.abs(U.matrix[:, modes]) ** 2, axis=0).T  # (photons, m)
    rows = _draw_rows(cdf[None, :, :], rng.random(mask.shape))
    patterns = np.zeros((mask.shape[0], U.m), dtype=np.int64)
    samples, photons = np.nonzero(mask)
    np.add.at(patterns, (samples, rows[samples, photons]), 1)
    return patterns


def _interfering_groups(mask: np.ndarray) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    codes = mask.astype(np.int64) @ (1 << np.arange(mask.shape[1], dtype=np.int64))
    for code in np.unique(codes):
        yield np.flatnonzero(codes == code), np.flatnonzero(mask[codes == code][0])


def sample_noisy_patterns(
    U: Unitary,
    n: int,
    noise: NoiseParams,
    rng: np.random.Generator,
    size: int,
    input_modes: Optional[Sequence[int]] = None,
) -> np.ndarray:
    modes = _input_modes(n, U.m, input_modes)
    survivors = apply_loss(n, noise.loss, rng, size)
    partition = collapse_internal(survivors, noise.overlap, rng)
    patterns = _place_classically(U, modes, partition.singletons, rng)
    for samples, photons in _interfering_groups(partition.interfering):
        if len(photons):
            rows = _ideal_rows(U, modes[photons], rng, len(samples))
            patterns[samples] += _counts(rows, U.m)
    return patterns


def sample_noisy_output(
    U: Unitary,
    n: int,
    noise: NoiseParams,
    rng: np.random.Generator,
    unitary_id: Optional[str] = None,
) -> ClickRecord:
    """Loss, internal collapse, then joint interference of the collapsed set."""
    pattern = FockPattern(sample_noisy_patterns(U, n, noise, rng, 1)[0])
    return ClickRecord(unitary_id or U.content_hash, pattern, n)


def sample_distinguishable(
    U: Unitary,
    n: int,
    rng: np.random.Generator,
    size: Optional[int] = None,
    input_modes: Optional[Sequence[int]] = None,
) -> PatternOrBatch:
    modes = _input_modes(n, U.m, input_modes)
    mask = np.ones((1 if size is None else size, n), dtype=bool)
    return _single_or_batch(_place_classically(U, modes, mask, rng), size)


def sample_meanfield(
    U: Unitary,
    n: int,
    rng: np.random.Generator,
    size: Optional[int] = None,
    input_modes: Optional[Sequence[int]] = None,
) -> PatternOrBatch:
    """Simulated bosons: random input phases, then n i.i.d. draws from the mean field."""
    modes = _input_modes(n, U.m, input_modes)
    count = 1 if size is None else size
    if n == 0:
        return _single_or_batch(np.zeros((count, U.m), dtype=np.int64), size)
    phases = np.exp(2j * np.pi * rng.random((count, n)))
    field = np.abs(phases @ U.matrix[:, modes].T) ** 2 / n  # (count, m)
    rows = _draw_rows(np.cumsum(field, axis=1)[:, None, :], rng.random((count, n)))
    return _single_or_batch(_counts(rows, U.m), size)


def _uniform_rows(m: int, n: int, rng: np.random.Generator, size: int) -> np.ndarray:
    return np.sort(np.argsort(rng.random((size, m)), axis=1)[:, :n], axis=1)


def sample_uniform_cf(
    m: int, n: int, rng: np.random.Generator, size: Optional[int] = None
) -> PatternOrBatch:
    """Uniform over the C(m, n) collision-free patterns."""
    if not 0 <= n <= m:
        raise InvalidInputError(f"Need 0 <= n <= m, got n={n}, m={m}")
    rows = _uniform_rows(m, n, rng, 1 if size is None else size)
    return _single_or_batch(_counts(rows, m), size)


def _check_dad(m: int, n: int, K: int, alpha: float) -> None:
    if not n <= K <= m:
        raise InvalidInputError(f"K must lie in [n, m] = [{n}, {m}], got {K}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")
    if math.comb(K, n) == math.comb(m, n) and alpha < 1.0:
        raise InvalidInputError(f"No pattern of {n} photons lies outside the first {K} modes")


def sample_dad(
    m: int,
    n: int,
    K: int,
    alpha: float,
    rng: np.random.Generator,
    size: Optional[int] = None,
) -> PatternOrBatch:
    """Mixture: uniform on patterns inside the first K modes w.p. alpha, else uniform outside."""
    _check_dad(m, n, K, alpha)
    count = 1 if size is None else size
    inside = rng.random(count) < alpha
    rows = np.empty((count, n), dtype=np.int64)
    rows[inside] = _uniform_rows(K, n, rng, int(inside.sum()))
    pending = np.flatnonzero(~inside)
    while len(pending):
        draws = _uniform_rows(m, n, rng, len(pending))
        outside = (draws >= K).any(axis=1)
        rows[pending[outside]] = draws[outside]
        pending = pending[~outside]
    return _single_or_batch(_counts(rows, m), size)


def dad_distribution(m: int, n: int, K: int, alpha: float) -> Dict[FockPattern, float]:
    _check_dad(m, n, K, alpha)
    inside_count = math.comb(K, n)
    outside_count = math.comb(m, n) - inside_count
    distribution = {}
    for modes in combinations(range(m), n):
        if modes and modes[-1] >= K:
            probability = (1.0 - alpha) / outside_count
        else:
            probability = alpha / inside_count
        distribution[FockPattern.from_modes(modes, m)] = probability
    return distribution


def dad_uniform_tvd(m: int, n: int, K: int, alpha: float) -> float:
    """Closed-form TVD between D_ad and the collision-free uniform distribution."""
    _check_dad(m, n, K, alpha)
    total = math.comb(m, n)
    inside = math.comb(K, n)
    outside = total - inside
    distance = abs(alpha - inside / total)
    if outside:
        distance += abs((1.0 - alpha) - outside / total)
    return 0.5 * distance


def loss_distribution(n: int, loss: float) -> np.ndarray:
    """P(l) for l = 0..n lost photons."""
    return binom.pmf(np.arange(n + 1), n, loss)


def oracle_cost(m: int, n: int, lost: int) -> int:
    k = n - lost
    return math.comb(m, k) * 2**k * math.comb(n, lost)


def _convolve_classical(
    distribution: Dict[Tuple[int, ...], float], probabilities: np.ndarray
) -> Dict[Tuple[int, ...], float]:
    result: Dict[Tuple[int, ...], float] = {}
    support = np.flatnonzero(probabilities > 0)
    for modes, weight in distribution.items():
        for mode in support:
            key = tuple(sorted(modes + (int(mode),)))
            result[key] = result.get(key, 0.0) + weight * probabilities[mode]
    return result


def exact_noisy_distribution(
    U: Unitary, n: int, noise: NoiseParams, lost: int
) -> Dict[FockPattern, float]:
    """Output distribution conditioned on exactly ``lost`` photons lost, by brute force."""
    if not 0 <= lost <= n:
        raise InvalidInputError(f"Loss sector must lie in [0, {n}], got {lost}")
    cost = oracle_cost(U.m, n, lost)
    if cost > settings.oracle_budget:
        raise BudgetExceededError(
            f"Exact distribution needs {cost} terms, budget is {settings.oracle_budget}"
        )
    modes = _input_modes(n, U.m, None)
    single = np.abs(U.matrix[:, modes]) ** 2
    x = noise.overlap
    k = n - lost
    subsets = list(combinations(range(n), k))
    total: Dict[Tuple[int, ...], float] = {}
    for survivors in subsets:
        for size in range(k + 1):
            weight = x**size * (1.0 - x) ** (k - size) / len(subsets)
            if weight == 0.0:
                continue
            for group in combinations(survivors, size):
                table, probabilities = _enumerated_outputs(U, tuple(int(modes[p]) for p in group))
                distribution = dict(zip(map(tuple, table.tolist()), probabilities))
                for photon in survivors:
                    if photon not in group:
                        distribution = _convolve_classical(distribution, single[:, photon])
                for key, probability in distribution.items():
                    total[key] = total.get(key, 0.0) + weight * probability
    return {FockPattern.from_modes(key, U.m): probability for key, probability in total.items()}


def exact_correlators(U: Unitary, n: int, overlap: float, lost: int = 0) -> np.ndarray:
    """Closed-form C_ij = <n_i n_j> - <n_i><n_j> (m x m) for the noise model in sector ``lost``.

    Survivor subsets are equiprobable, so ordered survivor pairs appear with
    weight k(k-1)/(n(n-1)) and single survivors with weight k/n.
    """
    if not 0 <= lost <= n:
        raise InvalidInputError(f"Loss sector must lie in [0, {n}], got {lost}")
    columns = U.matrix[:, _input_modes(n, U.m, None)]
    single = np.abs(columns) ** 2
    means = single.sum(axis=1)
    diagonal_pairs = single @ single.T
    gram = np.abs(columns @ columns.conj().T) ** 2
    pairs = np.outer(means, means) - diagonal_pairs + overlap**2 * (gram - diagonal_pairs)
    k = n - lost
    pair_weight = k * (k - 1) / (n * (n - 1)) if n > 1 else 0.0
    single_weight = k / n if n else 0.0
    return pair_weight * pairs - single_weight**2 * np.outer(means, means)


def exact_bunching(U: Unitary, n: int, overlap: float, lost: int, K: int) -> float:
    """P(all survivors land in the first K modes), Perm(H o J) averaged over survivor subsets."""
    if not 0 <= lost <= n:
        raise InvalidInputError(f"Loss sector must lie in [0, {n}], got {lost}")
    if not 0 <= K <= U.m:
        raise InvalidInputError(f"K must lie in [0, {U.m}], got {K}")
    k = n - lost
    if k == 0:
        return 1.0
    columns = U.matrix[:K, _input_modes(n, U.m, None)]
    subsets = np.array(list(combinations(range(n), k)), dtype=np.int64).reshape(-1, k)
    restricted = columns[:, subsets].transpose(1, 0, 2)  # (subsets, K, k)
    gram = np.einsum("bji,bjl->bil", restricted.conj(), restricted)
    internal = np.full((k, k), overlap) + (1.0 - overlap) * np.eye(k)
    return float(np.mean(batch_permanent(gram * internal).real))


def sample_species_patterns(
    species: Species,
    U: Unitary,
    n: int,
    noise: NoiseParams,
    rng: np.random.Generator,
    size: int,
    K: Optional[int] = None,
    alpha: Optional[float] = None,
) -> np.ndarray:
    """``size`` runs of one particle model; loss is applied to every model first."""
    species = Species(species)
    if species is Species.IDEAL:
        return sample_noisy_patterns(U, n, noise, rng, size)
    modes = _input_modes(n, U.m, None)
    survivors = apply_loss(n, noise.loss, rng, size)
    if species is Species.DISTINGUISHABLE:
        return _place_classically(U, modes, survivors, rng)
    patterns = np.zeros((size, U.m), dtype=np.int64)
    if species is Species.MEANFIELD:
        for samples, photons in _interfering_groups(survivors):
            patterns[samples] = sample_meanfield(
                U, len(photons), rng, size=len(samples), input_modes=modes[photons]
            )
        return patterns
    counts = survivors.sum(axis=1)
    for k in np.unique(counts):
        samples = np.flatnonzero(counts == k)
        if k == 0:
            continue
        if species is Species.UNIFORM:
            patterns[samples] = sample_uniform_cf(U.m, int(k), rng, size=len(samples))
        else:
            if K is None or alpha is None:
                raise InvalidInputError("D_ad sampling needs K and alpha")
            patterns[samples] = sample_dad(U.m, int(k), K, alpha, rng, size=len(samples))
    return patterns
