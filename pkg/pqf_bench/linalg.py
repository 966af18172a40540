import hashlib
import math
from functools import lru_cache
from itertools import combinations, combinations_with_replacement
from typing import Dict, Iterable, Iterator, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from pqf_bench.conf import settings

ComplexMatrix = np.ndarray
SeedLike = Union[int, Sequence[int], np.random.SeedSequence, np.random.Generator]


class ShapeError(ValueError):
    pass


class InvalidDimensionError(ValueError):
    pass


class NotUnitaryError(ValueError):
    pass


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class FockPattern(tuple):
    """Occupation numbers over m modes."""

    def __new__(cls, occupations: Iterable[int]) -> "FockPattern":
        values = tuple(int(value) for value in occupations)
        if any(value < 0 for value in values):
            raise ShapeError(f"Negative occupation in {values}")
        return super().__new__(cls, values)

    @classmethod
    def from_modes(cls, modes: Iterable[int], m: int) -> "FockPattern":
        counts = [0] * m
        for mode in modes:
            if not 0 <= mode < m:
                raise ShapeError(f"Mode {mode} outside [0, {m})")
            counts[mode] += 1
        return cls(counts)

    @classmethod
    def canonical(cls, n: int, m: int) -> "FockPattern":
        if n > m:
            raise ShapeError(f"Canonical pattern needs n <= m, got n={n}, m={m}")
        return cls([1] * n + [0] * (m - n))

    @property
    def m(self) -> int:
        return len(self)

    @property
    def total(self) -> int:
        return sum(self)

    @property
    def is_collision_free(self) -> bool:
        return all(value <= 1 for value in self)

    @property
    def modes(self) -> Tuple[int, ...]:
        """Occupied modes, repeated by occupation."""
        return tuple(mode for mode, count in enumerate(self) for _ in range(count))

    def __repr__(self) -> str:
        return f"FockPattern({tuple(self)})"


class Unitary:
    def __init__(self, matrix: ComplexMatrix, check: bool = True) -> None:
        matrix = np.array(matrix, dtype=np.complex128)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ShapeError(f"Unitary must be square, got shape {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise NotUnitaryError("Unitary has non-finite entries")
        if check:
            deviation = unitarity_deviation(matrix)
            if deviation > settings.unitarity_tolerance:
                raise NotUnitaryError(f"max|U^dagger U - I| = {deviation:.3e}")
        matrix.setflags(write=False)
        self.matrix = matrix
        self._hash: Optional[str] = None

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def content_hash(self) -> str:
        if self._hash is None:
            digest = hashlib.sha256(self.matrix.astype("<c16").tobytes()).hexdigest()
            self._hash = f"sha256:{digest}"
        return self._hash

    def __eq__(self, other) -> bool:
        return isinstance(other, Unitary) and self.content_hash == other.content_hash

    def __hash__(self) -> int:
        return hash(self.content_hash)

    def __matmul__(self, other: "Unitary") -> "Unitary":
        return Unitary(self.matrix @ other.matrix)

    def __repr__(self) -> str:
        return f"<Unitary m={self.m} {self.content_hash[:15]}>"

    def to_json(self) -> Dict:
        return {"m": self.m, "re": self.matrix.real.tolist(), "im": self.matrix.imag.tolist()}

    @classmethod
    def from_json(cls, data: Mapping) -> "Unitary":
        try:
            m = int(data["m"])
            real = np.array(data["re"], dtype=float)
            imag = np.array(data["im"], dtype=float)
            matrix = np.empty(real.shape, dtype=np.complex128)
            matrix.real, matrix.imag = real, imag
        except (KeyError, TypeError, ValueError) as error:
            raise ShapeError(f"Malformed unitary record: {error}") from error
        if matrix.shape != (m, m):
            raise ShapeError(f"Unitary declared m={m} but has shape {matrix.shape}")
        return cls(matrix)

    @classmethod
    def identity(cls, m: int) -> "Unitary":
        return cls(np.eye(m))


def unitarity_deviation(matrix: ComplexMatrix) -> float:
    matrix = np.asarray(matrix)
    return float(np.max(np.abs(matrix.conj().T @ matrix - np.eye(matrix.shape[0]))))


def haar_random_unitary(m: int, seed: SeedLike) -> Unitary:
    """Haar-distributed m x m unitary: complex Ginibre matrix, QR, phase-fixed R diagonal."""
    if m < 1:
        raise InvalidDimensionError(f"Unitary dimension must be >= 1, got {m}")
    rng = as_generator(seed)
    ginibre = (rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))) / np.sqrt(2)
    q, r = np.linalg.qr(ginibre)
    diagonal = np.diagonal(r)
    q *= diagonal / np.abs(diagonal)
    return Unitary(q)


def submatrix_for(U: Unitary, T: Sequence[int], S: Sequence[int]) -> ComplexMatrix:
    """U_{T,S}: s_i copies of row i of U, then t_j copies of column j."""
    T = np.asarray(T, dtype=int)
    S = np.asarray(S, dtype=int)
    if T.shape != (U.m,) or S.shape != (U.m,):
        raise ShapeError(f"Patterns must have length {U.m}, got {T.shape} and {S.shape}")
    if T.sum() != S.sum():
        raise ShapeError(f"Input total {T.sum()} differs from output total {S.sum()}")
    rows = np.repeat(np.arange(U.m), S)
    cols = np.repeat(np.arange(U.m), T)
    return U.matrix[np.ix_(rows, cols)]


@lru_cache(maxsize=None)
def _gray_schedule(n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    steps = np.arange(1, 2 ** (n - 1), dtype=np.int64)
    gray = steps ^ (steps >> 1)
    changed = gray ^ ((steps - 1) ^ ((steps - 1) >> 1))
    # Row 0 keeps delta = +1; bit b of the gray code drives row b + 1.
    rows = np.log2(changed).astype(np.int64) + 1
    coefficients = np.where(gray & changed, -2.0, 2.0)
    signs = np.where(np.arange(2 ** (n - 1)) % 2, -1.0, 1.0)
    return rows, coefficients, signs


def batch_permanent(stack: ComplexMatrix) -> ComplexMatrix:
    """Permanents over the last two axes, Glynn's formula in Gray-code order."""
    stack = np.asarray(stack, dtype=np.complex128)
    if stack.ndim < 2 or stack.shape[-1] != stack.shape[-2]:
        raise ShapeError(f"Permanent needs square matrices, got shape {stack.shape}")
    n = stack.shape[-1]
    if n == 0:
        return np.ones(stack.shape[:-2], dtype=np.complex128)
    rows, coefficients, signs = _gray_schedule(n)
    first = stack.sum(axis=-2)
    if n == 1:
        return first[..., 0]
    increments = coefficients[:, None] * stack[..., rows, :]
    sums = np.concatenate(
        [first[..., None, :], first[..., None, :] + np.cumsum(increments, axis=-2)], axis=-2
    )
    return (np.prod(sums, axis=-1) * signs).sum(axis=-1) / 2 ** (n - 1)


def permanent(M: ComplexMatrix) -> complex:
    M = np.asarray(M)
    if M.ndim != 2:
        raise ShapeError(f"Permanent needs a matrix, got shape {M.shape}")
    return complex(batch_permanent(M))


def _factorial_product(pattern: Sequence[int]) -> int:
    return math.prod(math.factorial(int(count)) for count in pattern)


def ideal_probability(U: Unitary, T: Sequence[int], S: Sequence[int]) -> float:
    """|Perm(U_{T,S})|^2 / (prod s_i! prod t_j!)."""
    amplitude = permanent(submatrix_for(U, T, S))
    return abs(amplitude) ** 2 / (_factorial_product(S) * _factorial_product(T))


def fock_patterns(m: int, n: int, collision_free: bool = False) -> Iterator[FockPattern]:
    choose = combinations if collision_free else combinations_with_replacement
    for modes in choose(range(m), n):
        yield FockPattern.from_modes(modes, m)


def multiset_count(m: int, n: int) -> int:
    return math.comb(m + n - 1, n)


def _multiplicity_factorials(rows: np.ndarray) -> np.ndarray:
    """prod_i s_i! for sorted output mode lists, one per row."""
    equal = rows[:, :, None] == rows[:, None, :]
    running = np.tril(equal).sum(axis=-1)
    return np.prod(running, axis=-1).astype(float)


@lru_cache(maxsize=256)
def _enumerated_outputs(U: Unitary, input_modes: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
    k = len(input_modes)
    columns = U.matrix[:, list(input_modes)]
    combos = list(combinations_with_replacement(range(U.m), k))
    rows = np.array(combos, dtype=np.int64).reshape(len(combos), k)
    probabilities = np.empty(len(rows))
    chunk = settings.enumeration_chunk
    for start in range(0, len(rows), chunk):
        block = rows[start : start + chunk]
        amplitudes = batch_permanent(columns[block])
        probabilities[start : start + chunk] = np.abs(amplitudes) ** 2 / _multiplicity_factorials(
            block
        )
    rows.setflags(write=False)
    probabilities.setflags(write=False)
    return rows, probabilities


def ideal_distribution(U: Unitary, input_modes: Sequence[int]) -> Dict[FockPattern, float]:
    """Exact output distribution of indistinguishable photons entering distinct modes."""
    input_modes = tuple(int(mode) for mode in input_modes)
    if len(set(input_modes)) != len(input_modes):
        raise ShapeError(f"Input modes must be distinct, got {input_modes}")
    rows, probabilities = _enumerated_outputs(U, input_modes)
    return {
        FockPattern.from_modes(row, U.m): float(probability)
        for row, probability in zip(rows, probabilities)
    }


def total_variation_distance(p: Mapping, q: Mapping) -> float:
    keys = set(p) | set(q)
    return 0.5 * math.fsum(abs(p.get(key, 0.0) - q.get(key, 0.0)) for key in keys)
