import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat
from scipy.optimize import minimize_scalar
from scipy.stats import binom

from pqf_bench.conf import settings
from pqf_bench.fields import Attribute, FloatAttribute
from pqf_bench.models import ResourceModel
from pqf_bench.samplers import ClickBatch, ClickRecord, Species

logger = logging.getLogger(__name__)

Records = Union[ClickBatch, np.ndarray, Iterable[ClickRecord]]


class InsufficientDataError(ValueError):
    pass


class UndefinedMomentError(ValueError):
    pass


class InvalidParameterError(ValueError):
    pass


class TestName(str, Enum):
    __test__ = False

    LOSS = "t_loss"
    NM = "t_d1"
    CV = "t_d2"
    SKEWNESS = "t_d3"
    BUNCHING = "t_d4"


MOMENT_TESTS = (TestName.NM, TestName.CV, TestName.SKEWNESS)


class Pooling(str, Enum):
    ENTRYWISE = "entrywise"
    PER_UNITARY = "per_unitary"


class Thresholds(BaseModel):
    """Pass bounds c n^-eps_loss (t_loss), c n^-(1+eps_moments) (t_d1..3) and
    c n^-(gamma+eps_bunching) (t_d4). All overridable.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma: PositiveFloat = 0.5
    eps_loss: PositiveFloat = 0.5
    eps_moments: PositiveFloat = 0.5
    eps_bunching: PositiveFloat = 0.5
    c_loss: PositiveFloat = 1.0
    c_nm: PositiveFloat = 1.0
    c_cv: PositiveFloat = 1.0
    c_skewness: PositiveFloat = 1.0
    c_bunching: PositiveFloat = 1.0
    # Coefficient c of the NM_id correction -c n^-(1+gamma); 0 keeps the leading order.
    nm_correction: float = Field(0.0, ge=0.0)
    # Leading constant of 1 - c n(m-K)/m.
    bunching_constant: PositiveFloat = 1.0

    def bound(self, test: TestName, n: int) -> float:
        test = TestName(test)
        if test is TestName.LOSS:
            return self.c_loss * n ** (-self.eps_loss)
        if test is TestName.BUNCHING:
            return self.c_bunching * n ** (-(self.gamma + self.eps_bunching))
        constant = {TestName.NM: self.c_nm, TestName.CV: self.c_cv}.get(test, self.c_skewness)
        return constant * n ** (-(1.0 + self.eps_moments))


class TestVerdict(ResourceModel):
    __test__ = False

    test = Attribute()
    n = Attribute()
    sector = Attribute()
    measured = FloatAttribute()
    reference = FloatAttribute()
    deviation = FloatAttribute()
    bound = FloatAttribute()
    error = FloatAttribute()
    passed = Attribute()
    inconclusive = Attribute()
    reason = Attribute()

    class Meta:
        resource_type = "verdicts"

    @staticmethod
    def verdict_id(test: TestName, n: int, sector: Optional[int]) -> str:
        test = TestName(test).value
        return f"n{n}-{test}" if sector is None else f"n{n}-{test}-l{sector}"

    @classmethod
    def build(
        cls,
        test: TestName,
        n: int,
        measured: float,
        bound: float,
        reference: Optional[float] = None,
        error: Optional[float] = None,
        sector: Optional[int] = None,
    ) -> "TestVerdict":
        deviation = measured if reference is None else abs(measured - reference)
        inconclusive = error is not None and abs(deviation - bound) <= (
            settings.inconclusive_sigma * error
        )
        return cls(
            id=cls.verdict_id(test, n, sector),
            test=TestName(test).value,
            n=n,
            sector=sector,
            measured=float(measured),
            reference=None if reference is None else float(reference),
            deviation=float(deviation),
            bound=float(bound),
            error=None if error is None else float(error),
            passed=bool(deviation <= bound),
            inconclusive=bool(inconclusive),
        )

    @classmethod
    def missing(
        cls, test: TestName, n: int, sector: Optional[int], bound: float, reason: str
    ) -> "TestVerdict":
        return cls(
            id=cls.verdict_id(test, n, sector),
            test=TestName(test).value,
            n=n,
            sector=sector,
            bound=float(bound),
            passed=False,
            inconclusive=True,
            reason=reason,
        )

    @property
    def status(self) -> str:
        if self.inconclusive:
            return "inconclusive"
        return "pass" if self.passed else "fail"


@dataclass(frozen=True)
class MomentTriple:
    nm: float
    cv: float
    skewness: float

    def raw(self, test: TestName) -> float:
        return {TestName.NM: self.nm, TestName.CV: self.cv, TestName.SKEWNESS: self.skewness}[
            TestName(test)
        ]

    def value(self, test: TestName) -> float:
        """The moment behind ``test``; NaN marks it undefined."""
        value = self.raw(test)
        if math.isnan(value):
            raise UndefinedMomentError(f"{TestName(test).value} is undefined for this C-dataset")
        return value


@dataclass(frozen=True)
class CDataSet:
    """C_ij for i < j, ordered as ``np.triu_indices(m, 1)``."""

    m: int
    values: np.ndarray
    sector: int = 0
    collisions: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.m * (self.m - 1) // 2,):
            raise InvalidParameterError(
                f"C-dataset over {self.m} modes needs {self.m * (self.m - 1) // 2} values"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, sector: int = 0, collisions: int = 0) -> "CDataSet":
        matrix = np.asarray(matrix)
        return cls(matrix.shape[0], matrix[np.triu_indices(matrix.shape[0], 1)], sector, collisions)

    @property
    def matrix(self) -> np.ndarray:
        full = np.zeros((self.m, self.m))
        full[np.triu_indices(self.m, 1)] = self.values
        return full + full.T

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


@dataclass
class ModeCounts:
    """Integer click sums of one (unitary, sector) cell; merges are exact."""

    m: int
    count: int = 0
    singles: np.ndarray = field(default=None)
    pairs: np.ndarray = field(default=None)
    collisions: int = 0

    def __post_init__(self):
        if self.singles is None:
            self.singles = np.zeros(self.m, dtype=np.int64)
        if self.pairs is None:
            self.pairs = np.zeros((self.m, self.m), dtype=np.int64)

    @classmethod
    def from_patterns(cls, patterns: np.ndarray) -> "ModeCounts":
        patterns = np.asarray(patterns, dtype=np.int64)
        return cls(
            m=patterns.shape[1],
            count=len(patterns),
            singles=patterns.sum(axis=0),
            pairs=patterns.T @ patterns,
            collisions=int((patterns > 1).any(axis=1).sum()),
        )

    def merge(self, other: "ModeCounts") -> "ModeCounts":
        if other.m != self.m:
            raise InvalidParameterError(f"Cannot merge counts over {self.m} and {other.m} modes")
        return ModeCounts(
            m=self.m,
            count=self.count + other.count,
            singles=self.singles + other.singles,
            pairs=self.pairs + other.pairs,
            collisions=self.collisions + other.collisions,
        )

    def to_cdataset(self, sector: int = 0) -> CDataSet:
        if self.count == 0:
            raise InsufficientDataError(f"No records in sector {sector}")
        singles = self.singles / self.count
        joint = self.pairs / self.count
        return CDataSet.from_matrix(joint - np.outer(singles, singles), sector, self.collisions)


class LossEstimate(NamedTuple):
    per_unitary: Dict[str, float]
    pooled: float


class SeriesGap(NamedTuple):
    exact: float
    approx: float
    kappa: float
    bound: float


def _patterns_of(records: Records) -> Tuple[np.ndarray, Optional[int]]:
    if isinstance(records, ClickBatch):
        return records.patterns, records.n
    if isinstance(records, np.ndarray):
        return records, None
    records = list(records)
    if not records:
        return np.empty((0, 0), dtype=np.int64), None
    return np.array([record.pattern for record in records], dtype=np.int64), records[0].n


def _check_window(window: Tuple[int, int], n: int) -> None:
    low, high = window
    if not 0 <= low <= high <= n:
        raise InvalidParameterError(f"Loss window {window} outside [0, {n}]")


def _fit_truncated_binomial(histogram: np.ndarray, n: int, window: Tuple[int, int]) -> float:
    low, high = window
    losses = np.arange(low, high + 1)
    counts = histogram[low : high + 1]

    def negative_log_likelihood(loss: float) -> float:
        probabilities = binom.pmf(losses, n, loss)
        total = probabilities.sum()
        if total <= 0:
            return np.inf
        return -float(np.sum(counts * np.log(np.maximum(probabilities / total, 1e-300))))

    result = minimize_scalar(negative_log_likelihood, bounds=(0.0, 1.0), method="bounded")
    return float(result.x)


def estimate_loss(
    batches: Iterable[ClickBatch], n: int, window: Optional[Tuple[int, int]] = None
) -> LossEstimate:
    """Mean lost fraction per unitary, pooled by the mean over unitaries.

    With a ``window`` narrower than [0, n] only sectors inside it are kept and
    lambda is the maximum-likelihood fit of the binomial truncated to it.
    """
    per_unitary: Dict[str, float] = {}
    for batch in batches:
        if batch.n != n:
            raise InvalidParameterError(f"Batch {batch.unitary_id} has n={batch.n}, expected {n}")
        if not len(batch):
            continue
        histogram = np.bincount(batch.lost, minlength=n + 1)
        if window is None or tuple(window) == (0, n):
            per_unitary[batch.unitary_id] = float(batch.lost.mean() / n) if n else 0.0
            continue
        _check_window(window, n)
        if histogram[window[0] : window[1] + 1].sum() == 0:
            continue
        per_unitary[batch.unitary_id] = _fit_truncated_binomial(histogram, n, window)
    if not per_unitary:
        raise InsufficientDataError("No records to estimate loss from")
    pooled = math.fsum(per_unitary.values()) / len(per_unitary)
    logger.debug("loss estimate %.6f over %d unitaries", pooled, len(per_unitary))
    return LossEstimate(per_unitary, pooled)


def test_loss(
    loss: float, n: int, thresholds: Thresholds, error: Optional[float] = None
) -> TestVerdict:
    bound = thresholds.bound(TestName.LOSS, n)
    return TestVerdict.build(TestName.LOSS, n, loss, bound, error=error)


test_loss.__test__ = False


def loss_window(loss: float, n: int, confidence: float) -> Tuple[int, int]:
    """Chernoff window [ceil(lambda n) - l0, ceil(lambda n) + l0] clamped to [0, n]."""
    if not 0.0 < confidence < 1.0:
        raise InvalidParameterError(f"Confidence must lie in (0, 1), got {confidence}")
    if not 0.0 <= loss <= 1.0:
        raise InvalidParameterError(f"Loss must lie in [0, 1], got {loss}")
    expected = loss * n
    center = math.ceil(round(expected, 9))
    half_width = math.ceil(round(math.sqrt(3.0 * expected * math.log(2.0 / (1.0 - confidence))), 9))
    return max(0, center - half_width), min(n, center + half_width)


def sector_counts(records: Records, m: Optional[int] = None) -> ModeCounts:
    patterns, _ = _patterns_of(records)
    if not len(patterns):
        if m is None:
            raise InsufficientDataError("No records")
        return ModeCounts(m)
    return ModeCounts.from_patterns(patterns)


def compute_cdataset(records: Records, m: int, sector: Optional[int] = None) -> CDataSet:
    """C_ij = f(i and j) - f(i) f(j) over occupation numbers of one loss sector."""
    patterns, n = _patterns_of(records)
    if not len(patterns):
        raise InsufficientDataError("Empty sector")
    if patterns.shape[1] != m:
        raise InvalidParameterError(f"Patterns have {patterns.shape[1]} modes, expected {m}")
    totals = set(patterns.sum(axis=1).tolist())
    if len(totals) != 1:
        raise InvalidParameterError(f"Records span several loss sectors: totals {sorted(totals)}")
    if sector is None:
        sector = n - totals.pop() if n is not None else 0
    counts = ModeCounts.from_patterns(patterns)
    if counts.collisions:
        logger.debug("%d records with collisions in sector %d", counts.collisions, sector)
    return counts.to_cdataset(sector)


def _moments(values: np.ndarray, n_eff: int, m: int) -> MomentTriple:
    mean = math.fsum(values) / len(values)
    centered = values - mean
    variance = math.fsum(centered**2) / len(values)
    if mean == 0:
        raise UndefinedMomentError("C-dataset mean is zero: CV and S are undefined")
    third = math.fsum(centered**3) / len(values)
    # S is undefined at zero variance
    return MomentTriple(
        nm=m * m * mean / n_eff,
        cv=math.sqrt(variance) / mean,
        skewness=third / variance**1.5 if variance > 0 else math.nan,
    )


def haar_average_moments(
    datasets: Sequence[CDataSet],
    n_eff: int,
    m: int,
    pooling: Pooling = Pooling.ENTRYWISE,
) -> MomentTriple:
    """NM, CV and S of the Haar-averaged C-dataset.

    ``entrywise`` averages C_ij across unitaries first; ``per_unitary``
    computes the moments of every unitary's dataset and averages those.
    """
    if n_eff < 2:
        raise InvalidParameterError(f"Moments need at least two detected photons, got {n_eff}")
    if not datasets:
        raise InsufficientDataError("No C-datasets to average")
    if Pooling(pooling) is Pooling.ENTRYWISE:
        return _moments(np.mean([dataset.values for dataset in datasets], axis=0), n_eff, m)
    triples = [_moments(dataset.values, n_eff, m) for dataset in datasets]
    return MomentTriple(
        nm=math.fsum(t.nm for t in triples) / len(triples),
        cv=math.fsum(t.cv for t in triples) / len(triples),
        skewness=math.fsum(t.skewness for t in triples) / len(triples),
    )


_THEORY_ALIASES = {
    "id": "id",
    Species.IDEAL.value: "id",
    "d": "d",
    Species.DISTINGUISHABLE.value: "d",
    "sb": "sb",
    Species.MEANFIELD.value: "sb",
}


def theory_moments(
    species: Union[str, Species], n_eff: int, nm_correction: float = 0.0, gamma: float = 0.5
) -> MomentTriple:
    """Haar-averaged leading-order NM, CV and S for m >> n^2."""
    if n_eff < 2:
        raise InvalidParameterError(f"Theory moments need n_eff >= 2, got {n_eff}")
    key = _THEORY_ALIASES.get(getattr(species, "value", species))
    if key == "id":
        return MomentTriple(
            nm=-1.0 - nm_correction * n_eff ** (-(1.0 + gamma)),
            cv=2.0 / n_eff - 1.0,
            skewness=2.0 - 30.0 / n_eff,
        )
    if key == "d":
        return MomentTriple(
            nm=1.0,
            cv=-math.sqrt(3.0 / n_eff),
            skewness=-(26.0 / math.sqrt(27.0)) * math.sqrt(1.0 / n_eff),
        )
    if key == "sb":
        return MomentTriple(nm=-1.0, cv=1.0 / (2.0 * n_eff) - 1.0, skewness=2.0 - 21.0 / n_eff)
    raise InvalidParameterError(f'No theory moments for species "{species}"')


def test_moments(
    measured: MomentTriple,
    n: int,
    thresholds: Thresholds,
    sector: int = 0,
    reference: Optional[MomentTriple] = None,
    errors: Optional[MomentTriple] = None,
) -> List[TestVerdict]:
    """t_d1..t_d3 against the ideal reference at n_eff = n - sector."""
    if reference is None:
        reference = theory_moments(
            "id", n - sector, nm_correction=thresholds.nm_correction, gamma=thresholds.gamma
        )
    verdicts = []
    for test in MOMENT_TESTS:
        bound = thresholds.bound(test, n)
        try:
            value, expected = measured.value(test), reference.value(test)
        except UndefinedMomentError as error:
            verdicts.append(TestVerdict.missing(test, n, sector, bound, str(error)))
            continue
        spread = None if errors is None else errors.raw(test)
        verdicts.append(
            TestVerdict.build(
                test,
                n,
                value,
                bound,
                reference=expected,
                error=spread if spread is not None and math.isfinite(spread) else None,
                sector=sector,
            )
        )
    return verdicts


test_moments.__test__ = False


def _sector_patterns(batch: ClickBatch, sector: int) -> np.ndarray:
    return batch.patterns[batch.lost == sector]


def estimate_bunching(
    batches: Iterable[ClickBatch], K: int, sector: int
) -> Tuple[Dict[str, float], float]:
    """Share of sector records with every click in the first K modes, per unitary and mean."""
    per_unitary: Dict[str, float] = {}
    for batch in batches:
        patterns = _sector_patterns(batch, sector)
        if not len(patterns):
            continue
        if not 0 <= K <= patterns.shape[1]:
            raise InvalidParameterError(f"K must lie in [0, {patterns.shape[1]}], got {K}")
        per_unitary[batch.unitary_id] = float(np.mean(patterns[:, K:].sum(axis=1) == 0))
    if not per_unitary:
        raise InsufficientDataError(f"No records in sector {sector}")
    return per_unitary, math.fsum(per_unitary.values()) / len(per_unitary)


def default_bunching_modes(m: int, n: int) -> int:
    return m - n + 1


def theory_bunching_id(n_eff: int, m: int, K: int, constant: float = 1.0) -> float:
    if not 0 <= K <= m:
        raise InvalidParameterError(f"K must lie in [0, {m}], got {K}")
    return 1.0 - constant * n_eff * (m - K) / m


def theory_bunching_shift(x: float, n_eff: int, m: int, p_next: float) -> float:
    """Drop of the full-bunching probability caused by overlap x < 1."""
    return (1.0 - x * x) * (n_eff - 1) * n_eff / m * p_next


def test_bunching(
    measured: float,
    theory: float,
    n: int,
    thresholds: Thresholds,
    sector: int = 0,
    error: Optional[float] = None,
) -> TestVerdict:
    return TestVerdict.build(
        TestName.BUNCHING,
        n,
        measured,
        thresholds.bound(TestName.BUNCHING, n),
        reference=theory,
        error=error,
        sector=sector,
    )


test_bunching.__test__ = False


def _exact(value: float) -> Fraction:
    return Fraction(repr(float(value)))


def chebyshev_sample_size(precision: float, confidence: float, variance_bound: float) -> int:
    """Smallest L with 1 - var / (L eps^2) >= confidence, in exact rational arithmetic."""
    if precision <= 0:
        raise InvalidParameterError(f"Precision must be positive, got {precision}")
    if not 0 <= confidence < 1:
        raise InvalidParameterError(f"Confidence must lie in [0, 1), got {confidence}")
    if variance_bound < 0:
        raise InvalidParameterError(f"Variance bound must be non-negative, got {variance_bound}")
    if variance_bound == 0:
        return 1
    ratio = _exact(variance_bound) / ((1 - _exact(confidence)) * _exact(precision) ** 2)
    return max(1, math.ceil(ratio))


def required_sector_records(n_eff: int, m: int, precision: float, confidence: float) -> int:
    """Records per unitary before a sector's C-dataset is trusted.

    Chebyshev on each C_ij with the pair click rate n_eff (n_eff - 1) / m^2 as
    variance bound and ``precision`` times the correlator scale n_eff / m^2.
    """
    if n_eff < 2:
        raise InvalidParameterError(f"Correlators need n_eff >= 2, got {n_eff}")
    return chebyshev_sample_size(
        precision * n_eff / m**2, confidence, n_eff * (n_eff - 1) / m**2
    )


def lemma_series_gap(x: float, n: int) -> SeriesGap:
    """Geometric series sum_{i<=n} x^i against its first-order expansion around x = 1."""
    if not 0.0 <= x < 1.0:
        raise InvalidParameterError(f"x must lie in [0, 1), got {x}")
    delta = 1.0 - x
    exact = -math.expm1((n + 1) * math.log1p(-delta)) / delta
    approx = n + 1 - n * (n + 1) * delta / 2.0
    return SeriesGap(exact, approx, exact - approx, n * (n + 1) * delta / 2.0)


def uniform_correlator(m: int, n: int) -> float:
    """C_ij of the collision-free uniform distribution (identical for every pair)."""
    if not 0 <= n <= m or m < 2:
        raise InvalidParameterError(f"Need 0 <= n <= m and m >= 2, got n={n}, m={m}")
    return n * (n - 1) / (m * (m - 1)) - n * n / (m * m)


def uniform_normalized_mean(m: int, n: int) -> float:
    return m * m * uniform_correlator(m, n) / n


def nm_distinguishability_bound(x: float, n: int, gamma: float) -> float:
    """Upper bound on |NM_id - NM_x| for overlap x at m = n^(2+gamma)."""
    if not 0.0 <= x <= 1.0:
        raise InvalidParameterError(f"x must lie in [0, 1], got {x}")
    if x == 1.0:
        return 0.0
    series = lemma_series_gap(x, n).exact
    m = n ** (2.0 + gamma)
    gap = (n + 1 - series) + ((n + 1) ** 2 - series**2)
    return m * m / n * gap / n ** (2.0 + 2.0 * gamma)


def truncation_order(precision: float, failure: float, loss: float, overlap: float) -> int:
    """Order k a k-truncated permanent expansion needs at alpha = (1 - loss) x^2."""
    alpha = (1.0 - loss) * overlap**2
    if not 0.0 < alpha < 1.0:
        raise InvalidParameterError(f"alpha = (1 - loss) x^2 must lie in (0, 1), got {alpha}")
    if not (0.0 < precision < 1.0 and 0.0 < failure < 1.0):
        raise InvalidParameterError("Precision and failure probability must lie in (0, 1)")
    order = 2.0 * (math.log(precision) + math.log(failure) + math.log(1.0 - alpha))
    return math.ceil(order / math.log(alpha))


def lossy_simulator_regime(n: int) -> float:
    """Loss level 1 - n^-1/2 where lossy BosonSampling becomes classically simulable."""
    if n < 1:
        raise InvalidParameterError(f"n must be positive, got {n}")
    return 1.0 - n**-0.5


def bootstrap_error(
    statistic: Callable[[np.ndarray], float],
    size: int,
    rng: np.random.Generator,
    resamples: Optional[int] = None,
) -> Optional[float]:
    """Standard error of ``statistic`` over index resamples; None when fewer than two succeed."""
    resamples = settings.bootstrap_resamples if resamples is None else resamples
    if size < 2:
        return None
    values = []
    for _ in range(resamples):
        index = rng.integers(0, size, size)
        try:
            value = statistic(index)
        except (UndefinedMomentError, InsufficientDataError):
            continue
        if math.isfinite(value):
            values.append(value)
    if len(values) < 2:
        return None
    return float(np.std(values, ddof=1))
