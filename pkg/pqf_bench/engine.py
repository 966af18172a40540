import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from typing import (
    Callable,
    Dict,
    Iterable,
    List,
    Literal,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, model_validator

from pqf_bench.conf import override_settings, settings
from pqf_bench.fields import (
    Attribute,
    DateTimeAttribute,
    FloatAttribute,
    Relationship,
    canonical_dumps,
)
from pqf_bench.linalg import Unitary, haar_random_unitary
from pqf_bench.manager import RecordSet
from pqf_bench.models import ResourceModel
from pqf_bench.samplers import (
    ClickBatch,
    NoiseParams,
    Species,
    exact_bunching,
    exact_correlators,
    sample_species_patterns,
)
from pqf_bench.stats import (
    MOMENT_TESTS,
    CDataSet,
    InsufficientDataError,
    ModeCounts,
    MomentTriple,
    Pooling,
    TestName,
    TestVerdict,
    Thresholds,
    UndefinedMomentError,
    bootstrap_error,
    chebyshev_sample_size,
    haar_average_moments,
    loss_window,
    required_sector_records,
    test_bunching,
    test_loss,
    test_moments,
    theory_bunching_id,
    theory_moments,
)
from pqf_bench.version import stack_versions

logger = logging.getLogger(__name__)

# Stream tags of SeedSequence([seed, tag, ...]).
_UNITARY_STREAM = 0
_SAMPLE_STREAM = 1
_BOOTSTRAP_STREAM = 2


class PlanError(ValueError):
    pass


class ExperimentPlan(BaseModel):
    """One campaign: K'' Haar unitaries with K' runs each at a fixed n."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n: PositiveInt
    gamma: float = Field(0.5, gt=0)
    m: Optional[int] = None
    runs: PositiveInt = 10_000
    unitaries: PositiveInt = 20
    seed: int = Field(0, ge=0)
    species: Species = Species.IDEAL
    noise: NoiseParams = NoiseParams()
    thresholds: Thresholds = Thresholds()
    confidence: float = Field(0.99, gt=0, lt=1)
    bunching_modes: Optional[int] = None
    dad_alpha: Optional[float] = Field(None, ge=0, le=1)
    dad_matched: bool = False
    reference: Literal["auto", "oracle", "formula"] = "auto"
    pooling: Pooling = Pooling.PER_UNITARY

    @model_validator(mode="before")
    @classmethod
    def _default_modes(cls, values):
        if isinstance(values, dict) and values.get("m") is None and "n" in values:
            gamma = values.get("gamma", 0.5)
            values = {**values, "m": math.ceil(round(values["n"] ** (2 + gamma), 9))}
        return values

    @model_validator(mode="after")
    def _check_regime(self):
        if self.m <= self.n**2:
            raise ValueError(f"m = {self.m} must exceed n^2 = {self.n ** 2}")
        if self.bunching_modes is not None and not self.n <= self.bunching_modes <= self.m:
            raise ValueError(f"K = {self.bunching_modes} outside [{self.n}, {self.m}]")
        return self

    @property
    def K(self) -> int:
        return self.m - self.n + 1 if self.bunching_modes is None else self.bunching_modes

    @property
    def uses_oracle(self) -> bool:
        if self.reference == "auto":
            return self.n <= settings.reference_cutoff_n
        return self.reference == "oracle"

    def derive(self, **changes) -> "ExperimentPlan":
        values = self.model_dump()
        if "n" in changes or "gamma" in changes:
            values["m"] = None
        values.update(changes)
        return ExperimentPlan(**values)

    def to_json(self) -> Dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        return hashlib.sha256(canonical_dumps(self.to_json()).encode()).hexdigest()[:16]


def unitary_for(plan: ExperimentPlan, index: int) -> Unitary:
    return haar_random_unitary(plan.m, np.random.SeedSequence([plan.seed, _UNITARY_STREAM, index]))


def _settings_snapshot() -> Dict:
    return settings.model_dump()


@dataclass
class UnitarySummary:
    """Per-unitary reduction; everything a campaign needs from one batch."""

    unitary_id: str
    n: int
    m: int
    records: int
    lost_total: int
    counts: Dict[int, ModeCounts] = field(default_factory=dict)
    bunched: Dict[int, int] = field(default_factory=dict)
    reference_cdatasets: Dict[int, CDataSet] = field(default_factory=dict)
    reference_bunching: Dict[int, float] = field(default_factory=dict)

    @property
    def loss(self) -> float:
        return self.lost_total / (self.records * self.n) if self.records and self.n else 0.0

    def sector_size(self, sector: int) -> int:
        counts = self.counts.get(sector)
        return 0 if counts is None else counts.count


def summarize_batch(
    batch: ClickBatch, K: int, unitary: Optional[Unitary] = None
) -> UnitarySummary:
    """Integer sums per loss sector, plus exact ideal references when ``unitary`` is given."""
    lost = batch.lost
    summary = UnitarySummary(
        unitary_id=batch.unitary_id,
        n=batch.n,
        m=batch.m,
        records=len(batch),
        lost_total=int(lost.sum()),
    )
    for sector in np.unique(lost).tolist():
        patterns = batch.patterns[lost == sector]
        summary.counts[sector] = ModeCounts.from_patterns(patterns)
        summary.bunched[sector] = int(np.sum(patterns[:, K:].sum(axis=1) == 0))
        if unitary is None:
            continue
        if batch.n - sector >= 2:
            matrix = exact_correlators(unitary, batch.n, 1.0, sector)
            summary.reference_cdatasets[sector] = CDataSet.from_matrix(matrix, sector)
        summary.reference_bunching[sector] = exact_bunching(unitary, batch.n, 1.0, sector, K)
    return summary


class UnitaryRun(NamedTuple):
    unitary: Unitary
    batch: ClickBatch


def _simulate_unitary(plan: ExperimentPlan, index: int, alpha: Optional[float]) -> UnitaryRun:
    unitary = unitary_for(plan, index)
    block = settings.sample_block_size
    blocks = []
    for number, start in enumerate(range(0, plan.runs, block)):
        rng = np.random.default_rng(
            np.random.SeedSequence([plan.seed, _SAMPLE_STREAM, index, number])
        )
        blocks.append(
            sample_species_patterns(
                plan.species,
                unitary,
                plan.n,
                plan.noise,
                rng,
                min(block, plan.runs - start),
                K=plan.K,
                alpha=alpha,
            )
        )
    return UnitaryRun(unitary, ClickBatch(unitary.content_hash, plan.n, np.concatenate(blocks)))


def _unitary_task(task: Tuple) -> Tuple[UnitaryRun, UnitarySummary]:
    plan_json, index, alpha, snapshot = task
    plan = ExperimentPlan(**plan_json)
    with override_settings(**snapshot):
        run = _simulate_unitary(plan, index, alpha)
        reference = run.unitary if plan.uses_oracle else None
        return run, summarize_batch(run.batch, plan.K, reference)


def _summary_task(task: Tuple) -> UnitarySummary:
    batch, K, unitary, snapshot = task
    with override_settings(**snapshot):
        return summarize_batch(batch, K, unitary)


def _fan_out(function: Callable, tasks: List, workers: int) -> List:
    if workers <= 1 or len(tasks) <= 1:
        return [function(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(function, tasks))


def dad_alpha(plan: ExperimentPlan) -> float:
    """Adversary's mixing weight.

    An explicit ``dad_alpha`` wins. Otherwise the adversary aims at the first-order
    bunching formula 1 - n (m - K) / m, unless ``dad_matched`` lets it read the
    oracle mean of the campaign's own unitaries.
    """
    if plan.dad_alpha is not None:
        return plan.dad_alpha
    if plan.dad_matched and plan.uses_oracle:
        values = [
            exact_bunching(unitary_for(plan, index), plan.n, 1.0, 0, plan.K)
            for index in range(plan.unitaries)
        ]
        value = math.fsum(values) / len(values)
    else:
        value = theory_bunching_id(plan.n, plan.m, plan.K, plan.thresholds.bunching_constant)
    return min(1.0, max(0.0, value))


def simulate_campaign(plan: ExperimentPlan, workers: int = 1) -> List[UnitaryRun]:
    runs, _ = _simulate(plan, workers)
    return runs


def _simulate(
    plan: ExperimentPlan, workers: int
) -> Tuple[List[UnitaryRun], List[UnitarySummary]]:
    alpha = dad_alpha(plan) if plan.species is Species.DAD else None
    snapshot = _settings_snapshot()
    tasks = [(plan.to_json(), index, alpha, snapshot) for index in range(plan.unitaries)]
    logger.info(
        "simulating %s: n=%d m=%d K''=%d K'=%d",
        plan.species.value,
        plan.n,
        plan.m,
        plan.unitaries,
        plan.runs,
    )
    results = _fan_out(_unitary_task, tasks, workers)
    return [run for run, _ in results], [summary for _, summary in results]


class CampaignResult(ResourceModel):
    plan = Attribute()
    n = Attribute()
    m = Attribute()
    loss_estimate = FloatAttribute()
    loss_error = FloatAttribute()
    loss_window = Attribute()
    sector_counts = Attribute()
    reference = Attribute()
    missing_sectors = Attribute()
    collisions = Attribute()
    created = DateTimeAttribute()
    verdicts = Relationship(many=True)

    class Meta:
        resource_type = "campaigns"

    @property
    def passed(self) -> bool:
        return bool(self.verdicts) and all(verdict.passed for verdict in self.verdicts)

    def failing(self) -> List[TestVerdict]:
        return [verdict for verdict in self.verdicts if not verdict.passed]

    def verdicts_for(self, test: TestName) -> List[TestVerdict]:
        test = TestName(test).value
        return [verdict for verdict in self.verdicts if verdict.test == test]

    def status(self, test: TestName) -> str:
        """fail if any sector fails outright, else inconclusive if any is, else pass."""
        statuses = {verdict.status for verdict in self.verdicts_for(test)}
        if not statuses:
            return "inconclusive"
        for status in ("fail", "inconclusive"):
            if status in statuses:
                return status
        return "pass"

    def deviation(self, test: TestName) -> Tuple[Optional[float], Optional[float]]:
        """Largest deviation over sectors, with its standard error."""
        measured = [v for v in self.verdicts_for(test) if v.deviation is not None]
        if not measured:
            return None, None
        worst = max(measured, key=lambda verdict: verdict.deviation)
        return worst.deviation, worst.error


def _bootstrap_rng(plan: ExperimentPlan, *stream: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([plan.seed, _BOOTSTRAP_STREAM, *stream])
    )


def _usable(
    summaries: List[UnitarySummary], sector: int, required: int
) -> Tuple[List[UnitarySummary], Optional[str]]:
    """Summaries with at least ``required`` records in ``sector``, or why there are none."""
    required = max(required, settings.min_sector_records)
    usable = [s for s in summaries if s.sector_size(sector) >= required]
    if usable:
        return usable, None
    if not any(s.sector_size(sector) for s in summaries):
        return usable, f"no records in sector {sector}"
    return usable, f"fewer than {required} records per unitary in sector {sector}"


def _moment_verdicts(
    plan: ExperimentPlan, summaries: List[UnitarySummary], sector: int, oracle: bool
) -> List[TestVerdict]:
    n, n_eff = plan.n, plan.n - sector
    required = required_sector_records(
        n_eff, plan.m, settings.sector_precision, settings.sector_confidence
    )
    usable, reason = _usable(summaries, sector, required)
    if oracle:
        usable = [s for s in usable if sector in s.reference_cdatasets]
        reason = reason or f"no oracle reference in sector {sector}"
    if not usable:
        return [
            TestVerdict.missing(test, n, sector, plan.thresholds.bound(test, n), reason)
            for test in MOMENT_TESTS
        ]
    measured_sets = [s.counts[sector].to_cdataset(sector) for s in usable]
    reference_sets = [s.reference_cdatasets[sector] for s in usable] if oracle else None

    def moments(index: np.ndarray) -> Tuple[MomentTriple, MomentTriple]:
        measured = haar_average_moments(
            [measured_sets[i] for i in index], n_eff, plan.m, plan.pooling
        )
        if reference_sets is None:
            reference = theory_moments(
                "id",
                n_eff,
                nm_correction=plan.thresholds.nm_correction,
                gamma=plan.thresholds.gamma,
            )
        else:
            reference = haar_average_moments(
                [reference_sets[i] for i in index], n_eff, plan.m, plan.pooling
            )
        return measured, reference

    everything = np.arange(len(usable))
    try:
        measured, reference = moments(everything)
    except UndefinedMomentError as error:
        return [
            TestVerdict.missing(test, n, sector, plan.thresholds.bound(test, n), str(error))
            for test in MOMENT_TESTS
        ]
    errors = {}
    for number, test in enumerate(MOMENT_TESTS):

        def deviation(index: np.ndarray, test=test) -> float:
            resampled, resampled_reference = moments(index)
            return abs(resampled.value(test) - resampled_reference.value(test))

        errors[test] = bootstrap_error(
            deviation, len(usable), _bootstrap_rng(plan, sector, number)
        )
    error_triple = MomentTriple(
        *(errors[test] if errors[test] is not None else math.nan for test in MOMENT_TESTS)
    )
    return test_moments(measured, n, plan.thresholds, sector, reference, error_triple)


def _bunching_verdict(
    plan: ExperimentPlan, summaries: List[UnitarySummary], sector: int, oracle: bool
) -> TestVerdict:
    n = plan.n
    bound = plan.thresholds.bound(TestName.BUNCHING, n)
    # a bunching fraction has variance at most 1/4
    required = chebyshev_sample_size(
        settings.sector_precision * bound, settings.sector_confidence, 0.25
    )
    usable, reason = _usable(summaries, sector, required)
    if oracle:
        usable = [s for s in usable if sector in s.reference_bunching]
        reason = reason or f"no oracle reference in sector {sector}"
    if not usable:
        return TestVerdict.missing(TestName.BUNCHING, n, sector, bound, reason)
    fractions = np.array([s.bunched[sector] / s.sector_size(sector) for s in usable])
    if oracle:
        references = np.array([s.reference_bunching[sector] for s in usable])
    else:
        value = theory_bunching_id(n - sector, plan.m, plan.K, plan.thresholds.bunching_constant)
        references = np.full(len(usable), value)
    error = bootstrap_error(
        lambda index: abs(fractions[index].mean() - references[index].mean()),
        len(usable),
        _bootstrap_rng(plan, sector, len(MOMENT_TESTS)),
    )
    return test_bunching(
        float(fractions.mean()), float(references.mean()), n, plan.thresholds, sector, error
    )


def evaluate_summaries(
    plan: ExperimentPlan, summaries: List[UnitarySummary], oracle: Optional[bool] = None
) -> CampaignResult:
    """Loss estimate, loss window and every verdict in scope."""
    oracle = plan.uses_oracle if oracle is None else oracle
    n = plan.n
    populated = [s for s in summaries if s.records]
    if not populated:
        raise InsufficientDataError("Campaign has no records")
    batches_loss = {s.unitary_id: s.loss for s in populated}
    loss = math.fsum(batches_loss.values()) / len(batches_loss)
    per_unitary = np.array(list(batches_loss.values()))
    loss_error = bootstrap_error(
        lambda index: float(per_unitary[index].mean()),
        len(per_unitary),
        _bootstrap_rng(plan, n + 1),
    )
    window = loss_window(loss, n, plan.confidence)
    verdicts = [test_loss(loss, n, plan.thresholds, loss_error)]
    sector_counts: Dict[int, int] = {}
    for summary in populated:
        for sector, counts in summary.counts.items():
            sector_counts[sector] = sector_counts.get(sector, 0) + counts.count
    missing = []
    for sector in range(window[0], min(window[1], n - 2) + 1):
        moment_verdicts = _moment_verdicts(plan, populated, sector, oracle)
        if any(verdict.reason for verdict in moment_verdicts):
            missing.append(sector)
        verdicts.extend(moment_verdicts)
    for sector in range(window[0], min(window[1], n - 1) + 1):
        verdict = _bunching_verdict(plan, populated, sector, oracle)
        if verdict.reason and sector not in missing:
            missing.append(sector)
        verdicts.append(verdict)
    collisions = sum(counts.collisions for s in populated for counts in s.counts.values())
    result = CampaignResult(
        id=f"campaign-{plan.digest()}",
        plan=plan.to_json(),
        n=n,
        m=plan.m,
        loss_estimate=loss,
        loss_error=loss_error,
        loss_window=list(window),
        sector_counts={str(sector): count for sector, count in sorted(sector_counts.items())},
        reference="oracle" if oracle else "formula",
        missing_sectors=sorted(missing),
        collisions=collisions,
        verdicts=verdicts,
    )
    logger.info(
        "campaign n=%d %s: %d/%d verdicts pass, loss %.4f, window %s",
        n,
        plan.species.value,
        sum(verdict.passed for verdict in verdicts),
        len(verdicts),
        loss,
        window,
    )
    if missing:
        logger.warning("campaign n=%d: no usable data in sectors %s", n, sorted(missing))
    return result


def run_campaign(
    plan: ExperimentPlan,
    batches: Optional[Sequence[ClickBatch]] = None,
    unitaries: Optional[Mapping[str, Unitary]] = None,
    workers: int = 1,
) -> CampaignResult:
    """Simulate (or take ``batches``), reduce per unitary, and evaluate all five tests."""
    if batches is None:
        _, summaries = _simulate(plan, workers)
        return evaluate_summaries(plan, summaries)
    unitaries = unitaries or {}
    batches = list(RecordSet(batches).by_unitary().values())
    for batch in batches:
        if batch.n != plan.n or batch.m != plan.m:
            raise PlanError(
                f"Batch {batch.unitary_id} has (n, m) = ({batch.n}, {batch.m}), "
                f"plan has ({plan.n}, {plan.m})"
            )
    oracle = plan.uses_oracle and all(batch.unitary_id in unitaries for batch in batches)
    if plan.uses_oracle and not oracle:
        logger.warning("unitaries missing for oracle references, using closed forms")
    snapshot = _settings_snapshot()
    tasks = [
        (batch, plan.K, unitaries.get(batch.unitary_id) if oracle else None, snapshot)
        for batch in batches
    ]
    summaries = _fan_out(_summary_task, tasks, workers)
    return evaluate_summaries(plan, summaries, oracle)


class PQFReport(ResourceModel):
    pqf = Attribute()
    reason = Attribute()
    gamma = FloatAttribute()
    thresholds = Attribute()
    per_n = Attribute()
    failures = Attribute()
    non_monotone = Attribute()
    provenance = Attribute()
    created = DateTimeAttribute()
    campaigns = Relationship(many=True)

    class Meta:
        resource_type = "pqf-reports"


def evaluate_pqf(
    results: Sequence[CampaignResult], timestamp: Optional[datetime] = None
) -> PQFReport:
    """Largest n whose campaign passes every test; smaller failing n are flagged."""
    if not results:
        raise PlanError("PQF needs at least one campaign")
    ordered = sorted(results, key=lambda result: result.n)
    per_n = {str(result.n): result.passed for result in ordered}
    passing = [result.n for result in ordered if result.passed]
    pqf = max(passing) if passing else None
    failures = [verdict.id for result in ordered for verdict in result.failing()]
    non_monotone = [
        result.n for result in ordered if pqf is not None and result.n < pqf and not result.passed
    ]
    if non_monotone:
        logger.warning("PQF %s has failing n below it: %s", pqf, non_monotone)
    plan = ordered[0].plan
    digest = hashlib.sha256("".join(result.pk for result in ordered).encode()).hexdigest()[:16]
    return PQFReport(
        id=f"pqf-{digest}",
        pqf=pqf,
        reason=None if passing else "no n passes every test",
        gamma=plan["gamma"],
        thresholds=plan["thresholds"],
        per_n=per_n,
        failures=failures,
        non_monotone=non_monotone,
        provenance={"seed": plan["seed"], "versions": stack_versions()},
        created=timestamp,
        campaigns=list(ordered),
    )


def run_pqf(
    base_plan: ExperimentPlan,
    schedule: Iterable[int],
    workers: int = 1,
    timestamp: Optional[datetime] = None,
) -> PQFReport:
    results = [run_campaign(base_plan.derive(n=n), workers=workers) for n in schedule]
    return evaluate_pqf(results, timestamp)


class SpeciesComparison(ResourceModel):
    matrix = Attribute()
    n = Attribute()
    campaigns = Relationship(many=True)

    class Meta:
        resource_type = "species-comparisons"


def compare_species(
    base_plan: ExperimentPlan, species: Sequence[Species], workers: int = 1
) -> SpeciesComparison:
    """Identical campaigns per particle model: species x test -> pass / fail / inconclusive."""
    results = []
    matrix: Dict[str, Dict[str, str]] = {}
    for kind in species:
        kind = Species(kind)
        result = run_campaign(base_plan.derive(species=kind), workers=workers)
        results.append(result)
        matrix[kind.value] = {test.value: result.status(test) for test in TestName}
    digest = hashlib.sha256("".join(result.pk for result in results).encode()).hexdigest()[:16]
    return SpeciesComparison(
        id=f"comparison-{digest}", matrix=matrix, n=base_plan.n, campaigns=results
    )


@dataclass(frozen=True)
class TrendPoint:
    noise: NoiseParams
    deviations: Dict[str, Optional[float]]
    errors: Dict[str, Optional[float]]
    passed: bool


@dataclass(frozen=True)
class NoiseTrend:
    points: Tuple[TrendPoint, ...]

    def is_non_increasing(self, test: TestName, sigma: float = 2.0) -> bool:
        """Each step may rise by at most ``sigma`` combined standard errors."""
        test = TestName(test).value
        for before, after in zip(self.points, self.points[1:]):
            first, second = before.deviations[test], after.deviations[test]
            if first is None or second is None:
                continue
            spread = math.hypot(before.errors[test] or 0.0, after.errors[test] or 0.0)
            if second > first + sigma * spread:
                return False
        return True


DEFAULT_TREND_SCHEDULE = (
    NoiseParams(loss=0.3, overlap=0.7),
    NoiseParams(loss=0.1, overlap=0.9),
    NoiseParams(loss=0.03, overlap=0.97),
    NoiseParams(loss=0.0, overlap=1.0),
)


def noise_scaling_trend(
    base_plan: ExperimentPlan,
    schedule: Sequence[NoiseParams] = DEFAULT_TREND_SCHEDULE,
    workers: int = 1,
) -> NoiseTrend:
    """Per-test deviations of ideal-species campaigns as loss and distinguishability shrink."""
    points = []
    for noise in schedule:
        result = run_campaign(
            base_plan.derive(species=Species.IDEAL, noise=noise.model_dump()), workers=workers
        )
        deviations, errors = {}, {}
        for test in TestName:
            deviations[test.value], errors[test.value] = result.deviation(test)
        points.append(TrendPoint(noise, deviations, errors, result.passed))
    return NoiseTrend(tuple(points))
