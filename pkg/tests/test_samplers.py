import math

import numpy as np
import pytest
from scipy.stats import chisquare

from pqf_bench.conf import override_settings
from pqf_bench.linalg import (
    FockPattern,
    Unitary,
    haar_random_unitary,
    ideal_distribution,
    total_variation_distance,
)
from pqf_bench.samplers import (
    BudgetExceededError,
    ClickBatch,
    ClickRecord,
    InvalidInputError,
    NoiseParams,
    Species,
    apply_loss,
    collapse_internal,
    dad_distribution,
    dad_uniform_tvd,
    exact_bunching,
    exact_correlators,
    exact_noisy_distribution,
    loss_distribution,
    oracle_cost,
    sample_dad,
    sample_distinguishable,
    sample_ideal_output,
    sample_meanfield,
    sample_noisy_output,
    sample_noisy_patterns,
    sample_species_patterns,
    sample_uniform_cf,
)
from pqf_bench.stats import (
    CDataSet,
    default_bunching_modes,
    estimate_loss,
    haar_average_moments,
    theory_bunching_id,
    theory_bunching_shift,
)
from tests.utils import empirical_distribution, pattern_rows


def _moments_of(distribution, m):
    """<n_i> and <n_i n_j> of an exact distribution."""
    means = np.zeros(m)
    joint = np.zeros((m, m))
    for pattern, probability in distribution.items():
        occupations = np.array(pattern, dtype=float)
        means += probability * occupations
        joint += probability * np.outer(occupations, occupations)
    return means, joint


def test_noise_params() -> None:
    noise = NoiseParams(loss=0.2, overlap=0.9)
    assert noise.fidelity == pytest.approx(0.81)
    with pytest.raises(ValueError):
        NoiseParams(loss=1.5)
    with pytest.raises(ValueError):
        NoiseParams(overlap=-0.1)


def test_click_batch() -> None:
    batch = ClickBatch("u", 3, pattern_rows("1100", "0000", "0120"))
    assert batch.m == 4
    assert len(batch) == 3
    assert batch.lost.tolist() == [1, 3, 0]
    assert batch.collisions == 1
    records = list(batch)
    assert records[0] == ClickRecord("u", FockPattern([1, 1, 0, 0]), 3)
    assert [record.lost for record in records] == [1, 3, 0]
    with pytest.raises(ValueError):
        batch.patterns[0, 0] = 5


def test_click_batch__invalid() -> None:
    with pytest.raises(InvalidInputError):
        ClickBatch("u", 1, pattern_rows("11"))
    with pytest.raises(InvalidInputError):
        ClickBatch("u", 2, np.array([1, 0]))
    with pytest.raises(InvalidInputError):
        ClickBatch("u", 2, np.array([[-1, 1]]))
    assert len(ClickBatch("u", 2, np.empty((0, 4)))) == 0


def test_apply_loss(rng: np.random.Generator) -> None:
    assert apply_loss(4, 0.0, rng).tolist() == [True] * 4
    assert not apply_loss(4, 1.0, rng, size=10).any()
    mask = apply_loss(10, 0.3, rng, size=5000)
    assert mask.shape == (5000, 10)
    assert abs(1 - mask.mean() - 0.3) < 0.01


def test_collapse_internal(rng: np.random.Generator) -> None:
    survivors = np.array([[True, False, True, True]] * 200)
    everything = collapse_internal(survivors, 1.0, rng)
    assert np.array_equal(everything.interfering, survivors)
    assert not everything.singletons.any()
    nothing = collapse_internal(survivors, 0.0, rng)
    assert np.array_equal(nothing.singletons, survivors)
    mixed = collapse_internal(survivors, 0.5, rng)
    assert not (mixed.interfering & mixed.singletons).any()
    assert np.array_equal(mixed.interfering | mixed.singletons, survivors)
    single = collapse_internal(np.array([True, True, False]), 1.0, rng)
    assert single.interfering_photons == (0, 1)
    assert single.singleton_photons == ()


def test_sample_ideal_output__single(unitary: Unitary, rng: np.random.Generator) -> None:
    pattern = sample_ideal_output(unitary, [0, 1], rng)
    assert isinstance(pattern, FockPattern)
    assert pattern.total == 2
    assert pattern.m == 5


def test_sample_ideal_output__no_photons(unitary: Unitary, rng: np.random.Generator) -> None:
    assert sample_ideal_output(unitary, [], rng) == FockPattern([0] * 5)
    assert sample_ideal_output(unitary, [0], rng, size=0).shape == (0, 5)


def test_sample_ideal_output__invalid_modes(unitary: Unitary, rng: np.random.Generator) -> None:
    with pytest.raises(InvalidInputError):
        sample_ideal_output(unitary, [0, 0], rng)
    with pytest.raises(InvalidInputError):
        sample_ideal_output(unitary, [5], rng)


def test_sample_ideal_output__identity(rng: np.random.Generator) -> None:
    patterns = sample_ideal_output(Unitary.identity(4), [1, 3], rng, size=50)
    assert (patterns == [0, 1, 0, 1]).all()


def test_sample_ideal_output__hong_ou_mandel(rng: np.random.Generator) -> None:
    splitter = Unitary(np.array([[1, 1], [1, -1]]) / math.sqrt(2))
    with override_settings(enumeration_limit=1):
        patterns = sample_ideal_output(splitter, [0, 1], rng, size=2000)
    assert not (patterns == [1, 1]).all(axis=1).any()


@pytest.mark.parametrize("enumeration_limit", (1, 2_000_000))
def test_sample_ideal_output__distribution(
    unitary: Unitary, rng: np.random.Generator, enumeration_limit: int
) -> None:
    with override_settings(enumeration_limit=enumeration_limit, sample_block_size=4096):
        patterns = sample_ideal_output(unitary, [0, 1, 2], rng, size=20_000)
    exact = ideal_distribution(unitary, [0, 1, 2])
    assert total_variation_distance(empirical_distribution(patterns), exact) < 0.04


def test_sample_noisy_patterns__noiseless_is_ideal(
    unitary: Unitary, rng: np.random.Generator
) -> None:
    patterns = sample_noisy_patterns(unitary, 2, NoiseParams(), rng, 20_000)
    exact = ideal_distribution(unitary, [0, 1])
    assert total_variation_distance(empirical_distribution(patterns), exact) < 0.03


def test_sample_noisy_patterns__matches_exact_sector(
    unitary: Unitary, rng: np.random.Generator
) -> None:
    noise = NoiseParams(loss=0.3, overlap=0.6)
    patterns = sample_noisy_patterns(unitary, 2, noise, rng, 20_000)
    complete = patterns[patterns.sum(axis=1) == 2]
    exact = exact_noisy_distribution(unitary, 2, noise, 0)
    assert total_variation_distance(empirical_distribution(complete), exact) < 0.05
    lost = 2 - patterns.sum(axis=1)
    assert abs(lost.mean() / 2 - 0.3) < 0.02


@pytest.mark.slow
def test_sample_noisy_patterns__matches_every_sector() -> None:
    unitary = haar_random_unitary(8, 17)
    noise = NoiseParams(loss=0.2, overlap=0.9)
    patterns = sample_noisy_patterns(unitary, 3, noise, np.random.default_rng(5), 400_000)
    lost = 3 - patterns.sum(axis=1)
    for sector in range(4):
        exact = exact_noisy_distribution(unitary, 3, noise, sector)
        observed = empirical_distribution(patterns[lost == sector])
        assert total_variation_distance(observed, exact) <= 0.03, sector


def test_sample_noisy_output(unitary: Unitary, rng: np.random.Generator) -> None:
    record = sample_noisy_output(unitary, 3, NoiseParams(loss=1.0), rng)
    assert record.unitary_id == unitary.content_hash
    assert record.lost == 3
    record = sample_noisy_output(unitary, 3, NoiseParams(), rng, unitary_id="u-1")
    assert record.unitary_id == "u-1"
    assert record.pattern.total == 3


def test_sample_distinguishable(unitary: Unitary, rng: np.random.Generator) -> None:
    patterns = sample_distinguishable(unitary, 3, rng, size=20_000)
    assert (patterns.sum(axis=1) == 3).all()
    expected = (np.abs(unitary.matrix[:, :3]) ** 2).sum(axis=1)
    assert np.allclose(patterns.mean(axis=0), expected, atol=0.03)
    assert sample_distinguishable(unitary, 2, rng).total == 2


def test_sample_distinguishable__matches_full_overlap_loss(unitary: Unitary) -> None:
    exact = exact_noisy_distribution(unitary, 2, NoiseParams(overlap=0.0), 0)
    patterns = sample_distinguishable(unitary, 2, np.random.default_rng(4), size=20_000)
    assert total_variation_distance(empirical_distribution(patterns), exact) < 0.03


def test_sample_meanfield(unitary: Unitary, rng: np.random.Generator) -> None:
    patterns = sample_meanfield(unitary, 3, rng, size=20_000)
    assert (patterns.sum(axis=1) == 3).all()
    # Random phases average the interference away: first moments are classical.
    expected = (np.abs(unitary.matrix[:, :3]) ** 2).sum(axis=1)
    assert np.allclose(patterns.mean(axis=0), expected, atol=0.03)
    assert sample_meanfield(unitary, 0, rng) == FockPattern([0] * 5)


def test_sample_meanfield__beam_splitter_bunches(rng: np.random.Generator) -> None:
    splitter = Unitary(np.array([[1, 1j], [1j, 1]]) / math.sqrt(2))
    patterns = sample_meanfield(splitter, 2, rng, size=20_000)
    bunched = (patterns.max(axis=1) == 2).mean()
    # phase-averaged q0^2 + q1^2 is 3/4, against 1/2 for distinguishable particles
    assert bunched > 0.5
    assert bunched == pytest.approx(0.75, abs=0.02)


def test_sample_uniform_cf(rng: np.random.Generator) -> None:
    patterns = sample_uniform_cf(4, 2, rng, size=12_000)
    assert (patterns.sum(axis=1) == 2).all()
    assert patterns.max() == 1
    frequencies = empirical_distribution(patterns)
    assert len(frequencies) == 6
    assert all(abs(value - 1 / 6) < 0.03 for value in frequencies.values())
    with pytest.raises(InvalidInputError):
        sample_uniform_cf(2, 3, rng)


def test_sample_dad__extremes(rng: np.random.Generator) -> None:
    inside = sample_dad(8, 2, 4, 1.0, rng, size=500)
    assert (inside[:, 4:].sum(axis=1) == 0).all()
    outside = sample_dad(8, 2, 4, 0.0, rng, size=500)
    assert (outside[:, 4:].sum(axis=1) > 0).all()
    assert outside.max() == 1


def test_sample_dad__distribution(rng: np.random.Generator) -> None:
    patterns = sample_dad(6, 2, 3, 0.4, rng, size=20_000)
    exact = dad_distribution(6, 2, 3, 0.4)
    assert total_variation_distance(empirical_distribution(patterns), exact) < 0.04


@pytest.mark.parametrize(
    "m, n, K, alpha",
    (
        (6, 2, 1, 0.5),
        (6, 2, 7, 0.5),
        (6, 2, 3, 1.5),
        (6, 2, 6, 0.5),
    ),
)
def test_sample_dad__invalid(rng: np.random.Generator, m, n, K, alpha) -> None:
    with pytest.raises(InvalidInputError):
        sample_dad(m, n, K, alpha, rng)


def test_dad_distribution() -> None:
    distribution = dad_distribution(6, 2, 3, 0.4)
    assert len(distribution) == math.comb(6, 2)
    assert math.fsum(distribution.values()) == pytest.approx(1.0)
    assert distribution[FockPattern([1, 1, 0, 0, 0, 0])] == pytest.approx(0.4 / 3)
    assert distribution[FockPattern([1, 0, 0, 0, 0, 1])] == pytest.approx(0.6 / 12)


def test_dad_distribution__normalized_mean() -> None:
    m, n, K = 32, 4, 29
    distribution = dad_distribution(m, n, K, theory_bunching_id(n, m, K))
    means, joint = _moments_of(distribution, m)
    nm = haar_average_moments([CDataSet.from_matrix(joint - np.outer(means, means))], n, m).nm
    # collision-free patterns: the correlators only see the single-mode marginals
    assert nm == pytest.approx(m * (np.sum(means**2) - n) / (n * (m - 1)), rel=1e-9)
    assert nm == pytest.approx(-1 + n**-1.5, abs=0.1)
    # Haar mean of the ideal NM at this n and m
    ideal = -(m / (m + 1)) * (m + n - 2) / (m - 1)
    assert abs(nm - ideal) > n**-1.5


@pytest.mark.parametrize("alpha", (0.0, 0.2, 0.9, 1.0))
def test_dad_uniform_tvd(alpha: float) -> None:
    m, n, K = 7, 3, 5
    uniform = {pattern: 1 / math.comb(m, n) for pattern in dad_distribution(m, n, K, alpha)}
    expected = total_variation_distance(dad_distribution(m, n, K, alpha), uniform)
    assert dad_uniform_tvd(m, n, K, alpha) == pytest.approx(expected, abs=1e-12)


def test_dad_uniform_tvd__vanishes_at_uniform_weight() -> None:
    alpha = math.comb(5, 3) / math.comb(7, 3)
    assert dad_uniform_tvd(7, 3, 5, alpha) == pytest.approx(0.0, abs=1e-15)


def test_dad_uniform_tvd__shrinks_with_n() -> None:
    distances = []
    for n in (3, 4, 5):
        m = math.ceil(n**2.5)
        K = default_bunching_modes(m, n)
        alpha = math.comb(K + n - 1, n) / math.comb(m + n - 1, n)
        distances.append(dad_uniform_tvd(m, n, K, alpha))
    assert distances == sorted(distances, reverse=True)
    assert distances[-1] < 0.02


def test_loss_distribution() -> None:
    assert loss_distribution(3, 0.0).tolist() == [1.0, 0.0, 0.0, 0.0]
    distribution = loss_distribution(10, 0.3)
    assert distribution.sum() == pytest.approx(1.0)
    assert distribution[3] == pytest.approx(math.comb(10, 3) * 0.3**3 * 0.7**7)


def test_oracle_cost() -> None:
    assert oracle_cost(5, 3, 1) == math.comb(5, 2) * 4 * 3


@pytest.mark.parametrize("loss", (0.0, 0.2))
@pytest.mark.parametrize("overlap", (1.0, 0.9, 0.0))
def test_exact_noisy_distribution__normalized(loss: float, overlap: float) -> None:
    noise = NoiseParams(loss=loss, overlap=overlap)
    for index in range(20):
        m, n = 5 + index % 4, 2 + index % 2
        unitary = haar_random_unitary(m, index)
        for lost in range(n + 1):
            distribution = exact_noisy_distribution(unitary, n, noise, lost)
            assert math.fsum(distribution.values()) == pytest.approx(1.0, abs=1e-9)


def test_exact_noisy_distribution__limits(unitary: Unitary) -> None:
    ideal = exact_noisy_distribution(unitary, 3, NoiseParams(), 0)
    assert total_variation_distance(ideal, ideal_distribution(unitary, [0, 1, 2])) < 1e-12
    for lost in range(4):
        distribution = exact_noisy_distribution(unitary, 3, NoiseParams(overlap=0.4), lost)
        assert math.fsum(distribution.values()) == pytest.approx(1.0, abs=1e-12)
        assert all(pattern.total == 3 - lost for pattern in distribution)


def test_exact_noisy_distribution__budget(unitary: Unitary) -> None:
    with override_settings(oracle_budget=10):
        with pytest.raises(BudgetExceededError):
            exact_noisy_distribution(unitary, 3, NoiseParams(), 0)
    with pytest.raises(InvalidInputError):
        exact_noisy_distribution(unitary, 3, NoiseParams(), 4)


@pytest.mark.parametrize("lost", (0, 1))
@pytest.mark.parametrize("overlap", (0.0, 0.7, 1.0))
def test_exact_correlators_match_distribution(lost: int, overlap: float) -> None:
    unitary = haar_random_unitary(4, 21)
    distribution = exact_noisy_distribution(unitary, 3, NoiseParams(overlap=overlap), lost)
    means, joint = _moments_of(distribution, 4)
    expected = joint - np.outer(means, means)
    correlators = exact_correlators(unitary, 3, overlap, lost)
    off_diagonal = ~np.eye(4, dtype=bool)
    assert np.allclose(correlators[off_diagonal], expected[off_diagonal], atol=1e-12)


def test_exact_correlators__invalid_sector(unitary: Unitary) -> None:
    with pytest.raises(InvalidInputError):
        exact_correlators(unitary, 3, 1.0, 4)


@pytest.mark.parametrize("lost", (0, 1, 2))
@pytest.mark.parametrize("overlap", (0.0, 0.6, 1.0))
def test_exact_bunching_matches_distribution(unitary: Unitary, lost: int, overlap: float) -> None:
    K = 3
    distribution = exact_noisy_distribution(unitary, 3, NoiseParams(overlap=overlap), lost)
    expected = math.fsum(
        probability for pattern, probability in distribution.items() if not any(pattern[K:])
    )
    assert exact_bunching(unitary, 3, overlap, lost, K) == pytest.approx(expected, abs=1e-12)


def test_exact_bunching__edges(unitary: Unitary) -> None:
    assert exact_bunching(unitary, 3, 0.5, 0, 5) == pytest.approx(1.0)
    assert exact_bunching(unitary, 3, 0.5, 3, 2) == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        exact_bunching(unitary, 3, 0.5, 0, 6)


def test_exact_bunching__overlap_shift() -> None:
    n, m, K, x = 4, 32, 29, 0.98
    shifts = []
    for seed in range(200):
        unitary = haar_random_unitary(m, seed)
        shifts.append(exact_bunching(unitary, n, 1.0, 0, K) - exact_bunching(unitary, n, x, 0, K))
    shift = float(np.mean(shifts))
    # leading term: one transposition, off-diagonal Gram weight (m - K) / m^2, diagonal K / m
    scaling = (1 - x**2) * math.comb(n, 2) * (m - K) / m**2 * (K / m) ** (n - 2)
    assert 0.65 <= shift / scaling <= 1.05
    # the closed-form shift overshoots the Haar mean by more than an order of magnitude
    assert theory_bunching_shift(x, n, m, theory_bunching_id(n - 1, m, K)) > 10 * shift


@pytest.mark.parametrize("species", list(Species))
def test_sample_species_patterns(unitary: Unitary, species: Species) -> None:
    rng = np.random.default_rng(8)
    patterns = sample_species_patterns(
        species, unitary, 2, NoiseParams(loss=0.25), rng, 400, K=4, alpha=0.5
    )
    assert patterns.shape == (400, 5)
    totals = patterns.sum(axis=1)
    assert totals.max() <= 2
    assert (totals < 2).any()


@pytest.mark.parametrize("species", list(Species))
def test_sample_species_patterns__everything_lost(unitary: Unitary, species: Species) -> None:
    rng = np.random.default_rng(8)
    patterns = sample_species_patterns(species, unitary, 2, NoiseParams(loss=1.0), rng, 20)
    assert not patterns.any()


def test_sample_species_patterns__dad_needs_parameters(
    unitary: Unitary, rng: np.random.Generator
) -> None:
    with pytest.raises(InvalidInputError):
        sample_species_patterns(Species.DAD, unitary, 2, NoiseParams(), rng, 5)


def test_exact_noisy_distribution__hong_ou_mandel_dip() -> None:
    splitter = Unitary(np.array([[1, 1], [1, -1]]) / math.sqrt(2))
    coincidence = FockPattern([1, 1])
    ideal = exact_noisy_distribution(splitter, 2, NoiseParams(), 0)
    assert ideal.get(coincidence, 0.0) == pytest.approx(0.0, abs=1e-15)
    partial = exact_noisy_distribution(splitter, 2, NoiseParams(overlap=0.9), 0)
    assert partial[coincidence] == pytest.approx((1 - 0.9**2) / 2)
    patterns = sample_noisy_patterns(splitter, 2, NoiseParams(), np.random.default_rng(3), 10_000)
    assert (patterns == [1, 1]).all(axis=1).mean() <= 0.01


@pytest.mark.slow
def test_loss_estimate_recovers_simulated_loss(rng: np.random.Generator) -> None:
    n, size = 8, 50_000
    unitary = haar_random_unitary(16, 2)
    noise = NoiseParams(loss=0.15, overlap=0.0)
    records = [sample_noisy_output(unitary, n, noise, rng) for _ in range(size)]
    patterns = np.array([record.pattern for record in records], dtype=np.int64)
    assert (patterns.sum(axis=1) == [n - record.lost for record in records]).all()
    estimate = estimate_loss([ClickBatch("u", n, patterns)], n)
    assert abs(estimate.pooled - 0.15) <= 0.005

    lost = np.array([record.lost for record in records])
    observed = np.bincount(lost, minlength=n + 1).astype(float)
    expected = size * loss_distribution(n, 0.15)
    # tail sectors pooled so every bin expects over a hundred records
    observed = np.append(observed[:5], observed[5:].sum())
    expected = np.append(expected[:5], expected[5:].sum())
    assert chisquare(observed, expected).pvalue > 0.01
