import math

import numpy as np
import pytest
import torch

from lvaegan.bounds import (
    BoundReport,
    EmpiricalSampler,
    RiskConfig,
    SampleCloud,
    brute_force_ot,
    confidence_term,
    empirical_risk,
    exact_ot,
    lemma2_accumulated,
    lemma3_gap,
    read_bounds_csv,
    sliced_wasserstein,
    theorem2_rhs,
    wasserstein_distance,
    wasserstein_estimate,
    write_bounds_csv,
    BOUNDS_COLUMNS,
)
from lvaegan.data import ImageSet


@pytest.mark.parametrize("n", [1, 2, 3, 5, 7])
@pytest.mark.parametrize("dim", [1, 3])
def test_exact_ot_matches_brute_force(n, dim):
    rng = np.random.default_rng(100 * n + dim)
    for _ in range(5):
        a, b = rng.normal(size=(n, dim)), rng.normal(size=(n, dim)) + 0.5
        for order in (1, 2):
            assert exact_ot(a, b, order) == pytest.approx(brute_force_ot(a, b, order), abs=1e-12)


def test_one_dimensional_closed_form():
    # in 1-D the optimal plan matches sorted samples
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(300, 1)), rng.exponential(size=(300, 1))
    sorted_cost = math.fsum(np.abs(np.sort(a[:, 0]) - np.sort(b[:, 0]))) / 300
    assert wasserstein_distance(a, b) == pytest.approx(sorted_cost, abs=1e-12)


def test_shifted_gaussian_w1():
    rng = np.random.default_rng(1)
    n, shift = 2000, 3.0
    a = rng.normal(size=(n, 1))
    b = rng.normal(size=(n, 1)) + shift
    value, method = wasserstein_estimate(a, b, exact_max=n)
    assert method == "exact"
    assert abs(value - shift) / shift <= 0.05


def test_sliced_path_used_above_threshold():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(600, 2)), rng.normal(size=(600, 2))
    _, method = wasserstein_estimate(a, b)
    assert method.startswith("sliced")
    # a pure shift along one axis: every projection moves by |<d, shift>|
    assert sliced_wasserstein(a, a + np.array([1.0, 0.0])) < 1.0


def test_metric_axioms():
    rng = np.random.default_rng(3)
    clouds = [rng.normal(size=(40, 3)) + k for k in range(3)]
    a, b, c = clouds
    d = lambda u, v: wasserstein_distance(u, v)
    assert d(a, b) == pytest.approx(d(b, a), abs=1e-6)
    assert d(a, a) == pytest.approx(0.0, abs=1e-6)
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-6
    assert d(a, b) > 0


def test_wasserstein_dimension_mismatch():
    with pytest.raises(ValueError):
        wasserstein_distance(np.zeros((3, 2)), np.zeros((3, 3)))


def test_sample_cloud_validation():
    with pytest.raises(ValueError):
        SampleCloud(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        SampleCloud(np.array([[np.nan]]))
    assert SampleCloud(np.arange(4.0)).points.shape == (4, 1)


def test_empirical_risk():
    cloud = SampleCloud(np.arange(4.0)[:, None], np.array([0, 1, 1, 0]))
    h = lambda p: (p[:, 0] > 1.5).astype(int)
    assert empirical_risk(h, cloud) == 0.5
    with pytest.raises(ValueError):
        empirical_risk(h, SampleCloud(np.zeros((2, 1))))


def test_rhs_worked_example():
    # delta = e^-1, a' = 1, n = n' = 4: sqrt(2) * (1/2 + 1/2)
    rhs = theorem2_rhs(0.0, 0.0, 4, 4, delta_conf=math.exp(-1), a_prime=1.0)
    assert rhs == pytest.approx(math.sqrt(2), abs=1e-12)
    assert theorem2_rhs(0.1, 0.2, 4, 4, math.exp(-1), 1.0, d=0.3) == pytest.approx(0.6 + math.sqrt(2))


def test_rhs_confidence_scales_with_sample_size():
    c1 = confidence_term(100, 100)
    c2 = confidence_term(400, 400)
    assert c1 / c2 == pytest.approx(2.0, rel=1e-12)
    assert confidence_term(50, 50, a_prime=0.5) / confidence_term(50, 50, a_prime=1.0) == pytest.approx(math.sqrt(2))


def test_rhs_infinite_samples_drop_confidence():
    assert theorem2_rhs(0.1, 0.2, math.inf, math.inf) == pytest.approx(0.3)


def test_rhs_rejects_bad_constants():
    with pytest.raises(ValueError):
        theorem2_rhs(0, 0, 10, 10, delta_conf=1.0)
    with pytest.raises(ValueError):
        theorem2_rhs(0, 0, 10, 10, a_prime=1.5)
    with pytest.raises(ValueError):
        confidence_term(0, 10)


def test_bound_report_holds_flag():
    ok = BoundReport(0.2, 0.1, 0.05, 0.0, 1000, 1000)
    assert ok.holds and ok.lhs == 0.2
    assert ok.confidence == pytest.approx(confidence_term(1000, 1000))
    bad = BoundReport(0.9, 0.0, 0.0, 0.0, math.inf, math.inf)
    assert not bad.holds


def test_lemma2_sums_per_task_terms():
    reps = [BoundReport(0.1, 0.05, 0.1, 0.0, 100, 100), BoundReport(0.3, 0.1, 0.1, 0.0, 100, 100)]
    acc = lemma2_accumulated(reps)
    assert acc.lhs == pytest.approx(0.4)
    assert acc.rhs == pytest.approx(reps[0].rhs + reps[1].rhs)
    assert acc.holds
    with pytest.raises(ValueError):
        lemma2_accumulated([])


def test_lemma3_bound():
    rep = lemma3_gap(-100.0, 2.0, 4, 4, delta_conf=math.exp(-1), d_star=0.5)
    assert rep.confidence == pytest.approx(math.sqrt(2))
    assert rep.bound == pytest.approx(-100.0 - 2.0 - math.sqrt(2) - 0.5)


def test_bounds_csv_round_trip(tmp_path):
    rows = [{"epoch": 0, "risk1": 0.1, "risk2": 0.05, "W": 1.5, "rhs": 1.7, "holds": 1, "task": 1, "D": 0.02,
             "confidence": 0.1}]
    write_bounds_csv(rows, tmp_path / "b.csv")
    back = read_bounds_csv(tmp_path / "b.csv")
    assert tuple(back[0]) == BOUNDS_COLUMNS
    assert float(back[0]["risk1"]) == 0.1


def test_empirical_sampler_is_without_replacement():
    data = ImageSet(torch.arange(10.0).view(10, 1, 1, 1), torch.arange(10))
    s = EmpiricalSampler(data, seed=0)
    _, y1 = s(4)
    _, y2 = s(6)
    assert sorted(torch.cat([y1, y2]).tolist()) == list(range(10))
    with pytest.raises(ValueError):
        s(1)


def test_risk_config_defaults():
    cfg = RiskConfig()
    assert cfg.delta_conf == 0.05 and cfg.n_ot == 512
