import math

import numpy as np
import pytest

from nodulegen.analyzer import N_FEATURES, SeedStats
from nodulegen.errors import DegenerateAcceptance, EmptySet
from nodulegen.metrics import (GenerationCounts, build_report,
                               format_table_row, ft_dist, ft_mmse,
                               read_report_csv, score, write_report_csv)


def make_stats(rng):
    return SeedStats(rng.normal(0, 5, N_FEATURES),
                     rng.uniform(0.2, 3.0, N_FEATURES))


def brute_ft_dist(accepted, seeds, stats):
    total = 0.0
    for y in accepted:
        best = math.inf
        for s in seeds:
            acc = 0.0
            for i in range(N_FEATURES):
                acc += ((y[i] - s[i]) / stats.sigma[i]) ** 2
            best = min(best, math.sqrt(acc))
        total += best
    return total / len(accepted)


def brute_ft_mmse(accepted, seeds, stats):
    acc = 0.0
    for i in range(N_FEATURES):
        mu_y = sum(y[i] for y in accepted) / len(accepted)
        mu_s = sum(s[i] for s in seeds) / len(seeds)
        acc += ((mu_y - mu_s) / stats.sigma[i]) ** 2
    return acc / N_FEATURES


# ----------------------------------------------------------------- ft_dist

def test_ft_dist_of_seeds_against_themselves_is_zero():
    rng = np.random.default_rng(0)
    stats = make_stats(rng)
    seeds = rng.normal(0, 5, (20, N_FEATURES))
    assert ft_dist(seeds, seeds, stats) == 0.0


def test_ft_dist_one_sigma_single_feature():
    rng = np.random.default_rng(1)
    stats = make_stats(rng)
    seeds = rng.normal(0, 5, (10, N_FEATURES))
    y = seeds[4].copy()
    y[7] += stats.sigma[7]
    assert abs(ft_dist(y[None, :], seeds, stats) - 1.0) < 1e-12


def test_ft_dist_duplicate_accepted_row_changes_nothing():
    rng = np.random.default_rng(2)
    stats = make_stats(rng)
    seeds = rng.normal(0, 5, (8, N_FEATURES))
    ys = rng.normal(0, 5, (5, N_FEATURES))
    base = ft_dist(ys, seeds, stats)
    doubled = ft_dist(np.vstack([ys, ys]), seeds, stats)
    assert abs(base - doubled) < 1e-12


def test_ft_dist_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(10):
        stats = make_stats(rng)
        seeds = rng.normal(0, 5, (int(rng.integers(2, 50)), N_FEATURES))
        ys = rng.normal(0, 5, (int(rng.integers(1, 50)), N_FEATURES))
        assert abs(ft_dist(ys, seeds, stats)
                   - brute_ft_dist(ys, seeds, stats)) < 1e-12


def test_ft_dist_rejects_empty():
    rng = np.random.default_rng(4)
    stats = make_stats(rng)
    with pytest.raises(EmptySet):
        ft_dist(np.zeros((0, N_FEATURES)), np.zeros((3, N_FEATURES)), stats)


# ----------------------------------------------------------------- ft_mmse

def test_ft_mmse_equal_means_is_zero():
    rng = np.random.default_rng(5)
    stats = make_stats(rng)
    seeds = rng.normal(0, 5, (12, N_FEATURES))
    shuffled = seeds[rng.permutation(12)]
    assert ft_mmse(shuffled, seeds, stats) < 1e-24


def test_ft_mmse_uniform_one_sigma_gap():
    rng = np.random.default_rng(6)
    stats = make_stats(rng)
    seeds = rng.normal(0, 5, (10, N_FEATURES))
    ys = seeds + stats.sigma  # shifts every feature mean by exactly 1 sigma
    assert abs(ft_mmse(ys, seeds, stats) - 1.0) < 1e-12


def test_ft_mmse_single_two_sigma_gap():
    rng = np.random.default_rng(7)
    stats = make_stats(rng)
    seeds = rng.normal(0, 5, (10, N_FEATURES))
    ys = seeds.copy()
    ys[:, 2] += 2.0 * stats.sigma[2]
    assert abs(ft_mmse(ys, seeds, stats) - 4.0 / 12.0) < 1e-12


def test_ft_mmse_matches_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(10):
        stats = make_stats(rng)
        seeds = rng.normal(0, 5, (int(rng.integers(2, 40)), N_FEATURES))
        ys = rng.normal(0, 5, (int(rng.integers(1, 40)), N_FEATURES))
        assert abs(ft_mmse(ys, seeds, stats)
                   - brute_ft_mmse(ys, seeds, stats)) < 1e-12


def test_ft_mmse_permutation_invariant():
    rng = np.random.default_rng(9)
    stats = make_stats(rng)
    seeds = rng.normal(0, 5, (10, N_FEATURES))
    ys = rng.normal(0, 5, (15, N_FEATURES))
    assert abs(ft_mmse(ys, seeds, stats)
               - ft_mmse(ys[rng.permutation(15)], seeds, stats)) < 1e-12


# ------------------------------------------------------------------- score

def test_score_zero_numerator():
    assert score(1.0, 3.0, 2.0, 0.9) == 0.0


def test_score_hand_anchor():
    assert abs(score(2.0, 0.1, 0.1, 0.5) - 50.0) < 1e-12


def test_score_matches_formula_on_random_tuples():
    rng = np.random.default_rng(10)
    for _ in range(300):
        fd = float(rng.uniform(0.0, 10.0))
        fm = float(rng.uniform(0.0, 5.0))
        mse = float(rng.uniform(0.0, 1.0))
        ac = float(rng.uniform(0.0, 0.999))
        expected = (fd - 1.0) / ((fm + 0.1) * (mse + 0.1) * (1.0 - ac))
        assert score(fd, fm, mse, ac) == expected


def test_score_monotone_in_each_argument():
    # in the useful regime FtDist > 1 (positive numerator)
    rng = np.random.default_rng(11)
    for _ in range(200):
        fd = float(rng.uniform(1.01, 10.0))
        fm = float(rng.uniform(0.0, 5.0))
        mse = float(rng.uniform(0.0, 1.0))
        ac = float(rng.uniform(0.0, 0.99))
        base = score(fd, fm, mse, ac)
        assert score(fd + 0.1, fm, mse, ac) > base
        assert score(fd, fm + 0.1, mse, ac) < base
        assert score(fd, fm, mse + 0.1, ac) < base
        assert score(fd, fm, mse, min(ac + 0.005, 0.995)) > base


def test_score_degenerate_acceptance_raises():
    with pytest.raises(DegenerateAcceptance):
        score(2.0, 0.1, 0.1, 1.0)
    with pytest.raises(ValueError):
        score(2.0, 0.1, 0.1, 1.5)


# ------------------------------------------------------------------ report

def counts(generated=100, clean=80, inverted=3, accepted=60):
    return GenerationCounts(generated, clean, generated - clean, inverted,
                            accepted)


def test_build_report_ac_and_score():
    rep = build_report(2.0, 0.1, 0.1, counts(generated=100, accepted=50))
    assert rep.ac == 0.5
    assert abs(rep.score - 50.0) < 1e-12
    assert not rep.degenerate


def test_build_report_flags_full_acceptance():
    rep = build_report(2.0, 0.1, 0.1, counts(generated=10, accepted=10))
    assert rep.degenerate
    assert math.isnan(rep.score)


def test_report_csv_roundtrip(tmp_path):
    rep = build_report(2.5, 0.3, 0.02, counts())
    path = tmp_path / "metrics.csv"
    write_report_csv(rep, path)
    back = read_report_csv(path)
    assert back == rep


def test_format_table_row_scales_mse_by_thousand():
    rep = build_report(2.0, 0.1, 0.05, counts())
    line = format_table_row(rep, label="arch")
    assert "MSE(x1000)  50.000" in line
    assert "arch" in line
