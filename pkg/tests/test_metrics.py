"""Metric tests with exhaustive-sweep and pair-counting oracles."""
import math

import numpy as np
import pytest

from crfas.diffcore import Tensor
from crfas.metrics import ScoredSample, auc, eer_threshold, error_rates, far_frr, hter, spoof_score


def live(score):
    return ScoredSample(score=score, label="live", attack_type="none")


def spoof(score, attack="print"):
    return ScoredSample(score=score, label="spoof", attack_type=attack)


def auc_pair_counting(samples):
    """O(n^2) oracle: wins + half-ties over all (spoof, live) pairs."""
    lives = [s.score for s in samples if s.label == "live"]
    spoofs = [s.score for s in samples if s.label == "spoof"]
    wins = sum(1 for s in spoofs for l in lives if s > l)
    ties = sum(1 for s in spoofs for l in lives if s == l)
    return (wins + 0.5 * ties) / (len(spoofs) * len(lives))


def eer_threshold_sweep(samples):
    """Exhaustive oracle over the same candidate set, restated independently."""
    scores = sorted({s.score for s in samples})
    candidates = [scores[0] - 1.0] + [(a + b) / 2 for a, b in zip(scores, scores[1:])] + [scores[-1] + 1.0]
    rows = []
    for thr in candidates:
        far, frr = far_frr(samples, thr)
        rows.append((abs(far - frr), error_rates(samples, thr).acer, thr))
    return min(rows)[2]


class TestSpoofScore:
    def test_constant_maps(self):
        assert spoof_score(Tensor(np.ones((1, 1, 8, 8)))) == 1.0
        assert spoof_score(Tensor(np.zeros((1, 1, 8, 8)))) == 0.0

    def test_checkerboard(self):
        board = np.indices((8, 8)).sum(axis=0) % 2
        assert spoof_score(Tensor(board.reshape(1, 1, 8, 8).astype(np.float64))) == 0.5

    def test_rejects_batched_maps(self):
        with pytest.raises(ValueError):
            spoof_score(Tensor(np.zeros((2, 1, 4, 4))))


class TestErrorRates:
    def test_table_consistency_two_percent(self):
        # APCER 2%, BPCER 0% must give ACER exactly 1%
        samples = [spoof(1.0) for _ in range(98)] + [spoof(0.0) for _ in range(2)]
        samples += [live(0.2) for _ in range(50)]
        rates = error_rates(samples, threshold=0.5)
        assert rates.apcer == 0.02
        assert rates.bpcer == 0.0
        assert rates.acer == 0.01

    def test_perfect_separation(self):
        samples = [live(0.1), live(0.2), spoof(0.8), spoof(0.9)]
        rates = error_rates(samples, threshold=0.5)
        assert (rates.apcer, rates.bpcer, rates.acer) == (0.0, 0.0, 0.0)

    def test_max_over_attack_types(self):
        # print: 1 of 10 below threshold, replay: 3 of 10 below
        samples = [spoof(1.0, "print") for _ in range(9)] + [spoof(0.0, "print")]
        samples += [spoof(1.0, "replay") for _ in range(7)] + [spoof(0.0, "replay") for _ in range(3)]
        samples += [live(0.2) for _ in range(5)]
        rates = error_rates(samples, threshold=0.5)
        assert rates.apcer_by_type == {"print": 0.1, "replay": 0.3}
        assert rates.apcer == 0.3

    def test_acer_is_mean_by_construction(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            samples = [live(rng.random()) for _ in range(8)] + [
                spoof(rng.random(), attack=("print", "replay")[i % 2]) for i in range(8)
            ]
            thr = rng.random()
            rates = error_rates(samples, thr)
            assert rates.acer == (rates.apcer + rates.bpcer) / 2

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(1)
        samples = [live(rng.random()) for _ in range(20)] + [spoof(rng.random()) for _ in range(20)]
        thresholds = np.linspace(-0.2, 1.2, 30)
        rates = [error_rates(samples, t) for t in thresholds]
        for a, b in zip(rates, rates[1:]):
            assert b.apcer >= a.apcer
            assert b.bpcer <= a.bpcer

    def test_infinite_threshold_boundary(self):
        samples = [live(0.1), live(0.9), spoof(0.5), spoof(0.6)]
        rates = error_rates(samples, math.inf)
        assert rates.apcer == 1.0 and rates.bpcer == 0.0 and rates.acer == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            error_rates([live(0.5)], 0.5)


class TestEerHter:
    def test_disjoint_ranges_give_zero(self):
        samples = [live(0.1), live(0.2), spoof(0.8), spoof(0.9)]
        thr = eer_threshold(samples)
        far, frr = far_frr(samples, thr)
        assert far == 0.0 and frr == 0.0
        assert hter(samples, thr) == 0.0

    def test_interleaved_example(self):
        samples = [live(0.1), live(0.2), spoof(0.15), spoof(0.3)]
        thr = eer_threshold(samples)
        assert 0.15 < thr < 0.2
        far, frr = far_frr(samples, thr)
        assert far == 0.5 and frr == 0.5

    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(30):
            n = int(rng.integers(3, 25))
            samples = [live(float(rng.random())) for _ in range(n)]
            samples += [spoof(float(rng.random())) for _ in range(n)]
            if trial % 3 == 0:  # inject ties
                samples.append(live(samples[0].score))
                samples.append(spoof(samples[0].score))
            assert eer_threshold(samples) == eer_threshold_sweep(samples)

    def test_threshold_below_all_scores(self):
        samples = [live(0.3), live(0.4), spoof(0.6), spoof(0.7)]
        # everything classified spoof: FRR 1, FAR 0
        assert hter(samples, -10.0) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            eer_threshold([spoof(0.5), spoof(0.6)])


class TestAuc:
    def test_perfect_ranking(self):
        samples = [live(0.1), live(0.2), spoof(0.8), spoof(0.9)]
        assert auc(samples) == 1.0

    def test_all_ties(self):
        samples = [live(0.5), live(0.5), spoof(0.5), spoof(0.5)]
        assert auc(samples) == 0.5

    def test_matches_pair_counting_exactly(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            nl = int(rng.integers(2, 30))
            ns = int(rng.integers(2, 30))
            # quantized scores force plenty of ties
            samples = [live(float(rng.integers(0, 10)) / 10) for _ in range(nl)]
            samples += [spoof(float(rng.integers(0, 10)) / 10) for _ in range(ns)]
            assert auc(samples) == auc_pair_counting(samples)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(4)
        samples = [live(float(s)) for s in rng.random(15)] + [spoof(float(s)) for s in rng.random(15)]
        transformed = [
            ScoredSample(score=math.exp(3 * s.score) - 1, label=s.label, attack_type=s.attack_type)
            for s in samples
        ]
        assert auc(samples) == auc(transformed)

    def test_non_finite_score_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            live(math.nan)
