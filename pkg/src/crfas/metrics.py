"""Spoof scoring and biometric error metrics.

Scores are "higher means more spoof-like"; the decision rule classifies a
sample as spoof when score >= threshold. APCER is the worst per-attack-type
rate of attacks classified live, BPCER the rate of live samples classified
spoof, ACER their mean. HTER averages FAR (spoof accepted live) and FRR
(live rejected) at a threshold fixed on a development set; AUC is the
rank-based probability that a random spoof outscores a random live sample,
ties counted one half.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: str
    attack_type: str
    path: str = ""

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")
        if self.label not in ("live", "spoof"):
            raise ValueError(f"bad label {self.label!r}")
        if (self.label == "live") != (self.attack_type == "none"):
            raise ValueError(f"label {self.label!r} inconsistent with attack type {self.attack_type!r}")


@dataclass
class ErrorRates:
    apcer: float
    bpcer: float
    acer: float
    apcer_by_type: dict[str, float]


def spoof_score(score_map: Tensor) -> float:
    """Mean of a single-sample (1, 1, s, s) classifier map."""
    if score_map.data.ndim != 4 or score_map.shape[0] != 1 or score_map.shape[1] != 1:
        raise ValueError(f"expected a (1, 1, s, s) map, got {score_map.shape}")
    return float(score_map.data.mean())


def _split_classes(samples: list[ScoredSample]):
    live = [s for s in samples if s.label == "live"]
    spoof = [s for s in samples if s.label == "spoof"]
    if not live or not spoof:
        raise ValueError(f"need both classes, got {len(live)} live and {len(spoof)} spoof")
    return live, spoof


def error_rates(samples: list[ScoredSample], threshold: float) -> ErrorRates:
    """APCER / BPCER / ACER at a threshold.

    Per attack type, APCER_type is the fraction of that type scored below
    the threshold (classified live); APCER takes the maximum over types.
    """
    live, spoof = _split_classes(samples)
    by_type: dict[str, list[ScoredSample]] = {}
    for s in spoof:
        by_type.setdefault(s.attack_type, []).append(s)
    apcer_by_type = {
        t: sum(1 for s in group if s.score < threshold) / len(group) for t, group in sorted(by_type.items())
    }
    apcer = max(apcer_by_type.values())
    bpcer = sum(1 for s in live if s.score >= threshold) / len(live)
    return ErrorRates(apcer, bpcer, (apcer + bpcer) / 2, apcer_by_type)


def far_frr(samples: list[ScoredSample], threshold: float) -> tuple[float, float]:
    """FAR: spoof accepted as live (score < threshold). FRR: live rejected."""
    live, spoof = _split_classes(samples)
    far = sum(1 for s in spoof if s.score < threshold) / len(spoof)
    frr = sum(1 for s in live if s.score >= threshold) / len(live)
    return far, frr


def eer_threshold(dev_samples: list[ScoredSample]) -> float:
    """Threshold minimizing |FAR - FRR| on the dev set.

    Candidates are the midpoints between adjacent distinct scores plus one
    point below and above all scores; ties break toward smaller ACER, then
    toward the smaller threshold.
    """
    _split_classes(dev_samples)
    distinct = sorted({s.score for s in dev_samples})
    candidates = [distinct[0] - 1.0]
    candidates += [(a + b) / 2 for a, b in zip(distinct, distinct[1:])]
    candidates.append(distinct[-1] + 1.0)
    best = None
    for thr in candidates:
        far, frr = far_frr(dev_samples, thr)
        key = (abs(far - frr), error_rates(dev_samples, thr).acer, thr)
        if best is None or key < best[0]:
            best = (key, thr)
    return best[1]


def hter(test_samples: list[ScoredSample], threshold: float) -> float:
    far, frr = far_frr(test_samples, threshold)
    return (far + frr) / 2


def auc(samples: list[ScoredSample]) -> float:
    """Probability a random spoof outscores a random live sample, ties as 1/2.

    Exact integer pair counting via sorted search; equals the trapezoidal
    ROC area.
    """
    live, spoof = _split_classes(samples)
    live_sorted = np.sort(np.array([s.score for s in live]))
    wins = 0
    ties = 0
    for s in spoof:
        left = int(np.searchsorted(live_sorted, s.score, side="left"))
        right = int(np.searchsorted(live_sorted, s.score, side="right"))
        wins += left
        ties += right - left
    return (2 * wins + ties) / (2 * len(spoof) * len(live))


def write_scores(samples: list[ScoredSample], path) -> None:
    """One line per sample: path, score, label, attack type (tab separated)."""
    lines = [f"{s.path}\t{s.score!r}\t{s.label}\t{s.attack_type}" for s in samples]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_summary(path, values: dict) -> None:
    """key=value lines; floats are written with full round-trip precision."""
    with open(path, "w") as fh:
        for key, value in values.items():
            fh.write(f"{key}={value!r}\n" if isinstance(value, float) else f"{key}={value}\n")
