"""Ranking metrics for reference-plus-candidates benchmarks.

Rankings are permutations listed best-to-worst: ``ranking[0]`` is the index
of the best candidate.  Correlations are computed on rank positions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import toyworld as tw
from .numcore import RngStream, uniform
from .pacodata import RankingInstance, rank_by_scores

REPORT_COLUMNS = ("method", "accuracy", "tau", "rho", "t1b1", "pairwise_acc", "n_samples")


class ArityError(ValueError):
    pass


def _check(perm: Sequence[int]) -> tuple[int, ...]:
    perm = tuple(int(x) for x in perm)
    if sorted(perm) != list(range(len(perm))):
        raise ValueError(f"{perm} is not a permutation of 0..{len(perm) - 1}")
    return perm


def positions(ranking: Sequence[int]) -> np.ndarray:
    """pos[c] = rank position of candidate c (0 = best)."""
    ranking = _check(ranking)
    pos = np.empty(len(ranking), dtype=np.int64)
    pos[list(ranking)] = np.arange(len(ranking))
    return pos


def _pair(predicted, annotated) -> tuple[np.ndarray, np.ndarray]:
    if len(predicted) != len(annotated):
        raise ArityError(f"arity mismatch: {len(predicted)} vs {len(annotated)}")
    return positions(predicted), positions(annotated)


def kendall_tau(predicted: Sequence[int], annotated: Sequence[int]) -> float:
    p, a = _pair(predicted, annotated)
    k = len(p)
    if k < 2:
        return 1.0
    i, j = np.triu_indices(k, 1)
    s = np.sign(p[i] - p[j]) * np.sign(a[i] - a[j])
    return float(s.sum() / (k * (k - 1) / 2))


def spearman_rho(predicted: Sequence[int], annotated: Sequence[int]) -> float:
    p, a = _pair(predicted, annotated)
    k = len(p)
    if k < 2:
        return 1.0
    d = (p - a).astype(np.float64)
    return float(1.0 - 6.0 * np.dot(d, d) / (k * (k * k - 1)))


@dataclass(frozen=True)
class RankingPairSample:
    predicted: tuple[int, ...]
    annotated: tuple[int, ...]

    def __post_init__(self):
        _pair(self.predicted, self.annotated)

    @property
    def arity(self) -> int:
        return len(self.predicted)


def _nonempty(samples) -> list[RankingPairSample]:
    samples = list(samples)
    if not samples:
        raise ValueError("metric needs at least one sample")
    return samples


def t1b1_accuracy(samples: Sequence[RankingPairSample]) -> float:
    samples = _nonempty(samples)
    hits = [s.predicted[0] == s.annotated[0] and s.predicted[-1] == s.annotated[-1] for s in samples]
    return float(np.mean(hits))


def position_accuracy(samples: Sequence[RankingPairSample]) -> float:
    samples = _nonempty(samples)
    return float(np.mean([np.mean(np.asarray(s.predicted) == np.asarray(s.annotated)) for s in samples]))


def mean_tau(samples: Sequence[RankingPairSample]) -> float:
    return float(np.mean([kendall_tau(s.predicted, s.annotated) for s in _nonempty(samples)]))


def mean_rho(samples: Sequence[RankingPairSample]) -> float:
    return float(np.mean([spearman_rho(s.predicted, s.annotated) for s in _nonempty(samples)]))


def roc_auc(scores: Sequence[float], positive: Sequence[bool]) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# ---------------------------------------------------------------- scorers under test

InstanceScorer = Callable[[RankingInstance], Sequence[float]]


def oracle_scorer(instance: RankingInstance) -> list[float]:
    return [tw.true_consistency(instance.ref_signal, c) for c in instance.cand_signals]


def cosine_scorer(instance: RankingInstance) -> list[float]:
    """Cosine similarity of raw samples: sees content and noise, not just identity."""
    r = instance.ref_signal.samples
    out = []
    for c in instance.cand_signals:
        x = c.samples
        out.append(float(np.dot(r, x) / (np.linalg.norm(r) * np.linalg.norm(x) + 1e-12)))
    return out


def random_scorer(seed: int = 0) -> InstanceScorer:
    def fn(instance: RankingInstance) -> list[float]:
        return list(uniform(RngStream(seed, instance.instance_id), len(instance.candidates)))
    return fn


def pair_scorer_adapter(scorer) -> InstanceScorer:
    from . import pacoreward as pr

    def fn(instance: RankingInstance) -> list[float]:
        return [c.score for c in pr.score_candidates(scorer, instance)]
    return fn


@dataclass
class InstanceResult:
    instance_id: int
    predicted: tuple[int, ...]
    annotated: tuple[int, ...]
    scores: tuple[float, ...]


def score_benchmark(scorer: InstanceScorer, instances: Sequence[RankingInstance]) -> list[InstanceResult]:
    out = []
    for inst in instances:
        if inst.annotation is None:
            raise ValueError(f"benchmark instance {inst.instance_id} is not annotated")
        s = tuple(float(v) for v in scorer(inst))
        out.append(InstanceResult(inst.instance_id, rank_by_scores(s), tuple(inst.annotation), s))
    return out


def benchmark_report(scorer: InstanceScorer, instances: Sequence[RankingInstance], method: str,
                     results: list[InstanceResult] | None = None) -> dict:
    """All ranking metrics plus pairwise accuracy on extremes pairs (top-1 must outscore bottom-1)."""
    results = results if results is not None else score_benchmark(scorer, instances)
    samples = [RankingPairSample(r.predicted, r.annotated) for r in results]
    pairwise = [r.scores[r.annotated[0]] > r.scores[r.annotated[-1]] for r in results]
    return {
        "method": method,
        "accuracy": position_accuracy(samples),
        "tau": mean_tau(samples),
        "rho": mean_rho(samples),
        "t1b1": t1b1_accuracy(samples),
        "pairwise_acc": float(np.mean(pairwise)),
        "n_samples": len(samples),
    }


def write_report_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in REPORT_COLUMNS})


def write_instance_csv(path, results: Sequence[InstanceResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "predicted", "annotated", "scores"])
        for r in results:
            w.writerow([r.instance_id, " ".join(map(str, r.predicted)), " ".join(map(str, r.annotated)),
                        " ".join(f"{s:.6f}" for s in r.scores)])

