"""Generative pairwise consistency scorer.

The scorer reads identity-band features of a (reference, candidate) pair and
emits a short token sequence: a YES/NO decision followed by rationale symbols
and END.  The probability of YES at the first position is the consistency
score, so RL-time scoring needs only one forward position.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import toyworld as tw
from .numcore import (AdamState, RngStream, T, Tensor, adam_step, backward, forward_mlp, gaussian, grads_of,
                      init_mlp, load_checkpoint, mlp_layers, permutation, save_checkpoint, track)
from .pacodata import END, NO, VOCAB_SIZE, YES, LabeledPair, RankingInstance, rank_by_scores

BOS = VOCAB_SIZE  # extra embedding row used as the "previous token" at position 0
CHECKPOINT_KIND = "pair_scorer"


class ScorerDivergedError(FloatingPointError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"scorer loss became non-finite ({loss}) at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class PairScorer:
    params: dict[str, np.ndarray]
    k_id: int = tw.K_ID
    hidden: int = 64
    max_len: int = tw.K_ID + 2

    def copy(self) -> "PairScorer":
        return PairScorer({k: v.copy() for k, v in self.params.items()}, self.k_id, self.hidden, self.max_len)

    def meta(self) -> dict:
        return {"kind": CHECKPOINT_KIND, "k_id": self.k_id, "hidden": self.hidden, "max_len": self.max_len}


@dataclass(frozen=True)
class ScoredCandidate:
    candidate: int
    score: float


def init_scorer(stream: RngStream, k_id: int = tw.K_ID, hidden: int = 64) -> PairScorer:
    max_len = k_id + 2
    params = init_mlp([3 * k_id, hidden, hidden], stream.split(0), prefix="enc_")
    params["pos"] = 0.1 * gaussian(stream.split(1), (max_len, hidden))
    params["emb"] = 0.1 * gaussian(stream.split(2), (VOCAB_SIZE + 1, hidden))
    params.update(init_mlp([hidden, VOCAB_SIZE], stream.split(3), prefix="out_"))
    return PairScorer(params, k_id, hidden, max_len)


def save_scorer(path, scorer: PairScorer, extra: dict | None = None) -> None:
    save_checkpoint(path, scorer.params, {**scorer.meta(), **(extra or {})})


def load_scorer(path) -> PairScorer:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path} is not a scorer checkpoint (kind={meta.get('kind')!r})")
    return PairScorer(params, int(meta["k_id"]), int(meta["hidden"]), int(meta["max_len"]))


# ---------------------------------------------------------------- forward

def pair_inputs(f_ref: np.ndarray, f_cand: np.ndarray) -> np.ndarray:
    f_ref = np.atleast_2d(f_ref)
    f_cand = np.atleast_2d(f_cand)
    return np.concatenate([f_ref, f_cand, f_cand - f_ref], axis=-1)


def _encode(scorer: PairScorer, tensors: dict[str, Tensor], inputs: np.ndarray) -> Tensor:
    return T.tanh(forward_mlp(mlp_layers(tensors, "enc_"), inputs))


def _position_logits(scorer: PairScorer, tensors: dict[str, Tensor], h: Tensor, pos: int,
                     prev: np.ndarray) -> Tensor:
    onehot = np.zeros((prev.size, VOCAB_SIZE + 1))
    onehot[np.arange(prev.size), prev] = 1.0
    pos_row = T.reshape(T.matmul(Tensor(np.eye(scorer.max_len)[pos:pos + 1]), tensors["pos"]), (1, scorer.hidden))
    z = T.tanh(h + pos_row + T.matmul(Tensor(onehot), tensors["emb"]))
    return forward_mlp(mlp_layers(tensors, "out_"), z)


def sequence_logprobs(scorer: PairScorer, inputs: np.ndarray, targets: np.ndarray,
                      tensors: dict[str, Tensor] | None = None) -> list[Tensor]:
    """Teacher-forced log p(y_i | y_<i, pair) for each position; one (B,) tensor per position."""
    tensors = tensors if tensors is not None else {k: Tensor(v) for k, v in scorer.params.items()}
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 2 or targets.shape[1] < 1:
        raise ValueError("targets must be (batch, n>=1) token ids")
    if targets.shape[1] > scorer.max_len:
        raise ValueError(f"target length {targets.shape[1]} exceeds scorer max_len {scorer.max_len}")
    h = _encode(scorer, tensors, inputs)
    prev = np.full(targets.shape[0], BOS)
    out = []
    for i in range(targets.shape[1]):
        logits = _position_logits(scorer, tensors, h, i, prev)
        out.append(T.softmax_log_likelihood(logits, targets[:, i]))
        prev = targets[:, i]
    return out


def first_position_probs(scorer: PairScorer, f_ref: np.ndarray, f_cand: np.ndarray) -> np.ndarray:
    """(B, vocab) next-token distribution at the decision position."""
    tensors = {k: Tensor(v) for k, v in scorer.params.items()}
    h = _encode(scorer, tensors, pair_inputs(f_ref, f_cand))
    logits = _position_logits(scorer, tensors, h, 0, np.full(h.shape[0], BOS))
    return np.exp(T.log_softmax(logits).data)


def score_features(scorer: PairScorer, f_ref: np.ndarray, f_cand: np.ndarray) -> np.ndarray:
    """P(first token = YES) for a batch of feature pairs."""
    return first_position_probs(scorer, f_ref, f_cand)[:, YES]


def score(scorer: PairScorer, reference: tw.Signal, candidate: tw.Signal) -> float:
    fr = tw.extract_identity(reference, scorer.k_id)
    fc = tw.extract_identity(candidate, scorer.k_id)
    return float(score_features(scorer, fr, fc)[0])


def score_candidates(scorer: PairScorer, instance: RankingInstance) -> list[ScoredCandidate]:
    fr = tw.extract_identity(instance.ref_signal, scorer.k_id)
    fc = np.stack([tw.extract_identity(c, scorer.k_id) for c in instance.cand_signals])
    s = score_features(scorer, np.broadcast_to(fr, fc.shape), fc)
    return [ScoredCandidate(i, float(v)) for i, v in enumerate(s)]


def rank_candidates(scorer: PairScorer, instance: RankingInstance) -> tuple[int, ...]:
    return rank_by_scores([c.score for c in score_candidates(scorer, instance)])


# ---------------------------------------------------------------- objective

def paco_loss(logps, alpha: float):
    """-[alpha * log p(y_0) + (1 - alpha) * mean_{i>=1} log p(y_i)]; -log p(y_0) when n == 1.

    ``logps`` is a sequence of per-position log-probabilities: floats, numpy
    arrays or Tensors (batched values are averaged over the batch).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    logps = list(logps)
    if not logps:
        raise ValueError("paco_loss needs at least one target token")
    if any(isinstance(x, Tensor) for x in logps):
        first = T.mean(logps[0])
        if len(logps) == 1:
            return -first
        rest = T.mean(T.concat([T.reshape(x, (-1,)) for x in logps[1:]], axis=0))
        return -(alpha * first + (1.0 - alpha) * rest)
    arr = [np.mean(np.asarray(x, dtype=np.float64)) for x in logps]
    if len(arr) == 1:
        return float(-arr[0])
    return float(-(alpha * arr[0] + (1.0 - alpha) * np.mean(arr[1:])))


def pair_targets(pairs: Sequence[LabeledPair], use_rationale: bool = True) -> np.ndarray:
    rows = []
    for p in pairs:
        row = [p.decision_token]
        if use_rationale:
            row.extend(p.rationale if p.rationale else (END,))
        rows.append(row)
    if len({len(r) for r in rows}) != 1:
        raise ValueError("all pairs need rationales of equal length")
    return np.asarray(rows, dtype=np.int64)


def pair_features(pairs: Sequence[LabeledPair], k_id: int = tw.K_ID) -> np.ndarray:
    fr = np.stack([tw.extract_identity(p.ref_signal, k_id) for p in pairs])
    fc = np.stack([tw.extract_identity(p.cand_signal, k_id) for p in pairs])
    return pair_inputs(fr, fc)


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)

    def last(self) -> dict:
        return self.epochs[-1] if self.epochs else {}


def decision_accuracy(scorer: PairScorer, pairs: Sequence[LabeledPair]) -> float:
    """Fraction of pairs where P(YES) > 0.5 agrees with the label."""
    inputs = pair_features(pairs, scorer.k_id)
    k = scorer.k_id
    p = score_features(scorer, inputs[:, :k], inputs[:, k:2 * k])
    want = np.array([q.decision_token == YES for q in pairs])
    return float(np.mean((p > 0.5) == want))


def preference_accuracy(scorer: PairScorer, pairs: Sequence[LabeledPair]) -> float:
    """Per instance, does the consistent pair outscore the inconsistent one."""
    inputs = pair_features(pairs, scorer.k_id)
    k = scorer.k_id
    s = score_features(scorer, inputs[:, :k], inputs[:, k:2 * k])
    by_inst: dict[int, dict[str, list[float]]] = {}
    for q, v in zip(pairs, s):
        by_inst.setdefault(q.instance_id, {"consistent": [], "inconsistent": []})[q.label].append(float(v))
    wins = [min(d["consistent"]) > max(d["inconsistent"]) for d in by_inst.values()
            if d["consistent"] and d["inconsistent"]]
    return float(np.mean(wins)) if wins else float("nan")


def train_scorer(pairs: Sequence[LabeledPair], alpha: float = 0.1, epochs: int = 20, lr: float = 2e-4,
                 stream: RngStream | None = None, batch_size: int = 32, hidden: int = 64,
                 use_rationale: bool = True, scorer: PairScorer | None = None) -> tuple[PairScorer, TrainLog]:
    """Minimise the mean weighted-likelihood loss with Adam over shuffled minibatches.

    ``use_rationale=False`` with ``alpha=1`` trains on decision tokens only.
    """
    if not pairs:
        raise ValueError("train_scorer needs at least one pair")
    stream = stream or RngStream(0)
    k_id = tw.K_ID
    scorer = scorer.copy() if scorer is not None else init_scorer(stream.split(0), k_id, hidden)
    inputs = pair_features(pairs, scorer.k_id)
    targets = pair_targets(pairs, use_rationale)
    labels_yes = targets[:, 0] == YES
    state = AdamState()
    log = TrainLog()
    n = len(pairs)
    for epoch in range(epochs):
        order = permutation(stream.split(1000 + epoch), n)
        total, seen = 0.0, 0
        for step, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            tensors = track(scorer.params)
            loss = paco_loss(sequence_logprobs(scorer, inputs[idx], targets[idx], tensors), alpha)
            value = loss.item()
            if not np.isfinite(value):
                raise ScorerDivergedError(epoch, step, value)
            backward(loss)
            scorer.params, state = adam_step(scorer.params, grads_of(tensors), state, lr)
            total += value * idx.size
            seen += idx.size
        p = score_features(scorer, inputs[:, :k_id], inputs[:, k_id:2 * k_id])
        log.epochs.append({"epoch": epoch, "loss": total / seen,
                           "decision_accuracy": float(np.mean((p > 0.5) == labels_yes))})
    return scorer, log


def scorer_pair_score(scorer: PairScorer):
    """Adapter for toyworld.consistency_reward_set: symmetrised scorer on a signal pair."""
    def fn(a: tw.Signal, b: tw.Signal) -> float:
        return 0.5 * (score(scorer, a, b) + score(scorer, b, a))
    return fn
