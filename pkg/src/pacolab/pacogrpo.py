"""Group-relative policy optimisation over flow policies with log-tamed multi-reward aggregation.

Pipeline per epoch: sample N condition groups of G trajectories at the
training resolution, score every sample with each reward channel, compute the
per-channel coefficient of variation, log-tame the high-dispersion channels,
aggregate with channel weights, standardise within each group, and take one
Adam step on the clipped surrogate (minus an optional KL penalty).
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import flowgen as fg
from . import toyworld as tw
from .numcore import RngStream, adam_step, backward, choice, grads_of, track
from .numcore import tensor as T

DEGENERATE_STD = 1e-8
DOMINANCE_EPS = 1e-3


class ZeroMeanError(ZeroDivisionError):
    def __init__(self):
        super().__init__("coefficient of variation is undefined for a zero-mean channel; "
                         "shift the channel first (see shift_for_cv)")


class NonFiniteRatioError(FloatingPointError):
    pass


class RewardChannelError(RuntimeError):
    def __init__(self, name: str, cause: Exception):
        super().__init__(f"reward channel {name!r} failed: {cause}")
        self.channel = name


# ---------------------------------------------------------------- reward panel maths

def coefficient_of_variation(values) -> float:
    """Population std over all samples divided by their mean."""
    v = np.asarray(values, dtype=np.float64)
    mu = v.mean()
    if mu == 0.0:
        raise ZeroMeanError()
    return float(v.std() / mu)


def shift_for_cv(values) -> tuple[np.ndarray, float]:
    """Shift a channel with non-positive mean up to mean 0.5; returns (values, shift)."""
    v = np.asarray(values, dtype=np.float64)
    mu = v.mean()
    if mu > 0.0:
        return v, 0.0
    shift = 0.5 - mu
    return v + shift, float(shift)


def log_tame(values, h: float, delta: float) -> np.ndarray:
    """log(1 + R) when the channel's dispersion ``h`` exceeds ``delta``, else R unchanged."""
    v = np.asarray(values, dtype=np.float64)
    if not h > delta:
        return v
    if np.any(v <= -1.0):
        raise ValueError(f"log-taming needs rewards > -1, got min {v.min()}")
    return np.log1p(v)


def aggregate(tamed, weights) -> np.ndarray:
    """Weighted sum over the channel axis: (K, ...) -> (...)."""
    tamed = np.asarray(tamed, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (tamed.shape[0],):
        raise ValueError(f"{w.size} weights for {tamed.shape[0]} channels")
    return np.tensordot(w, tamed, axes=1)


def advantages(r) -> np.ndarray:
    """Standardise each row (one condition group) with its population std.

    Groups whose std falls below 1e-8 carry no preference information and get
    all-zero advantages.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] < 2:
        raise ValueError("group size must be at least 2")
    mu = r.mean(axis=-1, keepdims=True)
    sd = r.std(axis=-1, keepdims=True)
    ok = sd >= DEGENERATE_STD
    return np.where(ok, (r - mu) / np.where(ok, sd, 1.0), 0.0)


@dataclass
class RewardPanel:
    names: tuple[str, ...]
    weights: np.ndarray
    raw: np.ndarray          # (K, N, G)
    tamed: np.ndarray        # (K, N, G)
    cv: np.ndarray           # (K,)
    tamed_flags: np.ndarray  # (K,) bool
    shifts: np.ndarray       # (K,) shift applied before the CV
    delta: float
    aggregated: np.ndarray   # (N, G)
    advantages: np.ndarray   # (N, G)


def build_panel(raw, names: Sequence[str], weights, delta: float | str = 0.2, tame: bool = True) -> RewardPanel:
    """CV -> log-tame -> aggregate -> advantages.  ``delta`` may be "dynamic-mean"."""
    raw = np.asarray(raw, dtype=np.float64)
    K = raw.shape[0]
    shifted, shifts = zip(*(shift_for_cv(raw[k]) for k in range(K)))
    cv = np.array([coefficient_of_variation(s) for s in shifted])
    thr = float(cv.mean()) if delta == "dynamic-mean" else float(delta)
    if tame:
        tamed = np.stack([log_tame(raw[k], cv[k], thr) for k in range(K)])
        flags = cv > thr
    else:
        tamed = raw.copy()
        flags = np.zeros(K, dtype=bool)
    agg = aggregate(tamed, weights)
    return RewardPanel(tuple(names), np.asarray(weights, dtype=np.float64), raw, tamed, cv, flags,
                       np.asarray(shifts), thr, agg, advantages(agg))


# ---------------------------------------------------------------- objective

def _ratios(new, old) -> np.ndarray:
    with np.errstate(over="ignore"):
        r = np.exp(np.asarray(new, dtype=np.float64) - np.asarray(old, dtype=np.float64))
    if not np.all(np.isfinite(r)):
        bad = np.argwhere(~np.isfinite(r))[0]
        raise NonFiniteRatioError(f"non-finite policy ratio at (sample, step) {tuple(bad)}")
    return r


def _broadcast_adv(adv, shape) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return np.broadcast_to(adv.reshape(adv.shape + (1,) * (len(shape) - adv.ndim)), shape)


def clipped_objective(new, old, adv, eps: float) -> float:
    """mean over (sample, step) of min(r A, clip(r, 1-eps, 1+eps) A)."""
    r = _ratios(new, old)
    a = _broadcast_adv(adv, r.shape)
    return float(np.mean(np.minimum(r * a, np.clip(r, 1.0 - eps, 1.0 + eps) * a)))


def clipped_objective_grad(new, old, adv, eps: float) -> np.ndarray:
    """d J_clip / d new-log-prob; zero wherever the clipped branch is the active minimum."""
    r = _ratios(new, old)
    a = _broadcast_adv(adv, r.shape)
    clipped = ((a > 0) & (r > 1.0 + eps)) | ((a < 0) & (r < 1.0 - eps))
    return np.where(clipped, 0.0, a * r) / r.size


def kl_penalty(new, ref) -> float:
    """mean of exp(ref - new) - (ref - new) - 1 (non-negative KL estimator)."""
    x = np.asarray(ref, dtype=np.float64) - np.asarray(new, dtype=np.float64)
    return float(np.mean(np.expm1(x) - x))


def kl_penalty_grad(new, ref) -> np.ndarray:
    x = np.asarray(ref, dtype=np.float64) - np.asarray(new, dtype=np.float64)
    return (1.0 - np.exp(x)) / x.size


# ---------------------------------------------------------------- reward channels

@dataclass
class RewardChannel:
    """A named reward over generated sets: fn(samples (B, M, d), prompts) -> (B,)."""
    name: str
    fn: Callable[[np.ndarray, Sequence[tw.PromptSpec]], np.ndarray]

    def __call__(self, samples, prompts) -> np.ndarray:
        try:
            out = np.asarray(self.fn(samples, prompts), dtype=np.float64)
        except Exception as exc:  # noqa: BLE001 - rewrapped with the channel name
            raise RewardChannelError(self.name, exc) from exc
        if out.shape != (len(prompts),) or not np.all(np.isfinite(out)):
            raise RewardChannelError(self.name, ValueError(f"bad reward output shape {out.shape} or non-finite"))
        return out


def _pair_indices(M: int) -> tuple[np.ndarray, np.ndarray]:
    iu = np.triu_indices(M, k=1)
    return iu[0], iu[1]


def analytic_consistency_channel(k_id: int = tw.K_ID, tau_c: float = tw.TAU_C) -> RewardChannel:
    def fn(samples, prompts):
        samples = np.asarray(samples)
        if samples.shape[-1] < 4 * k_id:
            raise tw.PreconditionError(f"resolution d={samples.shape[-1]} below 4*k_id={4 * k_id}")
        feats = tw.band_coefficients(samples, tw.identity_modes(k_id))
        i, j = _pair_indices(samples.shape[1])
        return tw.consistency_from_features(feats[:, i], feats[:, j], tau_c).mean(axis=1)
    return RewardChannel("consistency", fn)


def alignment_channel(k_id: int = tw.K_ID, k_ct: int = tw.K_CT, tau_a: float = tw.TAU_A) -> RewardChannel:
    def fn(samples, prompts):
        samples = np.asarray(samples)
        if samples.shape[-1] < 4 * (k_id + k_ct):
            raise tw.PreconditionError(
                f"resolution d={samples.shape[-1]} below 4*(k_id+k_ct)={4 * (k_id + k_ct)}")
        feats = tw.band_coefficients(samples, tw.content_modes(k_id, k_ct))
        target = np.stack([np.asarray(p.contents[:samples.shape[1]]) for p in prompts])
        diff = feats - target
        return np.exp(-np.sum(diff * diff, axis=-1) / tau_a).mean(axis=1)
    return RewardChannel("alignment", fn)


def scorer_consistency_channel(scorer) -> RewardChannel:
    """Mean symmetrised P(YES) of a trained pair scorer over all member pairs of each set."""
    from . import pacoreward as pr

    def fn(samples, prompts):
        samples = np.asarray(samples)
        k_id = scorer.k_id
        if samples.shape[-1] < 4 * k_id:
            raise tw.PreconditionError(f"resolution d={samples.shape[-1]} below 4*k_id={4 * k_id}")
        feats = tw.band_coefficients(samples, tw.identity_modes(k_id))
        B = feats.shape[0]
        i, j = _pair_indices(samples.shape[1])
        fa, fb = feats[:, i].reshape(-1, k_id), feats[:, j].reshape(-1, k_id)
        s = 0.5 * (pr.score_features(scorer, fa, fb) + pr.score_features(scorer, fb, fa))
        return s.reshape(B, -1).mean(axis=1)
    return RewardChannel("consistency", fn)


# ---------------------------------------------------------------- configuration and loop

@dataclass
class GrpoConfig:
    group_size: int = 16
    conditions_per_epoch: int = 8
    clip_eps: float = 1e-4
    kl_beta: float = 0.0
    noise_a: float = 0.7
    sde_steps: tuple[int, ...] = (1,)
    n_steps: int = 10
    d_train: int = 32
    d_eval: int = 64
    delta: float | str = 0.2
    tame: bool = True
    lr: float = 3e-4
    epochs: int = 60

    def __post_init__(self):
        self.sde_steps = tuple(int(k) for k in self.sde_steps)
        if self.group_size < 2:
            raise ValueError("group size must be >= 2")
        if not self.clip_eps > 0:
            raise ValueError("clip epsilon must be positive")
        if self.kl_beta < 0:
            raise ValueError("KL weight must be non-negative")
        if self.d_train < tw.MIN_D or self.d_eval < tw.MIN_D:
            raise ValueError(f"resolutions must be >= {tw.MIN_D}")
        if not (self.delta == "dynamic-mean" or isinstance(self.delta, (int, float))):
            raise ValueError(f"delta must be a number or 'dynamic-mean', got {self.delta!r}")

    def to_json(self) -> dict:
        out = asdict(self)
        out["sde_steps"] = list(self.sde_steps)
        return out


@dataclass
class GrpoState:
    """Mutable training state: the policy plus the frozen reference parameters."""
    policy: fg.FlowModel
    ref_params: dict[str, np.ndarray]
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def start(cls, policy: fg.FlowModel) -> "GrpoState":
        p = policy.copy()
        return cls(p, {k: v.copy() for k, v in policy.params.items()})


def grpo_epoch(state: GrpoState, prompts: Sequence[tw.PromptSpec], channels: Sequence[RewardChannel],
               weights, config: GrpoConfig, stream: RngStream) -> dict:
    """One sample -> score -> update round.  Mutates ``state`` and returns the epoch report."""
    tic = time.perf_counter()
    policy = state.policy
    N, G = config.conditions_per_epoch, config.group_size
    epoch_stream = stream.split(state.epoch)
    pick = choice(epoch_stream, len(prompts), min(N, len(prompts)))
    chosen = [prompts[int(i)] for i in pick]
    N = len(chosen)
    batch_prompts = [p for p in chosen for _ in range(G)]
    streams = [epoch_stream.split(1000 + i * G + j) for i in range(N) for j in range(G)]
    trajs = fg.sample_batch(policy, batch_prompts, config.d_train, config.n_steps, config.sde_steps,
                            config.noise_a, streams)
    samples = np.stack([tr.sample for tr in trajs])

    raw = np.stack([ch(samples, batch_prompts).reshape(N, G) for ch in channels])
    panel = build_panel(raw, [ch.name for ch in channels], weights, config.delta, config.tame)

    old = np.stack([tr.logprobs for tr in trajs])
    stochastic = bool(config.sde_steps) and config.noise_a > 0.0
    j_clip = kl = 0.0
    if stochastic:
        tensors = track(policy.params)
        new_t = fg.sde_logprobs(policy, trajs, tensors)
        new = new_t.data
        adv = panel.advantages.reshape(-1)
        j_clip = clipped_objective(new, old, adv, config.clip_eps)
        coeff = -clipped_objective_grad(new, old, adv, config.clip_eps)
        ref_model = fg.FlowModel(state.ref_params, policy.hidden, policy.n_fourier, policy.k_id, policy.k_ct)
        ref = fg.sde_logprobs(ref_model, trajs).data
        kl = kl_penalty(new, ref)
        if config.kl_beta > 0.0:
            coeff = coeff + config.kl_beta * kl_penalty_grad(new, ref)
        if np.any(coeff != 0.0):
            surrogate = T.sum(T.mul(new_t, coeff))
            backward(surrogate)
            policy.params, policy.opt_state = adam_step(policy.params, grads_of(tensors), policy.opt_state,
                                                        config.lr)
    report = {
        "epoch": state.epoch,
        "channel_mean": {n: float(raw[k].mean()) for k, n in enumerate(panel.names)},
        "channel_std": {n: float(raw[k].std()) for k, n in enumerate(panel.names)},
        "cv": {n: float(panel.cv[k]) for k, n in enumerate(panel.names)},
        "tamed": {n: bool(panel.tamed_flags[k]) for k, n in enumerate(panel.names)},
        "cv_shift": {n: float(panel.shifts[k]) for k, n in enumerate(panel.names)},
        "delta": panel.delta,
        "aggregated_mean": float(panel.aggregated.mean()),
        "j_clip": j_clip,
        "kl": kl,
        "points_processed": N * G * config.n_steps * config.d_train,
        "samples": N * G,
        "seconds": time.perf_counter() - tic,
    }
    state.history.append(report)
    if set(panel.names) == {"consistency", "alignment"}:
        report["dominance_ratio"] = dominance_ratio(state.history)[-1]
    state.epoch += 1
    return report


def dominance_ratio(history: Sequence[dict], consistency: str = "consistency", alignment: str = "alignment",
                    key: str = "channel_mean", eps_d: float = DOMINANCE_EPS) -> list[float]:
    """Per-epoch (consistency gain since epoch 0) / max(alignment gain since epoch 0, eps_d)."""
    if not history:
        return []
    names = set(history[0][key])
    if names != {consistency, alignment}:
        raise ValueError(f"dominance ratio needs exactly the channels {consistency!r} and {alignment!r}, "
                         f"got {sorted(names)}")
    c0, a0 = history[0][key][consistency], history[0][key][alignment]
    return [(h[key][consistency] - c0) / max(h[key][alignment] - a0, eps_d) for h in history]


def evaluate_policy(policy: fg.FlowModel, prompts: Sequence[tw.PromptSpec], channels: Sequence[RewardChannel],
                    d: int, n_steps: int, seed: int) -> dict[str, float]:
    """Mean channel rewards of deterministic samples at resolution ``d`` with fixed noise seeds."""
    streams = [RngStream(seed, i) for i in range(len(prompts))]
    samples = fg.ode_sample(policy, prompts, d, n_steps, streams)
    return {ch.name: float(ch(samples, prompts).mean()) for ch in channels}


# ---------------------------------------------------------------- runs and ablations

EPOCH_CSV_COLUMNS = ("epoch", "channel", "mean", "std", "cv", "tamed", "aggregated_mean", "j_clip", "kl",
                     "dominance_ratio", "eval_reward", "points_processed")
PLOT_COLUMNS = ("epoch", "series", "value", "cost_points")


def eval_aggregate(evals: dict[str, float], names: Sequence[str], weights) -> float:
    """Weighted sum of raw (untamed) eval channel means."""
    return float(sum(w * evals[n] for n, w in zip(names, weights)))


@dataclass
class RunResult:
    state: GrpoState
    eval_before: dict[str, float]
    eval_after: dict[str, float]
    eval_curve: list[tuple[int, float]]
    status: str = "ok"

    def summary(self, names: Sequence[str], weights) -> dict:
        h = self.state.history
        ratio = h[-1].get("dominance_ratio") if h else None
        return {
            "status": self.status,
            "epochs": len(h),
            "eval_before": self.eval_before,
            "eval_after": self.eval_after,
            "eval_aggregated_before": eval_aggregate(self.eval_before, names, weights),
            "eval_aggregated_after": eval_aggregate(self.eval_after, names, weights),
            "final_dominance_ratio": ratio,
            "points_per_epoch": h[-1]["points_processed"] if h else 0,
        }


def write_epoch_rows(fh, report: dict, eval_reward: float | None) -> None:
    w = csv.writer(fh, lineterminator="\n")
    for name in report["channel_mean"]:
        w.writerow([report["epoch"], name, f"{report['channel_mean'][name]:.10g}",
                    f"{report['channel_std'][name]:.10g}", f"{report['cv'][name]:.10g}",
                    int(report["tamed"][name]), f"{report['aggregated_mean']:.10g}", f"{report['j_clip']:.10g}",
                    f"{report['kl']:.10g}", "" if report.get("dominance_ratio") is None
                    else f"{report['dominance_ratio']:.10g}",
                    "" if eval_reward is None else f"{eval_reward:.10g}", report["points_processed"]])


def run_grpo(policy: fg.FlowModel, train_prompts: Sequence[tw.PromptSpec], eval_prompts: Sequence[tw.PromptSpec],
             channels: Sequence[RewardChannel], weights, config: GrpoConfig, stream: RngStream,
             eval_every: int = 0, eval_seed: int = 0, csv_path=None, log=None) -> RunResult:
    """``config.epochs`` GRPO epochs from a copy of ``policy``, with eval at ``config.d_eval``.

    ``eval_every`` > 0 records the eval-resolution aggregated reward every that
    many epochs.  ``csv_path`` streams per-epoch, per-channel rows; wall-clock
    time stays out of the file so reruns are byte-identical.
    """
    names = [ch.name for ch in channels]
    if len(weights) != len(channels):
        raise ValueError(f"{len(weights)} weights for {len(channels)} channels")
    state = GrpoState.start(policy)
    ev0 = evaluate_policy(state.policy, eval_prompts, channels, config.d_eval, config.n_steps, eval_seed)
    curve = [(0, eval_aggregate(ev0, names, weights))]
    fh = open(csv_path, "w", newline="") if csv_path else None
    try:
        if fh:
            csv.writer(fh, lineterminator="\n").writerow(EPOCH_CSV_COLUMNS)
        for e in range(config.epochs):
            report = grpo_epoch(state, train_prompts, channels, weights, config, stream)
            ev = None
            if eval_every and (e + 1) % eval_every == 0:
                evals = evaluate_policy(state.policy, eval_prompts, channels, config.d_eval, config.n_steps,
                                        eval_seed)
                ev = eval_aggregate(evals, names, weights)
                curve.append((e + 1, ev))
            if fh:
                write_epoch_rows(fh, report, ev)
            if log:
                log(f"epoch {e}: " + ", ".join(f"{n}={v:.4f}" for n, v in report["channel_mean"].items())
                    + f" ({report['seconds']:.2f}s)")
    finally:
        if fh:
            fh.close()
    ev1 = evaluate_policy(state.policy, eval_prompts, channels, config.d_eval, config.n_steps, eval_seed)
    if not curve or curve[-1][0] != config.epochs:
        curve.append((config.epochs, eval_aggregate(ev1, names, weights)))
    return RunResult(state, ev0, ev1, curve)


def resolution_ablation(policy: fg.FlowModel, train_prompts, eval_prompts, channels, weights, config: GrpoConfig,
                        resolutions: Sequence[int], seed: int, eval_every: int = 1) -> dict:
    """One paired run per d_train, all from the same initial policy and seed, evaluated at d_eval.

    A resolution that cannot feed the reward channels is reported with status
    "precondition_failed" and its policy left untrained.
    """
    names = [ch.name for ch in channels]
    arms = {}
    for d in resolutions:
        if d < tw.MIN_D:
            raise ValueError(f"d_train={d} below minimum {tw.MIN_D}")
        cfg = replace(config, d_train=int(d))
        try:
            res = run_grpo(policy, train_prompts, eval_prompts, channels, weights, cfg, RngStream(seed),
                           eval_every=eval_every, eval_seed=seed)
            arm = res.summary(names, weights)
            arm["curve"] = res.eval_curve
            arm["points_per_epoch"] = res.state.history[-1]["points_processed"] if res.state.history else 0
        except (tw.PreconditionError, RewardChannelError) as exc:
            ev = evaluate_policy(policy, eval_prompts, channels, config.d_eval, config.n_steps, seed)
            agg = eval_aggregate(ev, names, weights)
            arm = {"status": "precondition_failed", "reason": str(exc), "epochs": 0, "eval_before": ev,
                   "eval_after": ev, "eval_aggregated_before": agg, "eval_aggregated_after": agg,
                   "final_dominance_ratio": None, "curve": [(0, agg)],
                   "points_per_epoch": config.conditions_per_epoch * config.group_size * config.n_steps * d}
        arms[str(d)] = arm
    base = arms[str(max(resolutions))]["eval_aggregated_after"]
    for arm in arms.values():
        arm["relative_to_full"] = arm["eval_aggregated_after"] / base
        arm["cost_ratio"] = arm["points_per_epoch"] / arms[str(max(resolutions))]["points_per_epoch"]
    return {"mode": "resolution", "d_eval": config.d_eval, "seed": seed, "arms": arms}


def logtame_ablation(policy: fg.FlowModel, train_prompts, eval_prompts, channels, weights, config: GrpoConfig,
                     seeds: Sequence[int]) -> dict:
    """Paired naive/tamed runs per seed; compares final-epoch dominance ratios."""
    names = [ch.name for ch in channels]
    pairs = []
    curves = {}
    for s in seeds:
        row = {"seed": int(s)}
        for label, tame in (("naive", False), ("tamed", True)):
            res = run_grpo(policy, train_prompts, eval_prompts, channels, weights, replace(config, tame=tame),
                           RngStream(s), eval_seed=s)
            ratios = dominance_ratio(res.state.history)
            row[label] = ratios[-1]
            row[f"{label}_eval_after"] = res.eval_after
            curves[f"{label}/seed{s}"] = [(h["epoch"], r, h["points_processed"])
                                          for h, r in zip(res.state.history, ratios)]
        row["tamed_lower"] = row["tamed"] < row["naive"]
        pairs.append(row)
    return {"mode": "logtame", "weights": list(map(float, weights)), "channels": names, "pairs": pairs,
            "tamed_lower_count": sum(p["tamed_lower"] for p in pairs), "curves": curves}


def write_plot_csv(path, summary: dict) -> None:
    """Plot data with the fixed header (epoch, series, value, cost_points)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_COLUMNS)
        if summary["mode"] == "resolution":
            for d, arm in summary["arms"].items():
                for epoch, value in arm["curve"]:
                    w.writerow([epoch, f"d_train={d}", f"{value:.10g}", arm["points_per_epoch"] * epoch])
        else:
            for series, rows in summary["curves"].items():
                for epoch, value, cost in rows:
                    w.writerow([epoch, series, f"{value:.10g}", cost * (epoch + 1)])


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
