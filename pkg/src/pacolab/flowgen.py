"""Resolution-agnostic conditional flow-matching policy.

Conventions: t=0 is data, t=1 is noise, x_t = (1-t) x_data + t x_noise and the
velocity points from data toward noise.  Sampling integrates t from 0.96 down
to 0.04 with negative steps, then takes one deterministic Euler step to t=0.

A generated sample is a *set* of M member signals (one per content index of
the prompt), produced jointly: every point sees pooled summaries of its own
member and of the whole set.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import toyworld as tw
from .numcore import (
    AdamState,
    RngStream,
    Tensor,
    adam_step,
    backward,
    forward_mlp,
    gaussian,
    grads_of,
    init_mlp,
    load_checkpoint,
    mlp_layers,
    save_checkpoint,
    track,
    uniform,
)
from .numcore import tensor as T

T_MAX = 0.96
T_MIN = 0.04
NOISE_MODES = 16  # band limit of the initial noise field (modes 0..15)
LOG_2PI = math.log(2.0 * math.pi)


class DegenerateDensityError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class FlowModel:
    params: dict[str, np.ndarray]
    hidden: tuple[int, ...] = (64, 64)
    n_fourier: int = 4
    k_id: int = tw.K_ID
    k_ct: int = tw.K_CT
    opt_state: AdamState = field(default_factory=AdamState, repr=False)

    @property
    def n_inputs(self) -> int:
        return input_width(self.n_fourier)

    @property
    def n_ctx(self) -> int:
        return self.k_id + self.k_ct

    def copy(self) -> "FlowModel":
        return FlowModel({k: v.copy() for k, v in self.params.items()}, self.hidden, self.n_fourier,
                         self.k_id, self.k_ct, AdamState())

    def descriptor(self) -> dict:
        return {"hidden": list(self.hidden), "n_fourier": self.n_fourier, "k_id": self.k_id, "k_ct": self.k_ct}


def input_width(n_fourier: int) -> int:
    # fourier(u) + x_t + time(3) + condition fields(6) + pooled context fields(4)
    return 2 * n_fourier + 1 + 3 + 6 + 4


def init_flow_model(stream: RngStream, hidden: Sequence[int] = (64, 64), n_fourier: int = 4,
                    k_id: int = tw.K_ID, k_ct: int = tw.K_CT) -> FlowModel:
    sizes = [input_width(n_fourier), *hidden, 1]
    params = init_mlp(sizes, stream)
    # start from a small output layer so the untrained field is gentle
    last = len(sizes) - 2
    params[f"W{last}"] *= 0.1
    return FlowModel(params, tuple(hidden), n_fourier, k_id, k_ct)


def condition_array(prompts: Sequence[tw.PromptSpec], n_members: int | None = None) -> np.ndarray:
    """(B, M, k_id + k_ct + 2) rows of [identity, content_m, style[:2]]."""
    rows = []
    for p in prompts:
        m = n_members or p.n_contents
        style = (list(p.style) + [0.0, 0.0])[:2]
        rows.append([list(p.identity) + list(p.contents[i]) + style for i in range(m)])
    return np.asarray(rows, dtype=np.float64)


def band_limited_noise(stream: RngStream, lead_shape: tuple[int, ...], d: int,
                       n_modes: int = NOISE_MODES) -> np.ndarray:
    """Unit-variance noise field synthesized from its first ``n_modes`` Fourier modes.

    The field is a function of u, so the same stream gives the same underlying
    noise at every resolution.
    """
    coef = gaussian(stream, (*lead_shape, 2 * n_modes - 1))
    modes = np.arange(1, n_modes)
    basis = np.concatenate(
        [np.ones((1, d)), math.sqrt(2.0) * tw.cos_basis(modes, d), math.sqrt(2.0) * tw.sin_basis(modes, d)]
    )
    return coef @ basis / math.sqrt(2 * n_modes - 1)


def _fields(cond: np.ndarray, d: int, k_id: int, k_ct: int) -> np.ndarray:
    """Condition rendered at each grid point: (B, M, d, 6)."""
    ident, content, style = cond[..., :k_id], cond[..., k_id:k_id + k_ct], cond[..., k_id + k_ct:]
    id_modes = tw.identity_modes(k_id)
    ct_modes = tw.content_modes(k_id, k_ct)
    out = np.empty((*cond.shape[:2], d, 6))
    out[..., 0] = ident @ tw.cos_basis(id_modes, d)
    out[..., 1] = content @ tw.cos_basis(ct_modes, d)
    out[..., 2] = ident @ tw.sin_basis(id_modes, d)
    out[..., 3] = content @ tw.sin_basis(ct_modes, d)
    out[..., 4] = style[..., 0:1]
    out[..., 5] = style[..., 1:2]
    return out


def _context(x: np.ndarray, n_ctx: int) -> np.ndarray:
    """Mean-pooled band summaries broadcast back to points: (B, M, d, 4)."""
    d = x.shape[-1]
    modes = np.arange(1, n_ctx + 1)
    cb, sb = tw.cos_basis(modes, d), tw.sin_basis(modes, d)
    ccoef = x @ cb.T * (2.0 / d)
    scoef = x @ sb.T * (2.0 / d)
    member_c, member_s = ccoef @ cb, scoef @ sb
    out = np.empty((*x.shape, 4))
    out[..., 0] = member_c
    out[..., 1] = member_s
    out[..., 2] = member_c.mean(axis=1, keepdims=True)
    out[..., 3] = member_s.mean(axis=1, keepdims=True)
    return out


def point_features(model: FlowModel, x: np.ndarray, t: np.ndarray, cond: np.ndarray) -> np.ndarray:
    """Per-point network inputs for latents ``x`` (B, M, d) at times ``t`` (B,)."""
    B, M, d = x.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    u = tw.grid(d)
    k = np.arange(1, model.n_fourier + 1)
    four = np.concatenate([np.cos(2 * np.pi * np.outer(u, k)), np.sin(2 * np.pi * np.outer(u, k))], axis=1)
    feats = np.empty((B, M, d, model.n_inputs))
    nf = 2 * model.n_fourier
    feats[..., :nf] = four
    feats[..., nf] = x
    tt = t[:, None, None]
    feats[..., nf + 1] = tt
    feats[..., nf + 2] = np.cos(np.pi * tt)
    feats[..., nf + 3] = np.sin(np.pi * tt)
    feats[..., nf + 4:nf + 10] = _fields(cond, d, model.k_id, model.k_ct)
    feats[..., nf + 10:] = _context(x, model.n_ctx)
    return feats.reshape(B * M * d, model.n_inputs)


def velocity(model: FlowModel, x: np.ndarray, t, cond: np.ndarray,
             tensors: dict[str, Tensor] | None = None) -> Tensor:
    """Velocity field at every point; differentiable w.r.t. ``tensors`` when given."""
    src = tensors if tensors is not None else {k: Tensor(v) for k, v in model.params.items()}
    out = forward_mlp(mlp_layers(src), point_features(model, x, t, cond))
    return T.reshape(out, x.shape)


def velocity_np(model: FlowModel, x: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
    return velocity(model, x, t, cond).data


# ---------------------------------------------------------------- training

def fm_loss(model: FlowModel, data: np.ndarray, cond: np.ndarray, t: np.ndarray, noise: np.ndarray,
            tensors: dict[str, Tensor] | None = None) -> Tensor:
    x_t = (1.0 - t)[:, None, None] * data + t[:, None, None] * noise
    target = noise - data
    v = velocity(model, x_t, t, cond, tensors)
    return T.mean(T.square(T.sub(v, target)))


def fm_train_step(model: FlowModel, batch: Sequence[tuple[np.ndarray, tw.PromptSpec]], stream: RngStream,
                  lr: float = 1e-3) -> float:
    """One flow-matching regression step with Adam; updates ``model`` in place.

    Each batch item is ``(samples, prompt)`` with samples shaped (M, d).
    """
    if not batch:
        raise ValueError("flow-matching batch is empty")
    data = np.stack([np.asarray(s, dtype=np.float64).reshape(-1, np.shape(s)[-1]) for s, _ in batch])
    cond = condition_array([p for _, p in batch], data.shape[1])
    B, M, d = data.shape
    t = uniform(stream, B, 1e-3, 1.0 - 1e-3)
    noise = band_limited_noise(stream, (B, M), d)
    tensors = track(model.params)
    loss = fm_loss(model, data, cond, t, noise, tensors)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(
            f"flow-matching loss is {value} (batch of {B} sets, d={d}, data max |x|={np.abs(data).max():.3g})"
        )
    backward(loss)
    model.params, model.opt_state = adam_step(model.params, grads_of(tensors), model.opt_state, lr)
    return value


def pretraining_set(prompt: tw.PromptSpec, stream: RngStream, d: int, set_jitter: float = 0.1,
                    member_jitter: float = 0.15, content_jitter: float = 0.15) -> np.ndarray:
    """One (M, d) training set for the base policy.

    Members only loosely agree on identity (``member_jitter``), so the
    pretrained policy leaves room for consistency fine-tuning.
    """
    base = np.asarray(prompt.identity) + set_jitter * gaussian(stream, prompt.k_id)
    out = []
    for content in prompt.contents:
        ident = base + member_jitter * gaussian(stream, prompt.k_id)
        ct = np.asarray(content) + content_jitter * gaussian(stream, prompt.k_ct)
        out.append(tw.synthesize(ident, ct, prompt.style, d))
    return np.asarray(out)


def pretrain(prompts: Sequence[tw.PromptSpec], steps: int, stream: RngStream, d: int = 32, batch_size: int = 16,
             lr: float = 2e-3, model: FlowModel | None = None, log_every: int = 0) -> tuple[FlowModel, list[float]]:
    """Flow-matching pretraining on freshly drawn sets, cycling through ``prompts``."""
    if not prompts:
        raise ValueError("pretraining needs at least one prompt")
    model = model if model is not None else init_flow_model(stream.split(0))
    data_stream = stream.split(1)
    losses = []
    for it in range(steps):
        idx = (np.arange(batch_size) + it * batch_size) % len(prompts)
        batch = [(pretraining_set(prompts[i], data_stream, d), prompts[i]) for i in idx]
        losses.append(fm_train_step(model, batch, data_stream, lr=lr))
        if log_every and it % log_every == 0:
            print(f"pretrain step {it} loss {losses[-1]:.4f}", flush=True)
    return model, losses


def save_flow_model(path, model: FlowModel, extra: dict | None = None) -> None:
    save_checkpoint(path, model.params, {"kind": "flow_model", **model.descriptor(), **(extra or {})})


def load_flow_model(path) -> FlowModel:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "flow_model":
        raise ValueError(f"{path} is not a flow-model checkpoint (kind={meta.get('kind')!r})")
    return FlowModel(params, tuple(meta["hidden"]), int(meta["n_fourier"]), int(meta["k_id"]), int(meta["k_ct"]))


# ---------------------------------------------------------------- sampling

def noise_scale(t: float, a: float) -> float:
    if not 0.0 < t < 1.0:
        raise ValueError(f"noise scale is singular outside 0 < t < 1 (t={t})")
    return a * math.sqrt(t / (1.0 - t))


def time_grid(T_steps: int) -> np.ndarray:
    if T_steps < 2:
        raise ValueError("need at least 2 sampling steps")
    return np.linspace(T_MAX, T_MIN, T_steps + 1)


def sde_mean(x_t, v, t: float, dt: float, sigma: float):
    """x_t + [v + sigma^2/(2t) (x_t + (1-t) v)] dt; works for arrays and Tensors."""
    if t <= 0.0:
        raise ValueError("SDE drift is singular at t = 0")
    c = sigma * sigma / (2.0 * t)
    if isinstance(v, Tensor):
        # affine in v: x_t (1 + c dt) + v (1 + c (1-t)) dt
        return T.add(x_t * (1.0 + c * dt), T.mul(v, (1.0 + c * (1.0 - t)) * dt))
    return x_t + (v + c * (x_t + (1.0 - t) * v)) * dt


def gaussian_logpdf(x, mean, std: float, axis=None):
    """Sum of univariate normal log-densities; ``mean`` may be a Tensor."""
    if std <= 0.0:
        raise DegenerateDensityError("transition std is zero; log-density undefined")
    const = -math.log(std) - 0.5 * LOG_2PI
    if isinstance(mean, Tensor):
        z = T.mul(T.sub(x, mean), 1.0 / std)
        quad = T.mul(T.square(z), -0.5)
        n = quad.data.size if axis is None else int(np.prod(quad.shape[1:]))
        if axis is None:
            return T.add(T.sum(quad), n * const)
        return T.add(T.sum(T.reshape(quad, (quad.shape[0], -1)), axis=1), n * const)
    z = (np.asarray(x) - np.asarray(mean)) / std
    quad = -0.5 * z * z
    if axis is None:
        return float(quad.sum() + quad.size * const)
    flat = quad.reshape(quad.shape[0], -1)
    return flat.sum(axis=1) + flat.shape[1] * const


def sde_step(x_t: np.ndarray, v: np.ndarray, t: float, dt: float, sigma: float,
             eps: np.ndarray) -> tuple[np.ndarray, float]:
    """One stochastic update and the log-density of its result."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"sde_step needs 0 < t < 1, got {t}")
    if dt == 0.0:
        raise ValueError("sde_step needs a non-zero step")
    x_t, v, eps = (np.asarray(a, dtype=np.float64) for a in (x_t, v, eps))
    if eps.shape != x_t.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latent {x_t.shape}")
    mean = sde_mean(x_t, v, t, dt, sigma)
    std = sigma * math.sqrt(abs(dt))
    x_next = mean + std * eps
    return x_next, gaussian_logpdf(x_next, mean, std)


@dataclass
class Trajectory:
    times: np.ndarray                 # (T+1,) from T_MAX down to T_MIN
    latents: np.ndarray               # (T+1, M, d)
    sde_steps: tuple[int, ...]        # sorted indices k of stochastic steps t_k -> t_{k+1}
    logprobs: np.ndarray              # (len(sde_steps),)
    sigmas: np.ndarray                # (len(sde_steps),) noise scale at each stochastic step
    prompt: tw.PromptSpec
    seed: int
    stream_id: int
    a: float
    sample: np.ndarray                # (M, d) final Euler step to t = 0

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def members(self) -> list[tw.Signal]:
        return [tw.Signal(s) for s in self.sample]


def sample_batch(model: FlowModel, prompts: Sequence[tw.PromptSpec], d: int, T_steps: int,
                 sde_steps, a: float, streams: Sequence[RngStream]) -> list[Trajectory]:
    """Sample one trajectory per (prompt, stream), vectorised over the batch.

    Each trajectory draws its initial noise and SDE noise only from its own
    stream, so results do not depend on how work is grouped into batches
    beyond floating-point summation order inside BLAS.
    """
    if len(prompts) != len(streams):
        raise ValueError("need one stream per prompt")
    steps = tuple(sorted(set(int(k) for k in sde_steps)))
    for k in steps:
        if not 0 <= k < T_steps:
            raise ValueError(f"SDE step index {k} outside 0..{T_steps - 1}")
    times = time_grid(T_steps)
    cond = condition_array(prompts)
    B, M = cond.shape[:2]
    x = np.stack([band_limited_noise(s, (M,), d) for s in streams])
    latents = np.empty((T_steps + 1, B, M, d))
    latents[0] = x
    logps = np.zeros((B, len(steps)))
    sigmas = np.zeros(len(steps))
    for k in range(T_steps):
        t, dt = float(times[k]), float(times[k + 1] - times[k])
        v = velocity_np(model, x, t, cond)
        if k in steps:
            j = steps.index(k)
            sigma = noise_scale(t, a)
            sigmas[j] = sigma
            eps = np.stack([gaussian(s, (M, d)) for s in streams])
            mean = sde_mean(x, v, t, dt, sigma)
            std = sigma * math.sqrt(abs(dt))
            if std > 0.0:
                x = mean + std * eps
                logps[:, j] = gaussian_logpdf(x, mean, std, axis=1)
            else:
                # a = 0: the stochastic step collapses onto the Euler step
                x = x + v * dt
                logps[:, j] = np.nan
        else:
            x = x + v * dt
        latents[k + 1] = x
    t_end = float(times[-1])
    final = x - t_end * velocity_np(model, x, t_end, cond)
    return [
        Trajectory(times.copy(), latents[:, b].copy(), steps, logps[b].copy(), sigmas.copy(), prompts[b],
                   streams[b].seed, streams[b].stream_id, float(a), final[b].copy())
        for b in range(B)
    ]


def sample_trajectory(model: FlowModel, condition: tw.PromptSpec, d: int, T_steps: int, sde_steps,
                      a: float, stream: RngStream) -> Trajectory:
    return sample_batch(model, [condition], d, T_steps, sde_steps, a, [stream])[0]


def ode_sample(model: FlowModel, prompts: Sequence[tw.PromptSpec], d: int, T_steps: int,
               streams: Sequence[RngStream]) -> np.ndarray:
    """Deterministic evaluation samples, (B, M, d)."""
    return np.stack([tr.sample for tr in sample_batch(model, prompts, d, T_steps, (), 0.0, streams)])


def sde_logprobs(model: FlowModel, trajectories: Sequence[Trajectory],
                 tensors: dict[str, Tensor] | None = None) -> Tensor:
    """(n_traj, n_sde) log-densities of the stored stochastic transitions under ``tensors``.

    Trajectories must share their time grid and stochastic step set.
    """
    first = trajectories[0]
    cond = condition_array([tr.prompt for tr in trajectories])
    cols = []
    for j, k in enumerate(first.sde_steps):
        t, dt = float(first.times[k]), float(first.times[k + 1] - first.times[k])
        sigma = float(first.sigmas[j])
        std = sigma * math.sqrt(abs(dt))
        if std <= 0.0:
            raise DegenerateDensityError(f"stochastic step {k} has zero std (a = {first.a})")
        x_t = np.stack([tr.latents[k] for tr in trajectories])
        x_next = np.stack([tr.latents[k + 1] for tr in trajectories])
        v = velocity(model, x_t, t, cond, tensors)
        mean = sde_mean(x_t, v, t, dt, sigma)
        cols.append(T.reshape(gaussian_logpdf(x_next, mean, std, axis=1), (len(trajectories), 1)))
    if not cols:
        raise ValueError("trajectory has no stochastic steps")
    return cols[0] if len(cols) == 1 else T.concat(cols, axis=1)


def logprob_under(params: dict[str, np.ndarray], trajectory: Trajectory, model: FlowModel) -> np.ndarray:
    """Per-step log-probs of a stored trajectory under (possibly new) parameters."""
    probe = FlowModel(params, model.hidden, model.n_fourier, model.k_id, model.k_ct)
    return sde_logprobs(probe, [trajectory]).data[0]


def dump_trajectory(path, trajectory: Trajectory, model: FlowModel) -> None:
    """JSONL, one line per step: t, dt, transition mean, std, logprob (null on ODE steps)."""
    cond = condition_array([trajectory.prompt])
    with open(path, "w") as fh:
        for k in range(trajectory.n_steps):
            t, dt = float(trajectory.times[k]), float(trajectory.times[k + 1] - trajectory.times[k])
            x = trajectory.latents[k][None]
            v = velocity_np(model, x, t, cond)
            if k in trajectory.sde_steps:
                j = trajectory.sde_steps.index(k)
                sigma = float(trajectory.sigmas[j])
                mean, std, lp = sde_mean(x, v, t, dt, sigma), sigma * math.sqrt(abs(dt)), float(trajectory.logprobs[j])
            else:
                mean, std, lp = x + v * dt, 0.0, None
            rec = {"step": k, "t": t, "dt": dt, "mean": mean[0].reshape(-1).tolist(), "std": std, "logprob": lp}
            fh.write(json.dumps(rec) + "\n")
