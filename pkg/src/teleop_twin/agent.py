"""Horizon-selection policy, PPO/MAML machinery, and the three baselines.

The policy is a small tanh MLP with a shared trunk and two categorical
heads (control and visual horizon bins) plus a value head. Everything is
plain numpy with hand-written gradients: the surrogate's analytic gradient
is checked against central finite differences in the test suite, so no
autograd framework is needed or wanted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericalError, Stage2Timeout, VersionError
from .metrics import episode_summary
from .pipeline import PolicyAction, StepSample

STATE_DIM = 9  # 7 normalized pose axes + scaled (T_r, T_v)


@dataclass(frozen=True)
class TrainerConfig:
    """Learning hyperparameters; numeric defaults follow the evaluation setup."""

    alpha: float = 1e-3  # inner adaptation step
    beta: float = 1e-5  # meta step
    gamma: float = 0.99
    lam: float = 0.99
    clip_eps: float = 0.2
    batch_size: int = 256
    k_trajectories: int = 1
    n_tasks: int = 4
    c_value: float = 0.5
    c_entropy: float = 0.01
    delta_h_ms: int = 50
    h_max_ms: int = 1000
    hidden: int = 64
    ppo_epochs: int = 8

    @property
    def n_bins(self) -> int:
        return self.h_max_ms // self.delta_h_ms + 1

    def bin_to_ms(self, b: int) -> float:
        return float(b * self.delta_h_ms)


# ---------------------------------------------------------------------------
# parameters


def init_params(rng: np.random.Generator, cfg: TrainerConfig) -> dict:
    """He-scaled tanh MLP initialization; biases zero."""
    h, nb = cfg.hidden, cfg.n_bins

    def w(shape):
        return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)

    return {
        "W1": w((STATE_DIM, h)), "b1": np.zeros(h),
        "W2": w((h, h)), "b2": np.zeros(h),
        "Wr1": w((h, h)), "br1": np.zeros(h),
        "Wr2": w((h, nb)), "br2": np.zeros(nb),
        "Wv1": w((h, h)), "bv1": np.zeros(h),
        "Wv2": w((h, nb)), "bv2": np.zeros(nb),
        "Wval": w((h, 1)), "bval": np.zeros(1),
    }


def zero_params(cfg: TrainerConfig) -> dict:
    h, nb = cfg.hidden, cfg.n_bins
    return {
        "W1": np.zeros((STATE_DIM, h)), "b1": np.zeros(h),
        "W2": np.zeros((h, h)), "b2": np.zeros(h),
        "Wr1": np.zeros((h, h)), "br1": np.zeros(h),
        "Wr2": np.zeros((h, nb)), "br2": np.zeros(nb),
        "Wv1": np.zeros((h, h)), "bv1": np.zeros(h),
        "Wv2": np.zeros((h, nb)), "bv2": np.zeros(nb),
        "Wval": np.zeros((h, 1)), "bval": np.zeros(1),
    }


def params_axpy(params: dict, grads: dict, step: float) -> dict:
    """params + step * grads, functionally."""
    return {k: params[k] + step * grads[k] for k in params}


def params_add(a: dict, b: dict) -> dict:
    return {k: a[k] + b[k] for k in a}


# ---------------------------------------------------------------------------
# forward / loss


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def policy_forward(params: dict, states: np.ndarray):
    """Distributions over the two horizon heads plus the value estimate.

    states is (B, 9); returns (rho_r, rho_v, V, cache) with the cache used
    by the analytic backward pass.
    """
    S = np.atleast_2d(states)
    z1 = S @ params["W1"] + params["b1"]
    h1 = np.tanh(z1)
    z2 = h1 @ params["W2"] + params["b2"]
    h2 = np.tanh(z2)
    zr = h2 @ params["Wr1"] + params["br1"]
    hr = np.tanh(zr)
    lr = hr @ params["Wr2"] + params["br2"]
    zv = h2 @ params["Wv1"] + params["bv1"]
    hv = np.tanh(zv)
    lv = hv @ params["Wv2"] + params["bv2"]
    rho_r = _softmax(lr)
    rho_v = _softmax(lv)
    V = (h2 @ params["Wval"] + params["bval"])[:, 0]
    for arr in (rho_r, rho_v, V):
        if not np.all(np.isfinite(arr)):
            raise NumericalError("non-finite activations in policy forward")
    cache = (S, h1, h2, hr, hv, rho_r, rho_v, V)
    return rho_r, rho_v, V, cache


def sample_action(
    rho_r: np.ndarray, rho_v: np.ndarray, rng: np.random.Generator
) -> tuple[int, int, float, float]:
    """Independent categorical draws per head; returns bins and logprobs."""

    def draw(p):
        c = np.cumsum(p)
        u = rng.random() * c[-1]
        return int(np.searchsorted(c, u, side="right").clip(0, len(p) - 1))

    br = draw(rho_r)
    bv = draw(rho_v)
    return br, bv, float(np.log(rho_r[br])), float(np.log(rho_v[bv]))


def reward(e_v: float, e_r: float) -> float:
    """Weighted tracking errors folded with their -1 weights."""
    return -(e_v + e_r)


def gae_advantage(
    rewards: np.ndarray,
    values: np.ndarray,
    gamma: float,
    lam: float,
    last_value: float = 0.0,
    normalize: bool = True,
):
    """Generalized advantage estimation over one episode.

    Returns (advantages, returns); advantages are z-scored per batch when
    normalize is set (raw values otherwise).
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    T = len(r)
    adv = np.zeros(T)
    nxt = 0.0
    next_v = last_value
    for t in range(T - 1, -1, -1):
        delta = r[t] + gamma * next_v - v[t]
        nxt = delta + gamma * lam * nxt
        adv[t] = nxt
        next_v = v[t]
    ret = adv + v
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, ret


@dataclass
class TrajectoryBatch:
    """Flattened (s, a, logp, adv, ret) arrays for one or more episodes."""

    states: np.ndarray  # (B, 9)
    bins_r: np.ndarray  # (B,)
    bins_v: np.ndarray  # (B,)
    logp_r: np.ndarray  # (B,)
    logp_v: np.ndarray  # (B,)
    advantages: np.ndarray  # (B,)
    returns: np.ndarray  # (B,)
    task_id: str = ""

    def __len__(self) -> int:
        return len(self.states)


def build_batch(
    rollout: list[StepSample], cfg: TrainerConfig, task_id: str = ""
) -> TrajectoryBatch:
    states = np.array([s.state for s in rollout])
    rewards = np.array([s.reward for s in rollout])
    values = np.array([s.action.value for s in rollout])
    adv, ret = gae_advantage(rewards, values, cfg.gamma, cfg.lam)
    return TrajectoryBatch(
        states=states,
        bins_r=np.array([s.action.bin_r for s in rollout], dtype=int),
        bins_v=np.array([s.action.bin_v for s in rollout], dtype=int),
        logp_r=np.array([s.action.logp_r for s in rollout]),
        logp_v=np.array([s.action.logp_v for s in rollout]),
        advantages=adv,
        returns=ret,
        task_id=task_id,
    )


def merge_batches(batches: list[TrajectoryBatch]) -> TrajectoryBatch:
    return TrajectoryBatch(
        states=np.concatenate([b.states for b in batches]),
        bins_r=np.concatenate([b.bins_r for b in batches]),
        bins_v=np.concatenate([b.bins_v for b in batches]),
        logp_r=np.concatenate([b.logp_r for b in batches]),
        logp_v=np.concatenate([b.logp_v for b in batches]),
        advantages=np.concatenate([b.advantages for b in batches]),
        returns=np.concatenate([b.returns for b in batches]),
        task_id=",".join(b.task_id for b in batches),
    )


def ppo_loss(params: dict, batch: TrajectoryBatch, cfg: TrainerConfig) -> float:
    """Clipped-surrogate objective (a quantity to MAXIMIZE).

    Mean over the batch of the per-head min(ratio*A, clip(ratio)*A) summed
    over both heads, minus the value-error term, plus the entropy bonus.
    """
    return _loss_impl(params, batch, cfg, want_grad=False)[0]


def ppo_loss_and_grad(params: dict, batch: TrajectoryBatch, cfg: TrainerConfig):
    return _loss_impl(params, batch, cfg, want_grad=True)


def _head_surrogate(rho, bins, logp_old, adv, eps):
    B = len(bins)
    idx = np.arange(B)
    logp = np.log(rho[idx, bins])
    ratio = np.exp(logp - logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    surr = np.minimum(unclipped, clipped)
    # d surr / d ratio: unclipped branch -> adv; clipped branch -> adv inside
    # the clip interval, 0 at the rails
    take_unclipped = unclipped <= clipped
    inside = (ratio > 1.0 - eps) & (ratio < 1.0 + eps)
    dsurr_dratio = np.where(take_unclipped, adv, np.where(inside, adv, 0.0))
    dsurr_dlogp = dsurr_dratio * ratio
    ent = -np.sum(rho * np.log(rho + 1e-300), axis=1)
    return logp, surr, dsurr_dlogp, ent


def _loss_impl(params: dict, batch: TrajectoryBatch, cfg: TrainerConfig, want_grad: bool):
    rho_r, rho_v, V, cache = policy_forward(params, batch.states)
    S, h1, h2, hr, hv, _, _, _ = cache
    B = len(batch)
    adv = batch.advantages
    _, surr_r, dlp_r, ent_r = _head_surrogate(
        rho_r, batch.bins_r, batch.logp_r, adv, cfg.clip_eps
    )
    _, surr_v, dlp_v, ent_v = _head_surrogate(
        rho_v, batch.bins_v, batch.logp_v, adv, cfg.clip_eps
    )
    value_err = V - batch.returns
    J = float(
        np.mean(surr_r + surr_v)
        - cfg.c_value * np.mean(value_err**2)
        + cfg.c_entropy * np.mean(ent_r + ent_v)
    )
    if not want_grad:
        return J, None

    idx = np.arange(B)

    def head_logit_grad(rho, bins, dlp, ent):
        onehot = np.zeros_like(rho)
        onehot[idx, bins] = 1.0
        g = (dlp / B)[:, None] * (onehot - rho)
        g += (cfg.c_entropy / B) * (-rho * (np.log(rho + 1e-300) + ent[:, None]))
        return g

    g_lr = head_logit_grad(rho_r, batch.bins_r, dlp_r, ent_r)
    g_lv = head_logit_grad(rho_v, batch.bins_v, dlp_v, ent_v)
    g_V = -cfg.c_value * 2.0 * value_err / B

    grads = {}
    # control head
    grads["Wr2"] = hr.T @ g_lr
    grads["br2"] = g_lr.sum(axis=0)
    g_hr = (g_lr @ params["Wr2"].T) * (1.0 - hr * hr)
    grads["Wr1"] = h2.T @ g_hr
    grads["br1"] = g_hr.sum(axis=0)
    # visual head
    grads["Wv2"] = hv.T @ g_lv
    grads["bv2"] = g_lv.sum(axis=0)
    g_hv = (g_lv @ params["Wv2"].T) * (1.0 - hv * hv)
    grads["Wv1"] = h2.T @ g_hv
    grads["bv1"] = g_hv.sum(axis=0)
    # value head
    grads["Wval"] = h2.T @ g_V[:, None]
    grads["bval"] = np.array([g_V.sum()])
    # trunk
    g_h2 = (
        g_hr @ params["Wr1"].T
        + g_hv @ params["Wv1"].T
        + g_V[:, None] @ params["Wval"].T
    ) * (1.0 - h2 * h2)
    grads["W2"] = h1.T @ g_h2
    grads["b2"] = g_h2.sum(axis=0)
    g_h1 = (g_h2 @ params["W2"].T) * (1.0 - h1 * h1)
    grads["W1"] = S.T @ g_h1
    grads["b1"] = g_h1.sum(axis=0)
    return J, grads


def inner_adapt(params: dict, batch: TrajectoryBatch, alpha: float, cfg: TrainerConfig) -> dict:
    """One ascent step on the surrogate: theta_n = theta - alpha * grad(-J)."""
    _, grads = ppo_loss_and_grad(params, batch, cfg)
    return params_axpy(params, grads, alpha)


def meta_update(
    params: dict,
    eval_grads: list[dict],
    beta: float,
) -> dict:
    """First-order meta step: theta' = theta - beta * grad(sum_n -J_n(theta_n)).

    eval_grads are the surrogate gradients evaluated at each task's adapted
    parameters (the inner step is treated as constant).
    """
    total = eval_grads[0]
    for g in eval_grads[1:]:
        total = params_add(total, g)
    return params_axpy(params, total, beta)


# ---------------------------------------------------------------------------
# policies


class AgentPolicy:
    """Network-backed policy; mode 'sample' explores, 'greedy' takes the mode."""

    kind = "agent"

    def __init__(self, params: dict, cfg: TrainerConfig, mode: str = "sample"):
        self.params = params
        self.cfg = cfg
        self.mode = mode

    def act(self, state: np.ndarray, rng: np.random.Generator) -> PolicyAction:
        rho_r, rho_v, V, _ = policy_forward(self.params, state[None, :])
        if self.mode == "greedy":
            br = int(np.argmax(rho_r[0]))
            bv = int(np.argmax(rho_v[0]))
            lp_r = float(np.log(rho_r[0, br]))
            lp_v = float(np.log(rho_v[0, bv]))
        else:
            br, bv, lp_r, lp_v = sample_action(rho_r[0], rho_v[0], rng)
        return PolicyAction(
            h_r_ms=self.cfg.bin_to_ms(br),
            h_v_ms=self.cfg.bin_to_ms(bv),
            bin_r=br,
            bin_v=bv,
            logp_r=lp_r,
            logp_v=lp_v,
            value=float(V[0]),
        )


class WpPolicy:
    """No prediction: poses pass through unmodified."""

    kind = "wp"

    def act(self, state: np.ndarray, rng: np.random.Generator) -> PolicyAction:
        return PolicyAction(h_r_ms=0.0, h_v_ms=0.0)


class RsPolicy:
    """Horizons sampled uniformly over [0, H_max] each decision."""

    kind = "rs"

    def __init__(self, h_max_ms: int = 1000):
        self.h_max_ms = h_max_ms

    def act(self, state: np.ndarray, rng: np.random.Generator) -> PolicyAction:
        return PolicyAction(
            h_r_ms=float(rng.integers(0, self.h_max_ms + 1)),
            h_v_ms=float(rng.integers(0, self.h_max_ms + 1)),
        )


class OdPolicy:
    """Horizons matched to the measured E2E delays (rounded, clamped)."""

    kind = "od"

    def __init__(self, h_max_ms: int = 1000):
        self.h_max_ms = h_max_ms

    def act(self, state: np.ndarray, rng: np.random.Generator) -> PolicyAction:
        t_r = state[7] * self.h_max_ms
        t_v = state[8] * self.h_max_ms
        return PolicyAction(
            h_r_ms=float(np.clip(round(t_r), 0, self.h_max_ms)),
            h_v_ms=float(np.clip(round(t_v), 0, self.h_max_ms)),
        )


def baseline(kind: str, h_max_ms: int = 1000):
    if kind == "wp":
        return WpPolicy()
    if kind == "rs":
        return RsPolicy(h_max_ms)
    if kind == "od":
        return OdPolicy(h_max_ms)
    raise ValueError(f"unknown baseline {kind!r}")


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_SCHEMA = "teleop-twin-policy-v1"


def save_checkpoint(path, params: dict, cfg: TrainerConfig, extra: dict | None = None) -> None:
    blob = {
        "schema": CHECKPOINT_SCHEMA,
        "trainer": cfg.__dict__,
        "params": {k: v.tolist() for k, v in params.items()},
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_checkpoint(path) -> tuple[dict, TrainerConfig, dict]:
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("schema") != CHECKPOINT_SCHEMA:
        raise VersionError(f"unknown checkpoint schema {blob.get('schema')!r}")
    cfg = TrainerConfig(**blob["trainer"])
    params = {k: np.array(v) for k, v in blob["params"].items()}
    ref = zero_params(cfg)
    if set(params) != set(ref) or any(params[k].shape != ref[k].shape for k in ref):
        raise VersionError("checkpoint parameter shapes do not match config")
    return params, cfg, blob.get("extra", {})


# ---------------------------------------------------------------------------
# two-stage training


@dataclass
class TrainLog:
    """Per-episode curve rows: (episode, mean_reward, e_v, e_r, T_r, T_v)."""

    rows: list[tuple] = field(default_factory=list)

    def add(self, episode: int, rec) -> None:
        s = episode_summary(rec)
        self.rows.append(
            (
                episode,
                s["mean_reward"],
                s["e_v"],
                s["e_r"],
                s["mean_t_r_ms"],
                s["mean_t_v_ms"],
            )
        )

    def rewards(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def write_csv(self, path) -> None:
        import csv

        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "mean_reward", "e_v", "e_r", "t_r_ms", "t_v_ms"])
            for row in self.rows:
                w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])


def _minibatch(batch: TrajectoryBatch, size: int, rng: np.random.Generator) -> TrajectoryBatch:
    if len(batch) <= size:
        return batch
    idx = rng.choice(len(batch), size=size, replace=False)
    return TrajectoryBatch(
        states=batch.states[idx],
        bins_r=batch.bins_r[idx],
        bins_v=batch.bins_v[idx],
        logp_r=batch.logp_r[idx],
        logp_v=batch.logp_v[idx],
        advantages=batch.advantages[idx],
        returns=batch.returns[idx],
        task_id=batch.task_id,
    )


def run_stage1(
    env_fn,
    tasks: list,
    trainer: TrainerConfig,
    seed: int,
    episode_budget: int = 500,
    params: dict | None = None,
    checkpoint_every: int = 100,
    checkpoint_cb=None,
) -> tuple[dict, TrainLog]:
    """Meta-pretraining over scripted tasks (stage 1).

    Each meta-iteration samples every task, adapts with one inner step on a
    freshly collected batch, collects an evaluation batch under the adapted
    parameters, and applies the summed first-order meta-gradient. Collected
    batches are reused for ppo_epochs clipped cycles: the probability
    ratios against the stored behavior logprobs are exactly what the
    clipped surrogate exists to keep honest.

    env_fn(task, policy, episode_seed) must run one episode and return
    (EpisodeRecord, rollout).
    """
    master = np.random.SeedSequence(seed)
    rng = np.random.default_rng(master.spawn(1)[0])
    if params is None:
        params = init_params(rng, trainer)
    log = TrainLog()
    episode = 0
    it = 0
    while episode < episode_budget:
        adapt_batches = []
        eval_batches = []
        for ti, task in enumerate(tasks):
            pol = AgentPolicy(params, trainer, mode="sample")
            batches = []
            for k in range(trainer.k_trajectories):
                ep_seed = _episode_seed(seed, it, ti, k, 0)
                rec, roll = env_fn(task, pol, ep_seed)
                episode += 1
                log.add(episode, rec)
                batches.append(build_batch(roll, trainer, task_id=str(task)))
            adapt_batches.append(merge_batches(batches))
            adapted = inner_adapt(params, adapt_batches[-1], trainer.alpha, trainer)
            pol_n = AgentPolicy(adapted, trainer, mode="sample")
            batches = []
            for k in range(trainer.k_trajectories):
                ep_seed = _episode_seed(seed, it, ti, k, 1)
                rec, roll = env_fn(task, pol_n, ep_seed)
                episode += 1
                log.add(episode, rec)
                batches.append(build_batch(roll, trainer, task_id=str(task)))
            eval_batches.append(merge_batches(batches))
        for _ in range(trainer.ppo_epochs):
            eval_grads = []
            for ti in range(len(tasks)):
                mb = _minibatch(adapt_batches[ti], trainer.batch_size, rng)
                adapted = inner_adapt(params, mb, trainer.alpha, trainer)
                mb_eval = _minibatch(eval_batches[ti], trainer.batch_size, rng)
                _, g = ppo_loss_and_grad(adapted, mb_eval, trainer)
                eval_grads.append(g)
            params = meta_update(params, eval_grads, trainer.beta)
        it += 1
        if checkpoint_cb is not None and episode // checkpoint_every > (
            episode - 2 * trainer.n_tasks * trainer.k_trajectories
        ) // checkpoint_every:
            checkpoint_cb(params, episode)
    return params, log


def run_stage2(
    env_fn,
    task,
    trainer: TrainerConfig,
    seed: int,
    params: dict,
    episode_budget: int = 100,
    log: TrainLog | None = None,
) -> tuple[dict, TrainLog]:
    """Online adaptation on a live or held-out task (stage 2).

    The degenerate single-task case of the stage-1 loop: adapt, evaluate
    under the adapted parameters, meta-step. env_fn may raise Stage2Timeout
    when a live source starves; the exception propagates to the caller.
    """
    if log is None:
        log = TrainLog()
    master = np.random.SeedSequence([seed, 2])
    rng = np.random.default_rng(master.spawn(1)[0])
    episode = len(log.rows)
    start = episode
    it = 0
    while episode - start < episode_budget:
        pol = AgentPolicy(params, trainer, mode="sample")
        rec, roll = env_fn(task, pol, _episode_seed(seed, it, 0, 0, 0))
        episode += 1
        log.add(episode, rec)
        adapt_batch = build_batch(roll, trainer)
        adapted = inner_adapt(params, adapt_batch, trainer.alpha, trainer)
        pol_n = AgentPolicy(adapted, trainer, mode="sample")
        rec2, roll2 = env_fn(task, pol_n, _episode_seed(seed, it, 0, 0, 1))
        episode += 1
        log.add(episode, rec2)
        eval_batch = build_batch(roll2, trainer)
        for _ in range(trainer.ppo_epochs):
            mb = _minibatch(adapt_batch, trainer.batch_size, rng)
            adapted = inner_adapt(params, mb, trainer.alpha, trainer)
            mb_eval = _minibatch(eval_batch, trainer.batch_size, rng)
            _, g = ppo_loss_and_grad(adapted, mb_eval, trainer)
            params = meta_update(params, [g], trainer.beta)
        it += 1
    return params, log


def _episode_seed(seed: int, iteration: int, task_i: int, k: int, phase: int) -> int:
    ss = np.random.SeedSequence([seed, iteration, task_i, k, phase])
    return int(ss.generate_state(1)[0])
