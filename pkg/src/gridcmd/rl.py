"""Multi-task PPO for the language-conditioned controller, plus the flat
full-task baselines.

Rollouts come from n_workers independent environments stepped in lockstep so
policy forwards are batched. In sub-goal mode every episode samples a fresh
layout and a random instantiable sub-goal, builds the matching sub-goal
variant of the world (binary terminal reward, 100-step cap), and conditions
the policy on the rendered instruction. Flat baselines run the full task
with the empty instruction.

The update is the clipped-surrogate objective with GAE(lambda), advantage
normalization over the whole batch, entropy bonus, and a clipped global
gradient norm.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import world
from .grammar import GO_TO_GOAL, SubGoal, render
from .models import (
    ArchConfig,
    CONTROLLER,
    ControllerNet,
    ParamStore,
    init_params,
    preprocess,
    save_checkpoint,
)
from .world import EnvConfig, instantiable_subgoals, observe, reset, step

SUBGOAL_EPISODE_CAP = 100


class NonFiniteLoss(FloatingPointError):
    """A PPO minibatch produced NaN/Inf; the update is aborted."""


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    epochs_per_update: int = 4
    minibatch_size: int = 64
    rollout_length: int = 1024
    n_workers: int = 8
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    learning_rate: float = 2.5e-4
    grad_clip_norm: float = 0.5
    total_steps: int = 1_000_000
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.clip_epsilon < 1.0):
            raise ValueError("clip_epsilon must be in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must be in (0, 1]")
        if self.rollout_length % self.n_workers != 0:
            raise ValueError("rollout_length must be divisible by n_workers")

    def to_json(self) -> dict:
        return self.__dict__.copy()


def sample_subgoal(layout: world.EnvState, rng: np.random.Generator) -> SubGoal:
    """Uniform draw over the sub-goals instantiable in this layout."""
    goals = instantiable_subgoals(layout)
    return goals[int(rng.integers(len(goals)))]


def subgoal_env_config(base: EnvConfig, g: SubGoal) -> EnvConfig:
    return replace(
        base,
        reward_mode="subgoal",
        subgoal_for_reward=g,
        max_steps=SUBGOAL_EPISODE_CAP,
    )


def compute_gae(rewards, values, dones, bootstrap_value, gamma, lam):
    """GAE(lambda) advantages and returns over one worker's transition row.

    delta_t = r_t + gamma * v_{t+1} * (1 - done_t) - v_t
    A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = len(rewards)
    if not (len(values) == len(dones) == T):
        raise ValueError("rewards/values/dones must have equal length")
    adv = np.zeros(T, dtype=np.float64)
    next_value = float(bootstrap_value)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_value * (1.0 - dones[t]) - values[t]
        acc = delta + gamma * lam * (1.0 - dones[t]) * acc
        adv[t] = acc
        next_value = values[t]
    return adv, adv + values


@dataclass
class RolloutBatch:
    planes: torch.Tensor  # [N, planes, H, W]
    tokens: torch.Tensor  # [N, T] padded with 0
    lengths: torch.Tensor  # [N]
    actions: torch.Tensor  # [N]
    logprobs: torch.Tensor  # [N] at collection parameters
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    advantages: torch.Tensor = None
    returns: torch.Tensor = None
    episodes: list = field(default_factory=list)  # (instruction text, success)

    def __len__(self) -> int:
        return self.actions.shape[0]


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    if std < 1e-8:
        return adv - adv.mean()
    return (adv - adv.mean()) / std


class _Worker:
    """One rollout environment plus its episode-fixed instruction tokens."""

    def __init__(self, index: int):
        self.index = index
        self.state = None
        self.tokens: list = []
        self.text = ""
        self.planes = None
        self.lang = None  # cached language embedding, fixed per episode
        self.ep_reward = 0.0


class EpisodeSource:
    """Controls how rollout episodes are built (multi-task vs flat)."""

    def __init__(self, base_cfg: EnvConfig, multitask: bool, rng: np.random.Generator):
        self.base_cfg = base_cfg
        self.multitask = multitask
        self.rng = rng

    def start_episode(self, worker: _Worker, net: ControllerNet) -> None:
        seed = int(self.rng.integers(1 << 48))
        if self.multitask:
            layout = reset(replace(self.base_cfg, reward_mode="sparse", subgoal_for_reward=None), seed)
            g = sample_subgoal(layout, self.rng)
            worker.state = reset(subgoal_env_config(self.base_cfg, g), seed)
            ins = render(g)
            worker.tokens, worker.text = list(ins.tokens), ins.text
        else:
            worker.state = reset(self.base_cfg, seed)
            worker.tokens, worker.text = [], ""
        worker.planes = preprocess(observe(worker.state))
        with torch.no_grad():
            tokens, lengths = _token_batch([worker.tokens])
            worker.lang = net.encode_language(tokens, lengths)[0]
        worker.ep_reward = 0.0


def _token_batch(token_lists: list) -> tuple:
    lengths = torch.tensor([len(t) for t in token_lists])
    T = max(1, int(lengths.max()))
    out = torch.zeros(len(token_lists), T, dtype=torch.long)
    for i, toks in enumerate(token_lists):
        if toks:
            out[i, : len(toks)] = torch.tensor(toks)
    return out, lengths


def _forward(net: ControllerNet, planes: torch.Tensor, tokens: torch.Tensor, lengths: torch.Tensor):
    """Policy forward that encodes each distinct instruction once.

    Instructions repeat heavily within a batch (at most 13 sentences exist);
    gradients flow through the gather, so this is exactly equivalent to
    encoding every row.
    """
    uniq, inverse = torch.unique(tokens, dim=0, return_inverse=True)
    uniq_lengths = (uniq != 0).sum(dim=1)
    lang = net.encode_language(uniq, uniq_lengths)[inverse]
    return net.heads(net.encoder(planes), lang)


def collect_rollouts(
    ctrl: ParamStore,
    cfg: PPOConfig,
    env_cfg: EnvConfig,
    source: Optional[EpisodeSource] = None,
    rng: Optional[np.random.Generator] = None,
    sampler: Optional[torch.Generator] = None,
) -> RolloutBatch:
    """Gather exactly cfg.rollout_length transitions from n_workers envs.

    With env_cfg.reward_mode == "subgoal" each episode runs the multi-task
    sub-goal regime; other reward modes run the flat full-task regime with
    the empty instruction.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if sampler is None:
        sampler = torch.Generator().manual_seed(cfg.seed)
    if source is None:
        source = EpisodeSource(env_cfg, env_cfg.reward_mode == "subgoal", rng)
    net: ControllerNet = ctrl.module
    steps_per_worker = cfg.rollout_length // cfg.n_workers
    workers = [_Worker(i) for i in range(cfg.n_workers)]
    for w in workers:
        source.start_episode(w, net)

    planes_buf, tokens_buf = [], []
    actions = torch.zeros(cfg.n_workers, steps_per_worker, dtype=torch.long)
    logprobs = torch.zeros(cfg.n_workers, steps_per_worker)
    rewards = np.zeros((cfg.n_workers, steps_per_worker))
    dones = np.zeros((cfg.n_workers, steps_per_worker))
    values = np.zeros((cfg.n_workers, steps_per_worker))
    episodes = []

    with torch.no_grad():
        for t in range(steps_per_worker):
            planes = torch.from_numpy(np.stack([w.planes for w in workers]))
            lang = torch.stack([w.lang for w in workers])
            logits, vals = net.heads(net.encoder(planes), lang)
            logp = F.log_softmax(logits, dim=-1)
            acts = torch.multinomial(logp.exp(), 1, generator=sampler).squeeze(1)
            planes_buf.append(planes)
            tokens_buf.append([list(w.tokens) for w in workers])
            actions[:, t] = acts
            logprobs[:, t] = logp.gather(1, acts.unsqueeze(1)).squeeze(1)
            values[:, t] = vals.numpy()
            for i, w in enumerate(workers):
                _, r, done, _ = step(w.state, world.Action(int(acts[i])))
                rewards[i, t] = r
                dones[i, t] = done
                w.ep_reward += r
                if done:
                    if source.multitask:
                        success = w.ep_reward > 0.0
                    else:
                        success = (w.state.agent.x, w.state.agent.y) == w.state.goal_pos
                    episodes.append((w.text, success))
                    source.start_episode(w, net)
                else:
                    w.planes = preprocess(observe(w.state))

        planes_last = torch.from_numpy(np.stack([w.planes for w in workers]))
        lang_last = torch.stack([w.lang for w in workers])
        _, bootstrap = net.heads(net.encoder(planes_last), lang_last)
        bootstrap = bootstrap.numpy()

    adv = np.zeros_like(values)
    ret = np.zeros_like(values)
    for i in range(cfg.n_workers):
        boot = 0.0 if dones[i, -1] else float(bootstrap[i])
        adv[i], ret[i] = compute_gae(
            rewards[i], values[i], dones[i], boot, cfg.gamma, cfg.gae_lambda
        )
    adv = normalize_advantages(adv.reshape(-1))

    # flatten [workers, time] -> [N] in worker-major order
    flat_tokens = [toks for t in range(steps_per_worker) for toks in tokens_buf[t]]
    order = np.arange(cfg.rollout_length).reshape(steps_per_worker, cfg.n_workers).T.reshape(-1)
    tokens_all, lengths_all = _token_batch([flat_tokens[j] for j in order])
    return RolloutBatch(
        planes=torch.cat(planes_buf)[order],
        tokens=tokens_all,
        lengths=lengths_all,
        actions=actions.reshape(-1),
        logprobs=logprobs.reshape(-1),
        rewards=rewards.reshape(-1),
        dones=dones.reshape(-1),
        values=values.reshape(-1),
        advantages=torch.from_numpy(adv.astype(np.float32)),
        returns=torch.from_numpy(ret.reshape(-1).astype(np.float32)),
        episodes=episodes,
    )


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float

    def to_json(self) -> dict:
        return self.__dict__.copy()


def ppo_losses(net: ControllerNet, batch: RolloutBatch, idx: torch.Tensor, cfg: PPOConfig):
    """Clipped-surrogate loss components on one minibatch."""
    logits, values = _forward(net, batch.planes[idx], batch.tokens[idx], batch.lengths[idx])
    logp_all = F.log_softmax(logits, dim=-1)
    logp = logp_all.gather(1, batch.actions[idx].unsqueeze(1)).squeeze(1)
    ratio = torch.exp(logp - batch.logprobs[idx])
    adv = batch.advantages[idx]
    unclipped = ratio * adv
    clipped = torch.clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * adv
    policy_loss = -torch.min(unclipped, clipped).mean()
    value_loss = F.mse_loss(values, batch.returns[idx])
    entropy = -(logp_all.exp() * logp_all).sum(dim=-1).mean()
    with torch.no_grad():
        clip_frac = float(((ratio - 1.0).abs() > cfg.clip_epsilon).float().mean())
        approx_kl = float((batch.logprobs[idx] - logp).mean())
    return policy_loss, value_loss, entropy, clip_frac, approx_kl


def ppo_update(
    ctrl: ParamStore,
    batch: RolloutBatch,
    cfg: PPOConfig,
    optimizer: Optional[torch.optim.Optimizer] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple:
    """Run epochs_per_update passes of clipped-surrogate ascent over shuffled
    minibatches. Mutates ctrl in place and returns (ctrl, UpdateStats)."""
    net: ControllerNet = ctrl.module
    if optimizer is None:
        optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    N = len(batch)
    stats = []
    for _ in range(cfg.epochs_per_update):
        perm = rng.permutation(N)
        for start in range(0, N, cfg.minibatch_size):
            idx = torch.from_numpy(perm[start : start + cfg.minibatch_size].copy())
            policy_loss, value_loss, entropy, clip_frac, kl = ppo_losses(net, batch, idx, cfg)
            loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"policy={float(policy_loss)} value={float(value_loss)} entropy={float(entropy)}"
                )
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip_norm)
            optimizer.step()
            stats.append(
                (float(policy_loss.detach()), float(value_loss.detach()), float(entropy.detach()), clip_frac, kl)
            )
    ctrl.assert_finite()
    agg = [float(np.mean([s[i] for s in stats])) for i in range(5)]
    return ctrl, UpdateStats(*agg)


def _greedy_rollouts(net: ControllerNet, states: list, langs: torch.Tensor) -> list:
    """Step independent episodes in lockstep under the greedy policy.
    Returns per-episode cumulative reward."""
    totals = [0.0] * len(states)
    with torch.no_grad():
        while True:
            active = [i for i, s in enumerate(states) if not s.done]
            if not active:
                return totals
            planes = torch.from_numpy(np.stack([preprocess(observe(states[i])) for i in active]))
            logits, _ = net.heads(net.encoder(planes), langs[active])
            acts = logits.argmax(dim=-1)
            for j, i in enumerate(active):
                _, r, _, _ = step(states[i], world.Action(int(acts[j])))
                totals[i] += r


def evaluate_subgoal_success(
    ctrl: ParamStore,
    env_cfg: EnvConfig,
    episodes_per_layout: int = 20,
    seed: int = 10_000_000,
) -> dict:
    """Greedy-policy success rate per instruction text over fresh layouts."""
    net: ControllerNet = ctrl.module
    wins: dict = {}
    totals: dict = {}
    with torch.no_grad():
        for e in range(episodes_per_layout):
            layout = reset(replace(env_cfg, reward_mode="sparse", subgoal_for_reward=None), seed + e)
            goals = instantiable_subgoals(layout)
            states = [reset(subgoal_env_config(env_cfg, g), seed + e) for g in goals]
            texts = [render(g).text for g in goals]
            tokens, lengths = _token_batch([list(render(g).tokens) for g in goals])
            langs = net.encode_language(tokens, lengths)
            rewards = _greedy_rollouts(net, states, langs)
            for text, r in zip(texts, rewards):
                wins[text] = wins.get(text, 0) + (r > 0)
                totals[text] = totals.get(text, 0) + 1
    return {text: wins[text] / totals[text] for text in totals}


def evaluate_flat_success(
    ctrl: ParamStore, env_cfg: EnvConfig, n_episodes: int = 50, seed: int = 20_000_000
) -> float:
    """Greedy full-task completion rate for a flat (empty-instruction) policy."""
    net: ControllerNet = ctrl.module
    sparse = replace(env_cfg, reward_mode="sparse", subgoal_for_reward=None)
    states = [reset(sparse, seed + e) for e in range(n_episodes)]
    with torch.no_grad():
        langs = net.encode_language(*_token_batch([[]])).repeat(n_episodes, 1)
    _greedy_rollouts(net, states, langs)
    wins = sum((s.agent.x, s.agent.y) == s.goal_pos for s in states)
    return wins / n_episodes


def _run_dir_setup(run_dir, payload: dict):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(payload, indent=1))
    return run_dir, (run_dir / "curves.jsonl").open("w")


def train_controller(
    arch: ArchConfig,
    ppo_cfg: PPOConfig,
    env_cfg: EnvConfig,
    run_dir=None,
    eval_every: int = 100_000,
    target_success: Optional[float] = None,
    checkpoint_every: int = 250_000,
    log=print,
) -> tuple:
    """Multi-task PPO loop. Returns (ParamStore, curves).

    Stops at total_steps, or earlier once a greedy evaluation puts every
    instruction's success rate at or above target_success.
    """
    ctrl = init_params(arch, CONTROLLER, ppo_cfg.seed)
    optimizer = torch.optim.Adam(ctrl.module.parameters(), lr=ppo_cfg.learning_rate)
    rng = np.random.default_rng(ppo_cfg.seed)
    sampler = torch.Generator().manual_seed(ppo_cfg.seed + 1)
    base = replace(env_cfg, reward_mode="sparse", subgoal_for_reward=None)
    source = EpisodeSource(subgoal_env_config(base, GO_TO_GOAL), True, rng)

    curves: list = []
    sink = None
    if run_dir is not None:
        run_dir, sink = _run_dir_setup(
            run_dir,
            {"kind": "controller", "arch": arch.to_json(), "ppo": ppo_cfg.to_json(), "env": base.to_json()},
        )
    recent: dict = {}
    steps = 0
    next_eval = eval_every
    next_ckpt = checkpoint_every
    t0 = time.time()
    while steps < ppo_cfg.total_steps:
        batch = collect_rollouts(ctrl, ppo_cfg, source.base_cfg, source=source, rng=rng, sampler=sampler)
        steps += len(batch)
        for text, success in batch.episodes:
            recent.setdefault(text, []).append(success)
            del recent[text][:-50]
        ctrl, stats = ppo_update(ctrl, batch, ppo_cfg, optimizer=optimizer, rng=rng)
        row = {
            "step": steps,
            "rolling_success": {k: float(np.mean(v)) for k, v in sorted(recent.items())},
            **stats.to_json(),
            "elapsed": round(time.time() - t0, 1),
        }
        if steps >= next_eval or steps >= ppo_cfg.total_steps:
            rates = evaluate_subgoal_success(ctrl, base, seed=10_000_000 + ppo_cfg.seed)
            row["eval_success"] = rates
            next_eval += eval_every
            log(f"[{steps}] eval min={min(rates.values()):.2f} " +
                " ".join(f"{k.split()[-2] if len(k.split())>2 else k}:{v:.2f}" for k, v in rates.items()))
            if target_success is not None and min(rates.values()) >= target_success:
                curves.append(row)
                if sink:
                    sink.write(json.dumps(row) + "\n")
                break
        curves.append(row)
        if sink:
            sink.write(json.dumps(row) + "\n")
            sink.flush()
        if run_dir is not None and steps >= next_ckpt:
            save_checkpoint(ctrl, Path(run_dir) / f"ckpt-{steps}")
            next_ckpt += checkpoint_every
    if run_dir is not None:
        save_checkpoint(ctrl, Path(run_dir) / "ckpt-final")
        sink.close()
    return ctrl, curves


def train_flat_baseline(
    arch: ArchConfig,
    ppo_cfg: PPOConfig,
    env_cfg: EnvConfig,
    reward_mode: str,
    run_dir=None,
    log=print,
) -> tuple:
    """Same PPO loop on the full task with the empty instruction."""
    if reward_mode not in ("sparse", "dense"):
        raise ValueError("flat baseline reward_mode must be sparse or dense")
    ctrl = init_params(arch, CONTROLLER, ppo_cfg.seed)
    optimizer = torch.optim.Adam(ctrl.module.parameters(), lr=ppo_cfg.learning_rate)
    rng = np.random.default_rng(ppo_cfg.seed)
    sampler = torch.Generator().manual_seed(ppo_cfg.seed + 1)
    base = replace(env_cfg, reward_mode=reward_mode, subgoal_for_reward=None)
    source = EpisodeSource(base, False, rng)

    curves: list = []
    sink = None
    if run_dir is not None:
        run_dir, sink = _run_dir_setup(
            run_dir,
            {"kind": f"flat-{reward_mode}", "arch": arch.to_json(), "ppo": ppo_cfg.to_json(), "env": base.to_json()},
        )
    recent: list = []
    steps = 0
    t0 = time.time()
    while steps < ppo_cfg.total_steps:
        batch = collect_rollouts(ctrl, ppo_cfg, base, source=source, rng=rng, sampler=sampler)
        steps += len(batch)
        for _, success in batch.episodes:
            recent.append(success)
        del recent[:-100]
        ctrl, stats = ppo_update(ctrl, batch, ppo_cfg, optimizer=optimizer, rng=rng)
        row = {
            "step": steps,
            "rolling_success": {"task": float(np.mean(recent)) if recent else 0.0},
            **stats.to_json(),
            "elapsed": round(time.time() - t0, 1),
        }
        curves.append(row)
        if sink:
            sink.write(json.dumps(row) + "\n")
            sink.flush()
        if steps % 200_000 < ppo_cfg.rollout_length:
            log(f"[flat-{reward_mode} {steps}] success={row['rolling_success']['task']:.2f}")
    if run_dir is not None:
        save_checkpoint(ctrl, Path(run_dir) / "ckpt-final")
        sink.close()
    return ctrl, curves
