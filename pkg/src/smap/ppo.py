"""Clipped-surrogate PPO with GAE, entropy bonus, and the path-sparsity loss.

Rollouts run over vectorized environment instances that sample train levels
on reset. Updates flatten the rollout, normalize advantages per update, and
sweep shuffled minibatches for a few epochs. The sparse agent's objective
additionally carries ``lambda_mask * (alpha - path_fraction)^2``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import envs
from .attention import TrunkConfig
from .autodiff import Tape, Tensor
from .checkpoint import save_params
from .config import ExperimentConfig, PPOConfig, save_config
from .errors import DimensionError
from .optim import Adam
from .policies import PolicyBase, make_policy
from .rng import stream

METRIC_COLUMNS = ("step", "policy_kind", "alpha", "split", "mean_return",
                  "std_return", "path_fraction", "mask_loss", "policy_loss",
                  "value_loss", "entropy")


@dataclass
class RolloutBatch:
    observations: np.ndarray      # (T, K, C, H, W)
    actions: np.ndarray           # (T, K) int
    old_log_probs: np.ndarray     # (T, K)
    values: np.ndarray            # (T, K)
    rewards: np.ndarray           # (T, K)
    dones: np.ndarray             # (T, K) float 0/1
    bootstrap_values: np.ndarray  # (K,)
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                gamma: float, lam: float,
                bootstrap_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over (T, K) arrays.

    delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
    A_t     = delta_t + gamma * lam * (1 - done_t) * A_{t+1}
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape):
        raise DimensionError(
            f"misaligned rollout arrays: {rewards.shape}, {values.shape}, {dones.shape}")
    t_len = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap_values, dtype=np.float64)
    next_adv = np.zeros_like(next_value)
    for t in range(t_len - 1, -1, -1):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        next_adv = delta + gamma * lam * not_done * next_adv
        adv[t] = next_adv
        next_value = values[t]
    returns = adv + values
    return adv, returns


class VecRunner:
    """Steps several environment instances in lockstep; resets sample a fresh
    train level from the pool."""

    def __init__(self, kind: str, level_seeds: list[int], seed: int):
        self.kind = kind
        self.level_seeds = list(level_seeds)
        self._sampler = stream(seed, "level_sampler")
        self.states = [self._fresh_state() for _ in range(0)]
        self.episode_returns: list[float] = []
        self._running: list[float] = []

    def _fresh_state(self) -> envs.EnvState:
        seed = self.level_seeds[int(self._sampler.integers(0, len(self.level_seeds)))]
        return envs.reset(envs.generate_level(self.kind, seed))

    def start(self, n_envs: int) -> None:
        self.states = [self._fresh_state() for _ in range(n_envs)]
        self._running = [0.0] * n_envs

    def observations(self) -> np.ndarray:
        return np.stack([envs.render_obs(s) for s in self.states])

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rewards = np.zeros(len(self.states))
        dones = np.zeros(len(self.states))
        for i, action in enumerate(actions):
            state, reward, done = envs.step(self.states[i], int(action))
            rewards[i] = reward
            self._running[i] += reward
            if done:
                self.episode_returns.append(self._running[i])
                self._running[i] = 0.0
                state = self._fresh_state()
            self.states[i] = state
            dones[i] = float(done)
        return rewards, dones


def collect_rollout(policy: PolicyBase, runner: VecRunner, rollout_len: int,
                    action_rng: np.random.Generator) -> RolloutBatch:
    k = len(runner.states)
    obs_buf = np.zeros((rollout_len, k) + runner.observations().shape[1:],
                       dtype=ad.get_default_dtype())
    act_buf = np.zeros((rollout_len, k), dtype=np.int64)
    logp_buf = np.zeros((rollout_len, k))
    val_buf = np.zeros((rollout_len, k))
    rew_buf = np.zeros((rollout_len, k))
    done_buf = np.zeros((rollout_len, k))
    for t in range(rollout_len):
        obs = runner.observations()
        actions, logp, values = policy.act(obs, action_rng)
        rewards, dones = runner.step(actions)
        obs_buf[t] = obs
        act_buf[t] = actions
        logp_buf[t] = logp
        val_buf[t] = values
        rew_buf[t] = rewards
        done_buf[t] = dones
    _, _, bootstrap = policy.act(runner.observations(), action_rng, greedy=True)
    return RolloutBatch(observations=obs_buf, actions=act_buf, old_log_probs=logp_buf,
                        values=val_buf, rewards=rew_buf, dones=done_buf,
                        bootstrap_values=bootstrap)


@dataclass
class UpdateStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    mask_loss: float = 0.0
    path_fraction: float = 1.0


def ppo_update(batch: RolloutBatch, policy: PolicyBase, cfg: PPOConfig,
               optimizer: Adam, update_rng: np.random.Generator) -> UpdateStats:
    """Epochs of shuffled clipped-surrogate minibatch updates on one rollout."""
    adv, returns = compute_gae(batch.rewards, batch.values, batch.dones,
                               cfg.gamma, cfg.gae_lambda, batch.bootstrap_values)
    batch.advantages, batch.returns = adv, returns
    n = adv.size
    flat_obs = batch.observations.reshape((n,) + batch.observations.shape[2:])
    flat_actions = batch.actions.reshape(n)
    flat_old_logp = batch.old_log_probs.reshape(n)
    flat_returns = returns.reshape(n)
    flat_adv = adv.reshape(n)
    if cfg.advantage_norm:
        flat_adv = (flat_adv - flat_adv.mean()) / (flat_adv.std() + 1e-8)

    dtype = ad.get_default_dtype()
    sums = UpdateStats(0.0, 0.0, 0.0, 0.0, 0.0)
    n_minibatches = 0
    uses_mask = cfg.lambda_mask > 0 and policy.kind == "sparse_masked"
    for _ in range(cfg.epochs):
        perm = update_rng.permutation(n)
        for lo in range(0, n, cfg.minibatch_size):
            idx = perm[lo:lo + cfg.minibatch_size]
            if idx.size < 2:
                continue
            mb_adv = Tensor(flat_adv[idx].astype(dtype))
            mb_ret = Tensor(flat_returns[idx].astype(dtype))
            mb_old = Tensor(flat_old_logp[idx].astype(dtype))
            with Tape() as tape:
                out = policy.evaluate_actions(flat_obs[idx], flat_actions[idx],
                                              mode="train")
                ratio = ad.exp(ad.sub(out.log_prob, mb_old))
                clipped = ad.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
                surrogate = ad.tmean(ad.minimum(ad.mul(ratio, mb_adv),
                                                ad.mul(clipped, mb_adv)))
                value_loss = ad.tmean(ad.square(ad.sub(out.value, mb_ret)))
                loss = ad.add(ad.neg(surrogate), ad.scale(value_loss, cfg.value_coef))
                loss = ad.sub(loss, ad.scale(out.entropy, cfg.entropy_coef))
                mask_term = None
                if out.path_fraction is not None:
                    dev = ad.sub(out.path_fraction, float(cfg.alpha))
                    mask_term = ad.tmean(ad.square(dev))
                    if uses_mask:
                        loss = ad.add(loss, ad.scale(mask_term, cfg.lambda_mask))
            terms = {"policy": -surrogate.item(), "value": value_loss.item(),
                     "entropy": out.entropy.item(),
                     "mask": mask_term.item() if mask_term is not None else 0.0}
            if not all(np.isfinite(v) for v in terms.values()):
                raise FloatingPointError(f"non-finite loss term during PPO update: {terms}")
            optimizer.zero_grad()
            ad.backward(tape, loss)
            optimizer.step()
            sums.policy_loss += terms["policy"]
            sums.value_loss += terms["value"]
            sums.entropy += terms["entropy"]
            sums.mask_loss += terms["mask"]
            if out.path_fraction is not None:
                sums.path_fraction += float(out.path_fraction.data.mean())
            else:
                sums.path_fraction += 1.0
            n_minibatches += 1
    if n_minibatches == 0:
        return UpdateStats()
    return UpdateStats(policy_loss=sums.policy_loss / n_minibatches,
                       value_loss=sums.value_loss / n_minibatches,
                       entropy=sums.entropy / n_minibatches,
                       mask_loss=sums.mask_loss / n_minibatches,
                       path_fraction=sums.path_fraction / n_minibatches)


def evaluate_policy(policy: PolicyBase, kind: str, seeds: list[int],
                    greedy: bool = True) -> tuple[np.ndarray, float]:
    """One greedy episode per level seed; returns (returns, mean path fraction)."""
    states = [envs.reset(envs.generate_level(kind, s)) for s in seeds]
    totals = np.zeros(len(seeds))
    alive = list(range(len(seeds)))
    frac_sum, frac_n = 0.0, 0
    rng = stream(0, "eval_actions")
    while alive:
        obs = np.stack([envs.render_obs(states[i]) for i in alive])
        out = policy.output(obs, mode="eval")
        if out.path_matrix is not None:
            fr = out.path_matrix.total.data / out.path_matrix.mu
            frac_sum += float(fr.sum())
            frac_n += fr.size
        actions = np.argmax(out.action_logits.data, axis=-1)
        still = []
        for j, i in enumerate(alive):
            state, reward, done = envs.step(states[i], int(actions[j]))
            totals[i] += reward
            states[i] = state
            if not done:
                still.append(i)
        alive = still
    mean_frac = frac_sum / frac_n if frac_n else 1.0
    return totals, mean_frac


def _format_metric(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(METRIC_COLUMNS)
        self.rows: list[dict] = []

    def write(self, **kv) -> None:
        row = [_format_metric(kv[c]) for c in METRIC_COLUMNS]
        self._writer.writerow(row)
        self._fh.flush()
        self.rows.append(dict(kv))

    def close(self) -> None:
        self._fh.close()


def train(cfg: ExperimentConfig, run_dir) -> list[dict]:
    """Full training loop; writes config copy, metrics.csv, and checkpoints."""
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ppo_cfg = cfg.ppo
    with ad.precision(cfg.precision):
        train_seeds, test_seeds = envs.make_split(cfg.env_kind, cfg.n_train_levels,
                                                  cfg.n_test_levels)
        trunk_cfg = TrunkConfig()
        policy = make_policy(cfg.policy, trunk_cfg, seed=ppo_cfg.seed)
        optimizer = Adam(list(policy.params.values()), lr=ppo_cfg.learning_rate)
        runner = VecRunner(cfg.env_kind, train_seeds, seed=ppo_cfg.seed)
        runner.start(ppo_cfg.n_envs)
        action_rng = stream(ppo_cfg.seed, "rollout_actions")
        update_rng = stream(ppo_cfg.seed, "minibatch_shuffle")

        save_config(cfg, run_dir / "config.txt")
        with open(run_dir / "params.txt", "w") as fh:
            for name, t in policy.params.items():
                fh.write(f"{name} {t.shape} {t.size}\n")
            fh.write(f"total {policy.parameter_count()}\n")

        metrics = MetricsWriter(run_dir / "metrics.csv")
        steps_per_iter = ppo_cfg.rollout_len * ppo_cfg.n_envs
        n_iters = ppo_cfg.total_timesteps // steps_per_iter
        stats = UpdateStats()

        def run_eval(step: int) -> None:
            for split, seeds in (("train", train_seeds), ("test", test_seeds)):
                returns, frac = evaluate_policy(policy, cfg.env_kind, seeds)
                metrics.write(step=step, policy_kind=cfg.policy, alpha=ppo_cfg.alpha,
                              split=split, mean_return=float(returns.mean()),
                              std_return=float(returns.std()),
                              path_fraction=float(frac),
                              mask_loss=stats.mask_loss,
                              policy_loss=stats.policy_loss,
                              value_loss=stats.value_loss, entropy=stats.entropy)

        try:
            for it in range(1, n_iters + 1):
                batch = collect_rollout(policy, runner, ppo_cfg.rollout_len, action_rng)
                stats = ppo_update(batch, policy, ppo_cfg, optimizer, update_rng)
                if it % ppo_cfg.eval_every == 0 or it == n_iters:
                    run_eval(step=it * steps_per_iter)
        finally:
            metrics.close()
        save_params(run_dir / "checkpoint.smap", policy.params)
    return metrics.rows
