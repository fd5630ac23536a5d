"""Linear/tabular Q-learning agents differing only in their representation.

Three variants support controlled transfer comparisons: "scratch" learns a
zero-initialized linear Q head over raw observation features, "pretrained-
init" starts the same head from parameters learned on a training task, and
"reward-predictive" keeps a frozen observation -> partition classifier and
learns the head over partition one-hots only.  Action selection is
epsilon-greedy with the greedy probability ramping linearly from 0 to 1 over
a configured number of episodes.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .approx import Classifier, predict_class
from .data import obs_kind
from .envs import Environment, EnvSpec, make_env, sample_trajectories
from .refine import RefineConfig, refine_to_fixpoint

AGENT_KINDS = ("scratch", "pretrained-init", "reward-predictive")


class AgentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    kind: str = "scratch"
    learning_rate: float = 1e-3
    episodes: int = 100
    explore_episodes: int = 10   # greedy-probability ramp length
    discount: float = 0.9
    seed: int = 0
    max_steps_per_episode: int = 500
    representation: Classifier | None = None
    initial_theta: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise AgentConfigError(f"unknown agent kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise AgentConfigError("learning_rate must be positive")
        if self.explore_episodes > self.episodes:
            raise AgentConfigError("explore_episodes cannot exceed episodes")
        if self.kind == "reward-predictive" and self.representation is None:
            raise AgentConfigError(
                "reward-predictive agents require a frozen representation")
        if self.kind == "pretrained-init" and self.initial_theta is None:
            raise AgentConfigError(
                "pretrained-init agents require initial value parameters")


@dataclass
class LearningCurve:
    steps: np.ndarray
    total_reward: np.ndarray

    @property
    def reward_per_step(self) -> np.ndarray:
        return self.total_reward / np.maximum(self.steps, 1)


def _feature_fn(env: Environment, cfg: AgentConfig):
    """Observation featurizer and its dimension for the chosen agent kind."""
    if cfg.kind == "reward-predictive":
        rep = cfg.representation
        dim = rep.class_count

        def features(obs):
            x = np.zeros(dim)
            x[predict_class(rep, obs, 0)] = 1.0
            return x
        return features, dim

    probe = env.observe(env.absorbing_state, np.random.default_rng(0))
    if obs_kind(probe) == "discrete":
        dim = env.n_ground + 1

        def features(obs):
            x = np.zeros(dim)
            x[int(obs)] = 1.0
            return x
        return features, dim

    dim = len(probe)

    def features(obs):
        return np.asarray(obs, dtype=np.float64)
    return features, dim


def run_agent(env: Environment,
              cfg: AgentConfig) -> tuple[LearningCurve, np.ndarray]:
    """One-step temporal-difference Q-learning over linear features.

    Returns the per-episode learning curve and the final head parameters
    ``theta`` of shape (action_count, feature_dim).  Greedy argmax ties break
    toward the lowest action index; the frozen representation of a
    reward-predictive agent is never modified.
    """
    features, dim = _feature_fn(env, cfg)
    theta = np.zeros((env.action_count, dim))
    if cfg.kind == "pretrained-init":
        if cfg.initial_theta.shape != theta.shape:
            raise AgentConfigError(
                f"initial_theta shape {cfg.initial_theta.shape} does not "
                f"match (actions, features) = {theta.shape}")
        theta = cfg.initial_theta.copy()

    rng = np.random.default_rng(cfg.seed)
    steps = np.zeros(cfg.episodes, dtype=np.int64)
    totals = np.zeros(cfg.episodes)
    for episode in range(cfg.episodes):
        if cfg.explore_episodes > 0:
            greedy_p = min(1.0, episode / cfg.explore_episodes)
        else:
            greedy_p = 1.0
        state = env.reset(rng)
        obs = env.observe(state, rng)
        x = features(obs)
        for _ in range(cfg.max_steps_per_episode):
            if rng.random() < greedy_p:
                action = int(np.argmax(theta @ x))
            else:
                action = int(rng.integers(env.action_count))
            nxt, reward, terminal = env.step_hidden(state, action, rng)
            nxt_obs = env.observe(nxt, rng)
            x_next = features(nxt_obs)
            target = reward
            if not terminal:
                target += cfg.discount * float(np.max(theta @ x_next))
            theta[action] += cfg.learning_rate * (target - theta[action] @ x) * x
            steps[episode] += 1
            totals[episode] += reward
            if terminal:
                break
            state, obs, x = nxt, nxt_obs, x_next
    return LearningCurve(steps, totals), theta


@dataclass
class TransferResult:
    """Per-episode rows and per-(task, agent, repeat) summaries."""

    episode_rows: list  # (task, agent, repeat, episode, steps, reward, rps)
    summaries: list     # (task, agent, repeat, mean reward-per-step)

    def mean_reward_per_step(self, task: str, agent: str) -> np.ndarray:
        return np.asarray([s[3] for s in self.summaries
                           if s[0] == task and s[1] == agent])


def run_transfer_suite(train_spec: EnvSpec, test_specs: Sequence[EnvSpec],
                       refine_cfg: RefineConfig, agent_cfg: AgentConfig,
                       repeats: int, n_trajectories: int = 500,
                       max_len: int = 100) -> TransferResult:
    """Refine on the training task, then compare the three agent kinds on
    every test task, once per repeat seed.

    Each repeat samples a fresh training dataset, refines it to obtain the
    frozen representation, trains a scratch agent on the training task to
    obtain pretrained head parameters, and then runs all three agents on
    each test task.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    episode_rows, summaries = [], []
    seeds = np.random.SeedSequence(agent_cfg.seed).generate_state(4 * repeats)
    for rep in range(repeats):
        data_seed, refine_seed, train_seed, test_seed = (
            int(s) for s in seeds[4 * rep:4 * rep + 4])
        train_env = make_env(train_spec)
        data = sample_trajectories(train_env, None, n_trajectories, max_len,
                                   seed=data_seed)
        result = refine_to_fixpoint(data, replace(refine_cfg, seed=refine_seed))
        _, trained_theta = run_agent(
            train_env, replace(agent_cfg, kind="scratch", seed=train_seed))

        for spec in test_specs:
            env = make_env(spec)
            task = spec.variant if spec.variant != "none" else spec.kind
            configs = {
                "scratch": replace(agent_cfg, kind="scratch", seed=test_seed),
                "pretrained-init": replace(
                    agent_cfg, kind="pretrained-init", seed=test_seed,
                    initial_theta=trained_theta),
                "reward-predictive": replace(
                    agent_cfg, kind="reward-predictive", seed=test_seed,
                    representation=result.representation),
            }
            for agent, cfg in configs.items():
                curve, _ = run_agent(env, cfg)
                rps = curve.reward_per_step
                for ep in range(cfg.episodes):
                    episode_rows.append((task, agent, rep, ep,
                                         int(curve.steps[ep]),
                                         float(curve.total_reward[ep]),
                                         float(rps[ep])))
                summaries.append((task, agent, rep, float(rps.mean())))
    return TransferResult(episode_rows, summaries)


def write_curves_csv(result: TransferResult, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "agent", "repeat", "episode", "steps",
                         "reward", "reward_per_step"])
        for row in result.episode_rows:
            writer.writerow([*row[:5], repr(row[5]), repr(row[6])])
