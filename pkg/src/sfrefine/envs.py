"""Benchmark environments with hidden tabular structure.

All three environment kinds are (block) MDPs over a finite hidden state
space.  Entering the goal region pays reward 1; the step taken *from* a goal
state then moves to a distinguished absorbing state with zero reward, and the
episode ends there.  The absorbing state emits a single constant observation
so that terminal data points form their own cluster.

Hidden states are integers ``0 .. n_ground-1`` plus ``n_ground`` for the
absorbing state.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Observation, TrajectoryDataset, Transition, obs_kind

ENV_KINDS = ("column-world", "point-column-world", "combination-lock")
VARIANTS = ("none", "swap-digits", "reversed-dial", "left-dial-broken")

Policy = Callable[[np.random.Generator, Observation], int]


class EnvSpecError(ValueError):
    """Raised when an EnvSpec is internally inconsistent; names the field."""


@dataclass(frozen=True)
class EnvSpec:
    """Declarative description of one environment instance.

    ``goal_pattern`` entries are digits or ``None`` for "any digit"; when the
    whole field is None a default pattern for the chosen variant is used.
    ``noise`` is the half-width of the uniform perturbation applied to each
    vector observation component.  ``start_column`` only applies to the
    column worlds ("left", "right" or "any").
    """

    kind: str = "column-world"
    grid_size: int = 4
    dials: int = 3
    digits: int = 10
    broken_dial: int = 2
    goal_pattern: tuple[int | None, ...] | None = None
    variant: str = "none"
    noise: float = 0.0
    start_column: str = "left"
    seed: int = 0


def _default_goal(spec: EnvSpec) -> tuple[int | None, ...]:
    top = spec.digits - 1
    if spec.variant == "left-dial-broken":
        return (None,) + (top,) * (spec.dials - 1)
    return (top,) * (spec.dials - 1) + (None,)


def _validate_lock(spec: EnvSpec) -> tuple[int | None, ...]:
    if spec.dials < 1:
        raise EnvSpecError(f"dials: must be >= 1, got {spec.dials}")
    if spec.digits < 2:
        raise EnvSpecError(f"digits: must be >= 2, got {spec.digits}")
    if spec.variant not in VARIANTS:
        raise EnvSpecError(f"variant: unknown value {spec.variant!r}")
    if spec.variant != "none" and spec.dials != 3:
        raise EnvSpecError(f"dials: variant {spec.variant!r} requires 3 dials")
    broken = 0 if spec.variant == "left-dial-broken" else spec.broken_dial
    if spec.variant == "left-dial-broken" and spec.broken_dial != 0:
        raise EnvSpecError("broken_dial: left-dial-broken variant requires 0")
    if not 0 <= broken < spec.dials:
        raise EnvSpecError(f"broken_dial: {spec.broken_dial} out of range")
    if not 0.0 <= spec.noise < 0.5:
        raise EnvSpecError(f"noise: must lie in [0, 0.5), got {spec.noise}")
    goal = spec.goal_pattern if spec.goal_pattern is not None else _default_goal(spec)
    goal = tuple(goal)
    if len(goal) != spec.dials:
        raise EnvSpecError(
            f"goal_pattern: length {len(goal)} does not match dials {spec.dials}")
    for g in goal:
        if g is not None and not 0 <= g < spec.digits:
            raise EnvSpecError(f"goal_pattern: digit {g} out of range")
    return goal


class Environment:
    """Shared interface: stateless hidden dynamics plus observation channel."""

    spec: EnvSpec
    action_count: int
    n_ground: int

    @property
    def absorbing_state(self) -> int:
        return self.n_ground

    def reset(self, rng: np.random.Generator) -> int:
        raise NotImplementedError

    def step_hidden(self, state: int, action: int,
                    rng: np.random.Generator) -> tuple[int, float, bool]:
        """Return (next_hidden, reward, next_is_terminal)."""
        raise NotImplementedError

    def observe(self, state: int, rng: np.random.Generator) -> Observation:
        raise NotImplementedError

    def ground_states(self) -> list[int]:
        return list(range(self.n_ground))

    def label_of(self, obs: Observation) -> int:
        """Hidden state behind an observation; absorbing maps to n_ground."""
        raise NotImplementedError

    def tabular_model(self) -> "TabularModel":
        raise NotImplementedError


@dataclass(frozen=True)
class TabularModel:
    """Complete hidden model: the ground states plus the absorbing state.

    ``transition[a, s, s2]`` is a probability, ``reward[a, s, s2]`` the reward
    paid on that transition, and ``terminal[s]`` flags the absorbing state.
    """

    transition: np.ndarray
    reward: np.ndarray
    terminal: np.ndarray

    @property
    def n_states(self) -> int:
        return self.transition.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[0]

    def expected_rewards(self) -> np.ndarray:
        """Per (action, state) expectation of the one-step reward."""
        return np.einsum("asj,asj->as", self.transition, self.reward)

    def sample_next(self, states: np.ndarray, actions: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
        """Vectorized categorical draw of next states for state/action arrays."""
        probs = self.transition[actions, states]
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(len(states))
        return np.minimum((u[:, None] > cdf).sum(axis=1), self.n_states - 1)


class _ColumnWorldBase(Environment):
    """4-direction grid; entering the rightmost column pays reward 1."""

    ACTIONS = ("up", "down", "left", "right")

    def __init__(self, spec: EnvSpec):
        if spec.grid_size < 2:
            raise EnvSpecError(f"grid_size: must be >= 2, got {spec.grid_size}")
        if spec.start_column not in ("left", "right", "any"):
            raise EnvSpecError(f"start_column: unknown value {spec.start_column!r}")
        self.spec = spec
        self.size = spec.grid_size
        self.action_count = 4
        self.n_ground = self.size * self.size

    def _cell(self, state: int) -> tuple[int, int]:
        return divmod(state, self.size)

    def _move(self, state: int, action: int) -> int:
        row, col = self._cell(state)
        if action == 0:
            row = max(0, row - 1)
        elif action == 1:
            row = min(self.size - 1, row + 1)
        elif action == 2:
            col = max(0, col - 1)
        elif action == 3:
            col = min(self.size - 1, col + 1)
        else:
            raise ValueError(f"action {action} out of range")
        return row * self.size + col

    def _is_goal(self, state: int) -> bool:
        return state < self.n_ground and state % self.size == self.size - 1

    def reset(self, rng: np.random.Generator) -> int:
        row = int(rng.integers(self.size))
        if self.spec.start_column == "left":
            col = 0
        elif self.spec.start_column == "right":
            col = self.size - 1
        else:
            col = int(rng.integers(self.size))
        return row * self.size + col

    def step_hidden(self, state, action, rng):
        if state == self.absorbing_state or self._is_goal(state):
            return self.absorbing_state, 0.0, True
        nxt = self._move(state, action)
        return nxt, (1.0 if self._is_goal(nxt) else 0.0), False

    def tabular_model(self) -> TabularModel:
        n = self.n_ground + 1
        P = np.zeros((self.action_count, n, n))
        R = np.zeros((self.action_count, n, n))
        for a in range(self.action_count):
            for s in range(self.n_ground):
                if self._is_goal(s):
                    P[a, s, self.absorbing_state] = 1.0
                else:
                    nxt = self._move(s, a)
                    P[a, s, nxt] = 1.0
                    if self._is_goal(nxt):
                        R[a, s, nxt] = 1.0
            P[a, self.absorbing_state, self.absorbing_state] = 1.0
        terminal = np.zeros(n, dtype=bool)
        terminal[self.absorbing_state] = True
        return TabularModel(P, R, terminal)


class ColumnWorld(_ColumnWorldBase):
    """Grid cells observed directly as discrete indices."""

    def observe(self, state, rng):
        return int(state)

    def label_of(self, obs):
        if obs_kind(obs) != "discrete":
            raise ValueError("column world emits discrete observations")
        if not 0 <= obs <= self.n_ground:
            raise ValueError(f"observation {obs} out of range")
        return int(obs)


class PointColumnWorld(_ColumnWorldBase):
    """Identical hidden grid; the agent only sees a point of the current cell.

    Points are sampled uniformly from the cell's unit square inside
    ``(0, size)^2`` with row 0 at the top, so a cell in row r, column c maps
    to x in (c, c+1) and y in (size-1-r, size-r).
    """

    def __init__(self, spec: EnvSpec):
        super().__init__(spec)
        self._absorb_obs = (-1.0, -1.0)

    def observe(self, state, rng):
        if state == self.absorbing_state:
            return self._absorb_obs
        row, col = self._cell(state)
        x = col + rng.random()
        y = (self.size - 1 - row) + rng.random()
        return (float(x), float(y))

    def label_of(self, obs):
        if obs_kind(obs) != "vector" or len(obs) != 2:
            raise ValueError("point column world emits 2-d vector observations")
        if obs == self._absorb_obs:
            return self.n_ground
        x, y = obs
        col = min(self.size - 1, max(0, int(np.floor(x))))
        row = self.size - 1 - min(self.size - 1, max(0, int(np.floor(y))))
        return row * self.size + col


class CombinationLock(Environment):
    """Dial lock: one action per dial; the broken dial spins uniformly.

    Observations concatenate one one-hot block of length ``digits`` per dial,
    each entry perturbed by uniform noise in ``[-noise, +noise]``.  A state
    matching the goal pattern (None entries are wildcards) pays reward 1 on
    entry and transitions to the absorbing state on the following step.
    """

    def __init__(self, spec: EnvSpec):
        goal = _validate_lock(spec)
        self.spec = spec
        self.goal = goal
        self.dials = spec.dials
        self.digits = spec.digits
        self.broken = 0 if spec.variant == "left-dial-broken" else spec.broken_dial
        self.action_count = spec.dials
        self.n_ground = spec.digits ** spec.dials
        self._absorb_obs = (-1.0,) * (self.dials * self.digits)

    def _encode(self, dials: tuple[int, ...]) -> int:
        state = 0
        for d in dials:
            state = state * self.digits + d
        return state

    def _decode(self, state: int) -> tuple[int, ...]:
        out = []
        for _ in range(self.dials):
            state, d = divmod(state, self.digits)
            out.append(d)
        return tuple(reversed(out))

    def _matches_goal(self, dials: tuple[int, ...]) -> bool:
        return all(g is None or g == d for g, d in zip(self.goal, dials))

    def _next_dials(self, dials: tuple[int, ...], action: int,
                    broken_value: int) -> tuple[int, ...]:
        out = list(dials)
        if self.spec.variant == "swap-digits":
            if action == 0:
                out[0], out[1] = out[1], out[0]
            elif action == 1:
                out[1] = (out[1] + 1) % self.digits
            else:
                out[self.broken] = broken_value
            return tuple(out)
        if action == self.broken:
            out[action] = broken_value
        elif self.spec.variant == "reversed-dial" and action == 1:
            out[action] = (out[action] - 1) % self.digits
        else:
            out[action] = (out[action] + 1) % self.digits
        return tuple(out)

    def reset(self, rng: np.random.Generator) -> int:
        return self._encode((0,) * self.dials)

    def step_hidden(self, state, action, rng):
        if not 0 <= action < self.action_count:
            raise ValueError(f"action {action} out of range")
        if state == self.absorbing_state or self._matches_goal(self._decode(state)):
            return self.absorbing_state, 0.0, True
        broken_value = int(rng.integers(self.digits))
        nxt = self._next_dials(self._decode(state), action, broken_value)
        return self._encode(nxt), (1.0 if self._matches_goal(nxt) else 0.0), False

    def observe(self, state, rng):
        if state == self.absorbing_state:
            return self._absorb_obs
        dials = self._decode(state)
        vec = np.zeros(self.dials * self.digits)
        for i, d in enumerate(dials):
            vec[i * self.digits + d] = 1.0
        if self.spec.noise > 0.0:
            vec += rng.uniform(-self.spec.noise, self.spec.noise, size=vec.shape)
        return tuple(float(v) for v in vec)

    def label_of(self, obs):
        if obs_kind(obs) != "vector" or len(obs) != self.dials * self.digits:
            raise ValueError("combination lock emits vector observations of "
                             f"dimension {self.dials * self.digits}")
        if obs == self._absorb_obs:
            return self.n_ground
        arr = np.asarray(obs).reshape(self.dials, self.digits)
        return self._encode(tuple(int(i) for i in arr.argmax(axis=1)))

    def tabular_model(self) -> TabularModel:
        n = self.n_ground + 1
        P = np.zeros((self.action_count, n, n))
        R = np.zeros((self.action_count, n, n))
        goal_flags = np.zeros(n, dtype=bool)
        for s in range(self.n_ground):
            goal_flags[s] = self._matches_goal(self._decode(s))
        for a in range(self.action_count):
            for s in range(self.n_ground):
                if goal_flags[s]:
                    P[a, s, self.absorbing_state] = 1.0
                    continue
                dials = self._decode(s)
                uses_broken = (a == self.broken) or (
                    self.spec.variant == "swap-digits" and a == 2)
                values = range(self.digits) if uses_broken else (0,)
                weight = 1.0 / self.digits if uses_broken else 1.0
                for v in values:
                    nxt = self._encode(self._next_dials(dials, a, v))
                    P[a, s, nxt] += weight
                    if goal_flags[nxt]:
                        R[a, s, nxt] = 1.0
            P[a, self.absorbing_state, self.absorbing_state] = 1.0
        terminal = np.zeros(n, dtype=bool)
        terminal[self.absorbing_state] = True
        return TabularModel(P, R, terminal)


def make_env(spec: EnvSpec) -> Environment:
    """Build an environment from its spec; raises EnvSpecError when invalid."""
    if spec.kind == "column-world":
        return ColumnWorld(spec)
    if spec.kind == "point-column-world":
        return PointColumnWorld(spec)
    if spec.kind == "combination-lock":
        return CombinationLock(spec)
    raise EnvSpecError(f"kind: unknown environment kind {spec.kind!r}")


def enumerate_ground_states(env: Environment) -> tuple[list[int], Callable]:
    """Hidden states of a tabular/block environment plus its labeling function.

    The labeling maps any emitted observation to its hidden state; the
    absorbing observation maps to the extra index ``len(states)``.
    """
    if not isinstance(env, Environment):
        raise TypeError(f"unsupported environment: {type(env)!r}")
    return env.ground_states(), env.label_of


def sample_trajectories(env: Environment, policy: Policy | None, count: int,
                        max_len: int, seed: int) -> TrajectoryDataset:
    """Roll out ``count`` trajectories truncated at ``max_len`` or termination.

    ``policy`` is a callable ``(rng, observation) -> action``; None selects
    actions uniformly at random.  Each trajectory runs on its own generator
    derived from ``(seed, spec.seed, trajectory index)`` so sampling is
    deterministic and order-independent.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    root = np.random.SeedSequence((seed, env.spec.seed))
    trajectories = []
    for child in root.spawn(count):
        rng = np.random.default_rng(child)
        state = env.reset(rng)
        obs = env.observe(state, rng)
        steps = []
        for _ in range(max_len):
            if policy is None:
                action = int(rng.integers(env.action_count))
            else:
                action = int(policy(rng, obs))
            nxt, reward, terminal = env.step_hidden(state, action, rng)
            nxt_obs = env.observe(nxt, rng)
            steps.append(Transition(obs, action, reward, nxt_obs, terminal))
            if terminal:
                break
            state, obs = nxt, nxt_obs
        trajectories.append(steps)
    return TrajectoryDataset(trajectories, action_count=env.action_count)
