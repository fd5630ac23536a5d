"""Offline trajectory data: observations, transitions, datasets and CSV io.

An observation is either a discrete index (``int``) or a real-valued vector
stored as a ``tuple`` of floats so it can be hashed and compared exactly.
Every distinct observation value occurring anywhere in a dataset is one
"state instance" and receives a dataset-wide integer id in first-seen order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

Observation = int | tuple[float, ...]


def obs_kind(obs: Observation) -> str:
    """Return "discrete" for index observations, "vector" otherwise."""
    if isinstance(obs, (int, np.integer)):
        return "discrete"
    if isinstance(obs, tuple):
        return "vector"
    raise TypeError(f"unsupported observation type: {type(obs)!r}")


def obs_dim(obs: Observation) -> int:
    """Vector length, or 0 for discrete observations."""
    return 0 if obs_kind(obs) == "discrete" else len(obs)


def format_obs(obs: Observation) -> str:
    """Serialize one observation: integer id, or semicolon-joined decimals."""
    if obs_kind(obs) == "discrete":
        return str(int(obs))
    return ";".join(repr(float(v)) for v in obs)


def parse_obs(text: str) -> Observation:
    """Inverse of :func:`format_obs`; float parsing is exact round-trip."""
    if ";" in text or "." in text or "e" in text or "E" in text:
        return tuple(float(p) for p in text.split(";"))
    return int(text)


@dataclass(frozen=True)
class Transition:
    """One environment step; ``next_is_terminal`` marks the end of an episode."""

    state: Observation
    action: int
    reward: float
    next_state: Observation
    next_is_terminal: bool = False


class TrajectoryDataset:
    """A fixed set of trajectories plus an index over distinct observations.

    Within a trajectory the ``next_state`` of step t must equal the ``state``
    of step t+1 (observations are compared exactly), and only the final step
    may carry ``next_is_terminal``.  The constructor validates both and
    precomputes flat transition arrays used by the estimation code:

    - ``src_ids``, ``dst_ids``: instance ids of state / next_state
    - ``actions``, ``rewards``, ``terminal_flags``
    """

    def __init__(self, trajectories: Sequence[Sequence[Transition]],
                 action_count: int | None = None):
        self.trajectories = [list(t) for t in trajectories]
        self.state_index: dict[Observation, int] = {}
        self._validate()

        src, act, rew, dst, term = [], [], [], [], []
        for traj in self.trajectories:
            for step in traj:
                src.append(self._intern(step.state))
                dst.append(self._intern(step.next_state))
                act.append(step.action)
                rew.append(step.reward)
                term.append(step.next_is_terminal)
        self.src_ids = np.asarray(src, dtype=np.int64)
        self.actions = np.asarray(act, dtype=np.int64)
        self.rewards = np.asarray(rew, dtype=np.float64)
        self.dst_ids = np.asarray(dst, dtype=np.int64)
        self.terminal_flags = np.asarray(term, dtype=bool)

        self.instance_values: list[Observation] = [None] * len(self.state_index)
        for value, idx in self.state_index.items():
            self.instance_values[idx] = value
        self.terminal_instance_ids = frozenset(
            self.dst_ids[self.terminal_flags].tolist())
        if action_count is None:
            action_count = int(self.actions.max()) + 1 if len(self.actions) else 0
        self.action_count = action_count
        self._obs_matrix: np.ndarray | None = None

    def _intern(self, obs: Observation) -> int:
        idx = self.state_index.get(obs)
        if idx is None:
            idx = len(self.state_index)
            self.state_index[obs] = idx
        return idx

    def _validate(self) -> None:
        kinds = set()
        for ti, traj in enumerate(self.trajectories):
            if not traj:
                raise ValueError(f"trajectory {ti} is empty")
            for si, step in enumerate(traj):
                if not np.isfinite(step.reward):
                    raise ValueError(f"trajectory {ti} step {si}: non-finite reward")
                kinds.add(obs_kind(step.state))
                kinds.add(obs_kind(step.next_state))
                if si + 1 < len(traj):
                    if step.next_is_terminal:
                        raise ValueError(
                            f"trajectory {ti} step {si}: terminal before final step")
                    if step.next_state != traj[si + 1].state:
                        raise ValueError(
                            f"trajectory {ti} step {si}: broken state chaining")
        if len(kinds) > 1:
            raise ValueError("mixed discrete and vector observations in one dataset")

    @property
    def n_instances(self) -> int:
        return len(self.instance_values)

    @property
    def n_transitions(self) -> int:
        return len(self.src_ids)

    @property
    def observation_kind(self) -> str:
        return obs_kind(self.instance_values[0]) if self.instance_values else "discrete"

    def transitions(self) -> Iterator[Transition]:
        for traj in self.trajectories:
            yield from traj

    def instance_matrix(self) -> np.ndarray:
        """All vector instances stacked as one ``(n_instances, dim)`` array."""
        if self.observation_kind != "vector":
            raise ValueError("instance_matrix requires vector observations")
        if self._obs_matrix is None:
            self._obs_matrix = np.asarray(self.instance_values, dtype=np.float64)
        return self._obs_matrix


def write_dataset_csv(data: TrajectoryDataset, path: str) -> None:
    """Write one row per transition; float fields use exact ``repr`` formatting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory_id", "step", "state_repr", "action",
                         "reward", "next_state_repr", "terminal"])
        for ti, traj in enumerate(data.trajectories):
            for si, step in enumerate(traj):
                writer.writerow([ti, si, format_obs(step.state), step.action,
                                 repr(float(step.reward)),
                                 format_obs(step.next_state),
                                 int(step.next_is_terminal)])


def read_dataset_csv(path: str, action_count: int | None = None) -> TrajectoryDataset:
    by_traj: dict[int, list[tuple[int, Transition]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            step = Transition(
                state=parse_obs(row["state_repr"]),
                action=int(row["action"]),
                reward=float(row["reward"]),
                next_state=parse_obs(row["next_state_repr"]),
                next_is_terminal=bool(int(row["terminal"])),
            )
            by_traj.setdefault(int(row["trajectory_id"]), []).append(
                (int(row["step"]), step))
    trajectories = []
    for ti in sorted(by_traj):
        steps = [s for _, s in sorted(by_traj[ti], key=lambda p: p[0])]
        trajectories.append(steps)
    return TrajectoryDataset(trajectories, action_count=action_count)
