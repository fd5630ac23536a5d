"""Linear successor-feature model over a clustered dataset.

Given a cluster assignment with n partitions, the model consists of
per-action reward vectors ``w`` (mean one-step reward out of each partition),
per-action row-stochastic transition matrices ``M`` between partitions, their
action-average ``M_bar``, the discounted occupancy matrix
``F = (I - gamma * M_bar)^-1`` and per-action ``F_a = I + gamma * M_a @ F``.

Row i of ``F`` is the successor-feature vector of partition i under the
uniform-random policy, so the expected successor features of a predicted
next-partition distribution ``p`` are ``F.T @ p``.
"""
from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .approx import Classifier
from .data import Observation, TrajectoryDataset
from .envs import Environment


class EstimationWarning(UserWarning):
    """Signals (partition, action) pairs without data during estimation."""


@dataclass
class ClusterAssignment:
    """Partition index per dataset state instance; -1 marks ignored instances.

    The terminal partition (holding every instance only ever observed as a
    terminal next state) is tracked separately: it is never split, never
    filtered, and behaves as absorbing with zero reward inside the model.
    """

    labels: np.ndarray
    partition_count: int
    terminal_partition: int | None = None
    ignored: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ignored is None:
            self.ignored = self.labels < 0
        self.ignored = np.asarray(self.ignored, dtype=bool)
        if len(self.ignored) != len(self.labels):
            raise ValueError("ignored mask length mismatch")
        active = self.labels[~self.ignored]
        if len(active) and (active.min() < 0 or active.max() >= self.partition_count):
            raise ValueError("partition labels out of range")

    @property
    def n_instances(self) -> int:
        return len(self.labels)

    def active_ids(self) -> np.ndarray:
        """Ids of non-ignored instances in ascending (dataset) order."""
        return np.flatnonzero(~self.ignored)

    def non_terminal_count(self) -> int:
        n = self.partition_count
        return n - 1 if self.terminal_partition is not None else n

    def partition_sizes(self) -> np.ndarray:
        return np.bincount(self.labels[~self.ignored],
                           minlength=self.partition_count)

    def one_hot(self, ids: np.ndarray) -> np.ndarray:
        out = np.zeros((len(ids), self.partition_count))
        out[np.arange(len(ids)), self.labels[ids]] = 1.0
        return out

    def same_partition(self, other: "ClusterAssignment") -> bool:
        """True when both assign identical ignore masks and identical set
        partitions of the active instances (labels compared up to renaming)."""
        if self.n_instances != other.n_instances:
            return False
        if not np.array_equal(self.ignored, other.ignored):
            return False
        fwd: dict[int, int] = {}
        bwd: dict[int, int] = {}
        for a, b in zip(self.labels[~self.ignored], other.labels[~other.ignored]):
            a, b = int(a), int(b)
            if fwd.setdefault(a, b) != b or bwd.setdefault(b, a) != a:
                return False
        return True


@dataclass
class Lsfm:
    """Fitted linear successor-feature model (w, M, M_bar, F, F_a)."""

    gamma: float
    w: np.ndarray        # (A, n)
    M: np.ndarray        # (A, n, n)
    M_bar: np.ndarray    # (n, n)
    F: np.ndarray        # (n, n)
    F_a: np.ndarray      # (A, n, n)
    empty_reward_pairs: list = field(default_factory=list)
    selfloop_rows: list = field(default_factory=list)

    @property
    def partition_count(self) -> int:
        return self.w.shape[1]

    @property
    def action_count(self) -> int:
        return self.w.shape[0]


def _valid_transitions(data: TrajectoryDataset, c: ClusterAssignment):
    """Transition indices whose both endpoints carry an active partition."""
    if data.n_transitions == 0:
        raise ValueError("empty dataset")
    src = c.labels[data.src_ids]
    dst = c.labels[data.dst_ids]
    keep = (src >= 0) & (dst >= 0)
    return src[keep], data.actions[keep], data.rewards[keep], dst[keep]


def estimate_reward_vectors(data: TrajectoryDataset,
                            c: ClusterAssignment) -> np.ndarray:
    """Mean one-step reward per (action, source partition); empty pairs are 0.

    The terminal partition is forced to zero reward.  Pairs without any data
    are reported through an :class:`EstimationWarning`.
    """
    src, act, rew, _ = _valid_transitions(data, c)
    A, n = data.action_count, c.partition_count
    sums = np.zeros((A, n))
    counts = np.zeros((A, n))
    np.add.at(sums, (act, src), rew)
    np.add.at(counts, (act, src), 1.0)
    w = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    missing = [(int(a), int(i)) for a, i in zip(*np.nonzero(counts == 0))
               if i != c.terminal_partition]
    if missing:
        warnings.warn(f"{len(missing)} (action, partition) pairs have no "
                      "reward data; set to 0", EstimationWarning, stacklevel=2)
    if c.terminal_partition is not None:
        w[:, c.terminal_partition] = 0.0
    return w


def estimate_transition_matrices(
        data: TrajectoryDataset,
        c: ClusterAssignment) -> tuple[np.ndarray, np.ndarray]:
    """Empirical partition-to-partition matrices M_a and their mean M_bar.

    Rows without data become deterministic self-loops, which also makes the
    terminal partition absorbing.
    """
    src, act, _, dst = _valid_transitions(data, c)
    A, n = data.action_count, c.partition_count
    counts = np.zeros((A, n, n))
    np.add.at(counts, (act, src, dst), 1.0)
    row_sums = counts.sum(axis=2)
    M = np.divide(counts, row_sums[:, :, None],
                  out=np.zeros_like(counts), where=row_sums[:, :, None] > 0)
    empty = np.nonzero(row_sums == 0)
    for a, i in zip(*empty):
        M[a, i, i] = 1.0
    if c.terminal_partition is not None:
        M[:, c.terminal_partition, :] = 0.0
        M[:, c.terminal_partition, c.terminal_partition] = 1.0
    M_bar = M.mean(axis=0)
    return M, M_bar


def compute_f_matrices(M: np.ndarray,
                       gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Solve (I - gamma * M_bar) F = I and derive F_a = I + gamma * M_a F."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    M = np.asarray(M, dtype=np.float64)
    M_bar = M.mean(axis=0)
    n = M_bar.shape[0]
    F = np.linalg.solve(np.eye(n) - gamma * M_bar, np.eye(n))
    F_a = np.eye(n)[None, :, :] + gamma * (M @ F)
    return F, F_a


def build_lsfm(data: TrajectoryDataset, c: ClusterAssignment,
               gamma: float) -> Lsfm:
    """Estimate the full model from a clustered dataset.

    (partition, action) pairs without data are recorded on the result instead
    of warning: reward entries become 0 and transition rows self-loops.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EstimationWarning)
        w = estimate_reward_vectors(data, c)
        M, M_bar = estimate_transition_matrices(data, c)
    F, F_a = compute_f_matrices(M, gamma)
    counts = np.zeros((data.action_count, c.partition_count))
    src, act, _, _ = _valid_transitions(data, c)
    np.add.at(counts, (act, src), 1.0)
    missing = [(int(a), int(i)) for a, i in zip(*np.nonzero(counts == 0))
               if i != c.terminal_partition]
    return Lsfm(gamma=gamma, w=w, M=M, M_bar=M_bar, F=F, F_a=F_a,
                empty_reward_pairs=missing, selfloop_rows=missing)


def predict_sf(c: ClusterAssignment, instance_id: int, F: np.ndarray,
               classifier: Classifier, obs: Observation, action: int,
               gamma: float) -> np.ndarray:
    """Successor-feature estimate for one observed state instance and action:
    its partition one-hot plus ``gamma * F.T @ p`` for the predicted
    next-partition distribution p."""
    label = int(c.labels[instance_id])
    if label < 0:
        raise ValueError(f"instance {instance_id} is ignored")
    p = classifier.predict_proba(obs, action)
    if len(p) != c.partition_count or F.shape[0] != c.partition_count:
        raise ValueError("classifier classes do not match the partition count")
    psi = gamma * (F.T @ p)
    psi[label] += 1.0
    return psi


def predict_sf_dataset(data: TrajectoryDataset, c: ClusterAssignment,
                       F: np.ndarray, classifier: Classifier,
                       gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized SF estimates for every (active instance, action).

    Returns ``(ids, sf)`` where ``sf`` has shape (len(ids), A, n).
    """
    ids = c.active_ids()
    A, n = data.action_count, c.partition_count
    if classifier.class_count != n:
        raise ValueError("classifier classes do not match the partition count")
    states = [data.instance_values[i] for i in ids]
    sf = np.empty((len(ids), A, n))
    onehot = c.one_hot(ids)
    for a in range(A):
        probs = classifier.predict_proba_batch(states, np.full(len(ids), a))
        sf[:, a, :] = onehot + gamma * (probs @ F)
    return ids, sf


def monte_carlo_sf(env: Environment, labels: np.ndarray, state: int,
                   action: int, gamma: float, horizon: int, rollouts: int,
                   seed: int, policy=None) -> np.ndarray:
    """Monte Carlo successor features in the hidden tabular model.

    ``labels`` assigns a partition to every hidden state including the
    absorbing one; the discounted one-hot sum is truncated at ``horizon``
    (truncation bias at most ``gamma**horizon / (1 - gamma)``).  ``policy``
    maps ``(rng, hidden state array) -> action array``; None plays uniformly
    at random after the first action.
    """
    if horizon < 1 or rollouts < 1:
        raise ValueError("horizon and rollouts must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)
    model = env.tabular_model()
    n_parts = int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    states = np.full(rollouts, state, dtype=np.int64)
    actions = np.full(rollouts, action, dtype=np.int64)
    total = np.zeros((rollouts, n_parts))
    discount = 1.0
    for t in range(horizon):
        total[np.arange(rollouts), labels[states]] += discount
        discount *= gamma
        states = model.sample_next(states, actions, rng)
        if policy is None:
            actions = rng.integers(env.action_count, size=rollouts)
        else:
            actions = np.asarray(policy(rng, states), dtype=np.int64)
    return total.mean(axis=0)


# -- CSV bundle --------------------------------------------------------------


def _write_matrix(path: str, mat: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(range(mat.shape[-1])))
        for row in np.atleast_2d(mat):
            writer.writerow([repr(float(v)) for v in row])


def write_lsfm_csv(lsfm: Lsfm, out_dir: str) -> None:
    """One CSV per matrix (header row = partition indices) plus a meta file."""
    os.makedirs(out_dir, exist_ok=True)
    _write_matrix(os.path.join(out_dir, "w.csv"), lsfm.w)
    _write_matrix(os.path.join(out_dir, "M_bar.csv"), lsfm.M_bar)
    _write_matrix(os.path.join(out_dir, "F.csv"), lsfm.F)
    for a in range(lsfm.action_count):
        _write_matrix(os.path.join(out_dir, f"M_{a}.csv"), lsfm.M[a])
        _write_matrix(os.path.join(out_dir, f"F_{a}.csv"), lsfm.F_a[a])
    with open(os.path.join(out_dir, "lsfm_meta.txt"), "w") as fh:
        fh.write(f"gamma={lsfm.gamma!r}\n")
        fh.write(f"actions={lsfm.action_count}\n")
        fh.write(f"partitions={lsfm.partition_count}\n")


def _read_matrix(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.asarray([[float(v) for v in row] for row in rows[1:]])


def read_lsfm_csv(in_dir: str) -> Lsfm:
    meta = {}
    with open(os.path.join(in_dir, "lsfm_meta.txt")) as fh:
        for line in fh:
            key, val = line.strip().split("=", 1)
            meta[key] = val
    A = int(meta["actions"])
    w = _read_matrix(os.path.join(in_dir, "w.csv"))
    M = np.stack([_read_matrix(os.path.join(in_dir, f"M_{a}.csv"))
                  for a in range(A)])
    F_a = np.stack([_read_matrix(os.path.join(in_dir, f"F_{a}.csv"))
                    for a in range(A)])
    return Lsfm(gamma=float(meta["gamma"]), w=w, M=M,
                M_bar=_read_matrix(os.path.join(in_dir, "M_bar.csv")),
                F=_read_matrix(os.path.join(in_dir, "F.csv")), F_a=F_a)
