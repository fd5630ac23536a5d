"""Evaluation metrics and exact oracles for tabular models.

The latent model pairs a representation classifier with per-action reward
vectors and partition-transition matrices, which is everything needed to
predict expected reward sequences from a start observation.  For complete
tabular models an exact block-splitting oracle produces the coarsest
partition whose blocks share one-step expected rewards and block-transition
profiles, which other components are tested against.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .approx import Classifier, predict_class
from .data import Observation, TrajectoryDataset
from .envs import TabularModel
from .lsfm import ClusterAssignment, Lsfm


@dataclass
class LatentModel:
    """Representation classifier plus latent reward/transition dynamics."""

    classifier: Classifier
    reward_vectors: np.ndarray       # (A, n)
    transition_matrices: np.ndarray  # (A, n, n)
    terminal_partition: int | None = None

    def __post_init__(self):
        A, n = self.reward_vectors.shape
        if self.transition_matrices.shape != (A, n, n):
            raise ValueError("reward/transition dimensions disagree")
        rows = self.transition_matrices.sum(axis=2)
        if np.abs(rows - 1.0).max() > 1e-9:
            raise ValueError("transition matrices must be row-stochastic")
        if self.classifier.class_count != n:
            raise ValueError("classifier classes do not match latent size")

    @property
    def partition_count(self) -> int:
        return self.reward_vectors.shape[1]


def latent_model_from_refinement(result) -> LatentModel:
    """Package a refinement result (assignment + LSFM + representation)."""
    return LatentModel(result.representation, result.lsfm.w, result.lsfm.M,
                       terminal_partition=result.assignment.terminal_partition)


def latent_model_from_tabular(model: TabularModel, labels: np.ndarray,
                              classifier: Classifier) -> LatentModel:
    """Exact latent dynamics induced by a state labeling of a tabular model.

    States sharing a label must share expected rewards and block-transition
    profiles for the result to be exact; states are weighted uniformly.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = int(labels.max()) + 1
    A = model.n_actions
    w = np.zeros((A, n))
    M = np.zeros((A, n, n))
    member = [np.flatnonzero(labels == i) for i in range(n)]
    expected = model.expected_rewards()
    for i, states in enumerate(member):
        if len(states) == 0:
            raise ValueError(f"label {i} has no states")
        for a in range(A):
            w[a, i] = expected[a, states].mean()
            mass = model.transition[a, states]  # (m, n_states)
            for j, targets in enumerate(member):
                M[a, i, j] = mass[:, targets].sum(axis=1).mean()
    terminal = None
    if model.terminal.any():
        terminal = int(labels[np.flatnonzero(model.terminal)[0]])
    return LatentModel(classifier, w, M, terminal_partition=terminal)


def predict_reward_sequence(m: LatentModel, start: Observation,
                            actions) -> np.ndarray:
    """Expected rewards along an action sequence from a start observation.

    The start is classified to a one-hot latent distribution which is then
    propagated through the latent transition matrices; the reward at step t
    is the latent expectation of the one-step reward under action a_t.
    """
    d = np.zeros(m.partition_count)
    d[predict_class(m.classifier, start, 0)] = 1.0
    out = np.empty(len(actions))
    for t, a in enumerate(actions):
        out[t] = m.reward_vectors[a] @ d
        d = m.transition_matrices[a].T @ d
    return out


def reward_sequence_error(m: LatentModel,
                          test: TrajectoryDataset) -> np.ndarray:
    """Per-trajectory mean absolute difference between predicted and actual
    rewards, using each trajectory's own action sequence."""
    errors = np.empty(len(test.trajectories))
    for ti, traj in enumerate(test.trajectories):
        actions = [s.action for s in traj]
        rewards = np.asarray([s.reward for s in traj])
        predicted = predict_reward_sequence(m, traj[0].state, actions)
        errors[ti] = np.abs(predicted - rewards).mean()
    return errors


@dataclass
class ConfusionMatrix:
    """Instance counts per (hidden label, latent partition); the last column
    counts instances masked out as spurious."""

    counts: np.ndarray  # (n_labels, n_partitions + 1)
    row_labels: list[int]

    @property
    def ignore_column(self) -> np.ndarray:
        return self.counts[:, -1]

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            parts = self.counts.shape[1] - 1
            writer.writerow(["hidden_label", *range(parts), "ignore"])
            for label, row in zip(self.row_labels, self.counts):
                writer.writerow([label, *[int(v) for v in row]])


def confusion_matrix(data: TrajectoryDataset, m: LatentModel, label_of,
                     assignment: ClusterAssignment | None = None,
                     ) -> ConfusionMatrix:
    """Cross-tabulate hidden labels against latent partitions per instance.

    With an ``assignment`` the dataset's own partition labels are used and
    ignored instances fall into the trailing ignore column; without one every
    instance is classified through the model's representation network.
    """
    hidden = np.asarray([label_of(v) for v in data.instance_values])
    if assignment is not None:
        if assignment.n_instances != data.n_instances:
            raise ValueError("assignment does not cover this dataset")
        latent = assignment.labels
        ignored = assignment.ignored
    else:
        latent = np.asarray([predict_class(m.classifier, v, 0)
                             for v in data.instance_values])
        ignored = np.zeros(data.n_instances, dtype=bool)
    row_labels = sorted(set(hidden.tolist()))
    row_of = {r: i for i, r in enumerate(row_labels)}
    counts = np.zeros((len(row_labels), m.partition_count + 1))
    for h, l, ign in zip(hidden, latent, ignored):
        col = m.partition_count if (ign or l < 0) else int(l)
        counts[row_of[int(h)], col] += 1
    return ConfusionMatrix(counts, row_labels)


# -- exact oracles ------------------------------------------------------------


def oracle_partition(model: TabularModel, eps_r: float | None = None,
                     eps_psi: float | None = None,
                     tol: float = 1e-9) -> ClusterAssignment:
    """Coarsest reward-predictive partition of a complete tabular model.

    Iterated block splitting: separate terminal from non-terminal states,
    split on exact one-step expected rewards, then repeatedly split on
    block-transition probability profiles until stable.  By default both
    splits use the strict tolerance ``tol`` so the result is an exact ground
    truth; passing ``eps_r``/``eps_psi`` relaxes the respective thresholds.
    Blocks are numbered by their smallest contained state id.
    """
    n = model.n_states
    reward_tol = tol if eps_r is None else eps_r
    trans_tol = tol if eps_psi is None else eps_psi
    labels = model.terminal.astype(np.int64)
    expected = model.expected_rewards()  # (A, n)

    def split(keys: np.ndarray, threshold: float, base: np.ndarray,
              protect_terminal: bool) -> np.ndarray:
        out = np.full(n, -1, dtype=np.int64)
        nxt = 0
        for b in sorted(set(base.tolist())):
            members = np.flatnonzero(base == b)
            if protect_terminal and model.terminal[members[0]]:
                out[members] = nxt
                nxt += 1
                continue
            leaders: list[int] = []
            for s in members:
                for leader in leaders:
                    if np.abs(keys[s] - keys[leader]).max() <= threshold:
                        out[s] = out[leader]
                        break
                else:
                    out[s] = nxt
                    nxt += 1
                    leaders.append(s)
        return out

    labels = split(expected.T, reward_tol, labels, protect_terminal=True)
    while True:
        n_blocks = int(labels.max()) + 1
        onehot = np.zeros((n, n_blocks))
        onehot[np.arange(n), labels] = 1.0
        profiles = np.einsum("asj,jb->sab", model.transition, onehot)
        profiles = profiles.reshape(n, -1)
        refined = split(profiles, trans_tol, labels, protect_terminal=True)
        if int(refined.max()) + 1 == n_blocks:
            labels = refined
            break
        labels = refined

    # renumber blocks by smallest contained state id, terminal last
    order = sorted(set(labels.tolist()),
                   key=lambda b: int(np.flatnonzero(labels == b)[0]))
    terminal_blocks = {int(labels[s]) for s in np.flatnonzero(model.terminal)}
    order = [b for b in order if b not in terminal_blocks] + \
            [b for b in order if b in terminal_blocks]
    remap = {b: i for i, b in enumerate(order)}
    final = np.asarray([remap[int(b)] for b in labels], dtype=np.int64)
    terminal = (remap[next(iter(terminal_blocks))]
                if terminal_blocks else None)
    return ClusterAssignment(final, len(order), terminal_partition=terminal)


def check_sub_clustering(c: ClusterAssignment, c_star: ClusterAssignment,
                         ) -> tuple[bool, tuple[int, int] | None]:
    """True when instances split by ``c`` are also split by ``c_star``
    (equivalently: every ``c_star`` block lies inside one ``c`` block).
    On failure returns a witness pair of instance ids."""
    if c.n_instances != c_star.n_instances:
        raise ValueError("assignments cover different instance sets")
    rep: dict[int, int] = {}
    for i in range(c.n_instances):
        if c.ignored[i] or c_star.ignored[i]:
            continue
        block = int(c_star.labels[i])
        if block not in rep:
            rep[block] = i
        elif c.labels[rep[block]] != c.labels[i]:
            return False, (rep[block], i)
    return True, None


def projection_matrix(c: ClusterAssignment,
                      c_star: ClusterAssignment) -> np.ndarray:
    """0/1 matrix mapping fine one-hots to coarse ones.

    Entry (k, l) is 1 when some instance carries coarse label k and fine
    label l; the precondition that ``c`` is coarser than ``c_star`` makes
    every column carry exactly one nonzero, so ``phi @ e_star == e_c`` for
    every instance."""
    ok, witness = check_sub_clustering(c, c_star)
    if not ok:
        raise ValueError(f"not a sub-clustering; witness instances {witness}")
    phi = np.zeros((c.partition_count, c_star.partition_count))
    for i in range(c.n_instances):
        if not (c.ignored[i] or c_star.ignored[i]):
            phi[int(c.labels[i]), int(c_star.labels[i])] = 1.0
    return phi


def write_errors_csv(errors: np.ndarray, path: str,
                     iteration: int | None = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory_id", "mean_abs_error", "iteration"])
        for ti, err in enumerate(errors):
            writer.writerow([ti, repr(float(err)),
                             "" if iteration is None else iteration])
