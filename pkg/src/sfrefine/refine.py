"""Iterative partition refinement of offline trajectory data.

The pipeline starts from a terminal/non-terminal split, refines once on
predicted one-step rewards, then repeatedly on predicted successor features
until two consecutive clusterings describe the same set partition.  Each
clustering step is a deterministic leader scan *within* the existing
partitions, so partitions are only ever split, never merged.  Tiny partitions
created by prediction noise are dissolved and their instances masked out of
subsequent fits.
"""
from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .approx import (Classifier, FitConfig, LabeledSaDataset,
                     expectation_residual, fit_classifier)
from .data import TrajectoryDataset
from .lsfm import ClusterAssignment, Lsfm, build_lsfm, predict_sf_dataset


class MatchingConditionWarning(UserWarning):
    """The (gamma, eps_psi) pair is outside the range with a worst-case
    cross-partition separation guarantee; refinement may under-split."""


@dataclass(frozen=True)
class RefineConfig:
    """Thresholds, discount and per-stage classifier settings."""

    eps_r: float = 0.5
    eps_psi: float = 1.0
    gamma: float = 0.9
    max_iterations: int = 10
    spurious_fraction: float = 0.01
    reward_bin_width: float = 0.0
    reward_fit: FitConfig = field(default_factory=FitConfig)
    sf_fit: FitConfig = field(default_factory=FitConfig)
    representation_fit: FitConfig = field(default_factory=FitConfig)
    seed: int = 0

    def __post_init__(self):
        if self.eps_r <= 0 or self.eps_psi <= 0:
            raise ValueError("eps_r and eps_psi must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 <= self.spurious_fraction < 1.0:
            raise ValueError("spurious_fraction must lie in [0, 1)")
        if self.reward_bin_width < 0:
            raise ValueError("reward_bin_width must be >= 0")
        limit = (2.0 / 3.0) * (1.0 - self.gamma / (1.0 - self.gamma))
        if not (self.gamma < 0.5 and 0.0 < self.eps_psi < limit):
            warnings.warn(
                "gamma/eps_psi outside the guaranteed separation range "
                f"(needs gamma < 0.5 and 0 < eps_psi < {max(limit, 0.0):.4f}); "
                "continuing anyway", MatchingConditionWarning, stacklevel=2)


@dataclass
class TraceEntry:
    """Snapshot of one refinement stage."""

    iteration: int
    stage: str  # init | reward | sf
    partition_count: int
    non_terminal_count: int
    ignored_count: int
    max_residual: float
    wall_seconds: float
    assignment: ClusterAssignment
    notes: list[str] = field(default_factory=list)


@dataclass
class RefineResult:
    assignment: ClusterAssignment
    representation: Classifier
    lsfm: Lsfm
    trace: list[TraceEntry]
    converged: bool

    @property
    def iterations(self) -> int:
        """Number of refinement stages executed (reward + successor-feature)."""
        return sum(1 for e in self.trace if e.stage != "init")


@dataclass(frozen=True)
class RewardBinning:
    """Bin values and the reward -> bin-index mapping."""

    values: np.ndarray
    bin_width: float
    _index: dict = field(default_factory=dict, repr=False)

    def index(self, reward: float) -> int:
        if self.bin_width == 0.0:
            return self._index[float(reward)]
        return self._index[int(np.floor(reward / self.bin_width))]

    @property
    def bin_count(self) -> int:
        return len(self.values)


def bin_rewards(data: TrajectoryDataset, bin_width: float = 0.0) -> RewardBinning:
    """Group observed rewards into bins.

    Width 0 gives one bin per distinct value (bin value = the reward itself,
    so ``values[index(r)] == r`` exactly); otherwise rewards fall into
    consecutive intervals of the given width and the bin value is the
    interval midpoint.
    """
    if data.n_transitions == 0:
        raise ValueError("empty dataset")
    rewards = data.rewards
    if bin_width == 0.0:
        distinct = sorted(set(float(r) for r in rewards))
        index = {r: i for i, r in enumerate(distinct)}
        return RewardBinning(np.asarray(distinct), 0.0, index)
    raw = np.floor(rewards / bin_width).astype(np.int64)
    occupied = sorted(set(raw.tolist()))
    index = {b: i for i, b in enumerate(occupied)}
    values = np.asarray([(b + 0.5) * bin_width for b in occupied])
    return RewardBinning(values, float(bin_width), index)


def initial_clustering(data: TrajectoryDataset) -> ClusterAssignment:
    """All non-terminal instances in partition 0; terminal ones in partition 1."""
    labels = np.zeros(data.n_instances, dtype=np.int64)
    terminal = sorted(data.terminal_instance_ids)
    if not terminal:
        return ClusterAssignment(labels, 1, terminal_partition=None)
    if len(terminal) == data.n_instances:
        warnings.warn("dataset contains only terminal instances", UserWarning,
                      stacklevel=2)
        return ClusterAssignment(labels, 1, terminal_partition=0)
    labels[terminal] = 1
    return ClusterAssignment(labels, 2, terminal_partition=1)


def epsilon_cluster(keys: np.ndarray, eps: float, metric: str,
                    base: ClusterAssignment) -> ClusterAssignment:
    """Deterministic leader clustering within each base partition.

    ``keys`` has shape (n_active, A, d) aligned with the active instances in
    ascending id order.  Scanning instances in dataset order, each one joins
    the first leader of its base partition within ``eps`` (distances are
    summed over actions: absolute difference for "l1", Euclidean norm for
    "l2"); otherwise it becomes a new leader.  The terminal partition is
    never split.  Output partitions are renumbered contiguously in creation
    order with the terminal partition last.
    """
    if metric not in ("l1", "l2"):
        raise ValueError(f"unknown metric {metric!r}")
    active = base.active_ids()
    if keys.shape[0] != len(active):
        raise ValueError("one key per active instance required")
    labels = np.full(base.n_instances, -1, dtype=np.int64)
    next_label = 0
    for b in range(base.partition_count):
        if b == base.terminal_partition:
            continue
        members = np.flatnonzero(base.labels[active] == b)
        if len(members) == 0:
            continue
        leader_keys: list[np.ndarray] = []
        leader_labels: list[int] = []
        for m in members:
            key = keys[m]
            assigned = -1
            if leader_keys:
                diff = np.stack(leader_keys) - key[None]
                if metric == "l1":
                    dist = np.abs(diff).sum(axis=(1, 2))
                else:
                    dist = np.sqrt(np.square(diff).sum(axis=2)).sum(axis=1)
                hits = np.flatnonzero(dist <= eps)
                if len(hits):
                    assigned = leader_labels[hits[0]]
            if assigned < 0:
                assigned = next_label
                next_label += 1
                leader_keys.append(key)
                leader_labels.append(assigned)
            labels[active[m]] = assigned
    terminal = None
    if base.terminal_partition is not None:
        terminal = next_label
        labels[(base.labels == base.terminal_partition) & ~base.ignored] = terminal
        next_label += 1
    return ClusterAssignment(labels, next_label, terminal_partition=terminal,
                             ignored=base.ignored.copy())


def filter_spurious(c: ClusterAssignment, fraction: float) -> ClusterAssignment:
    """Dissolve partitions holding less than ``fraction`` of active instances.

    Their instances are marked ignored (excluded from fits and leader scans
    but still classified at evaluation time).  The terminal partition is
    structural and never dissolved.  Surviving partitions keep their order.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    if fraction == 0.0:
        return c
    sizes = c.partition_sizes()
    threshold = fraction * sizes.sum()
    keep = sizes >= threshold
    if c.terminal_partition is not None:
        keep[c.terminal_partition] = True
    if keep.all():
        return c
    remap = np.full(c.partition_count, -1, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    labels = np.where(c.labels >= 0, remap[c.labels], -1)
    ignored = c.ignored | (labels < 0)
    terminal = (int(remap[c.terminal_partition])
                if c.terminal_partition is not None else None)
    return ClusterAssignment(labels, int(keep.sum()), terminal_partition=terminal,
                             ignored=ignored)


def _transition_rows(data: TrajectoryDataset, labels_dst: np.ndarray,
                     class_count: int) -> LabeledSaDataset:
    """One classifier row per transition; rows touching ignored instances
    are masked out of fitting."""
    states = [data.instance_values[i] for i in data.src_ids]
    mask = (labels_dst[data.dst_ids] < 0)
    return LabeledSaDataset(states, data.actions,
                            np.maximum(labels_dst[data.dst_ids], 0),
                            class_count=class_count,
                            action_count=data.action_count, mask=mask)


def reward_refine(data: TrajectoryDataset, c0: ClusterAssignment,
                  cfg: RefineConfig) -> tuple[ClusterAssignment, Classifier, float]:
    """Split partitions by predicted one-step rewards.

    Fits a reward-bin classifier on all transitions, turns its output into a
    scalar via the bin values, and leader-clusters the per-action scalars
    with threshold ``eps_r`` (L1, summed over actions).  Returns the new
    assignment, the classifier and the worst training residual.
    """
    binning = bin_rewards(data, cfg.reward_bin_width)
    bin_labels = np.asarray([binning.index(r) for r in data.rewards])
    states = [data.instance_values[i] for i in data.src_ids]
    rows = LabeledSaDataset(states, data.actions, bin_labels,
                            class_count=binning.bin_count,
                            action_count=data.action_count)
    clf = fit_classifier(rows, cfg.reward_fit)
    residual = expectation_residual(clf, rows, class_values=binning.values)
    if residual > cfg.eps_r / 2:
        warnings.warn(f"reward fit residual {residual:.4f} exceeds eps_r/2",
                      UserWarning, stacklevel=2)

    ids = c0.active_ids()
    obs = [data.instance_values[i] for i in ids]
    keys = np.empty((len(ids), data.action_count, 1))
    for a in range(data.action_count):
        probs = clf.predict_proba_batch(obs, np.full(len(ids), a))
        keys[:, a, 0] = probs @ binning.values
    c1 = epsilon_cluster(keys, cfg.eps_r, "l1", c0)
    return c1, clf, residual


def sf_refine(data: TrajectoryDataset, c: ClusterAssignment, cfg: RefineConfig,
              warm_from: Classifier | None = None,
              ) -> tuple[ClusterAssignment, Classifier, Lsfm, float]:
    """One successor-feature refinement pass.

    Builds the linear SF model for the current assignment, fits a next-
    partition classifier, computes SF estimates for every (instance, action)
    and leader-clusters them with threshold ``eps_psi`` (L2, summed over
    actions), then dissolves spurious partitions.
    """
    lsfm = build_lsfm(data, c, cfg.gamma)
    rows = _transition_rows(data, c.labels, c.partition_count)
    src_ignored = c.labels[data.src_ids] < 0
    rows.mask |= src_ignored
    clf = fit_classifier(rows, cfg.sf_fit, warm_from=warm_from)
    residual = expectation_residual(clf, rows)
    if residual > cfg.eps_psi / 2:
        warnings.warn(f"next-partition fit residual {residual:.4f} exceeds "
                      "eps_psi/2", UserWarning, stacklevel=2)
    _, sf = predict_sf_dataset(data, c, lsfm.F, clf, cfg.gamma)
    refined = epsilon_cluster(sf, cfg.eps_psi, "l2", c)
    refined = filter_spurious(refined, cfg.spurious_fraction)
    return refined, clf, lsfm, residual


def _fit_representation(data: TrajectoryDataset, c: ClusterAssignment,
                        cfg: RefineConfig,
                        warm_from: Classifier | None = None) -> Classifier:
    """Train the final observation -> partition classifier (action-free)."""
    ids = c.active_ids()
    states = [data.instance_values[i] for i in ids]
    rows = LabeledSaDataset(states, np.zeros(len(ids), dtype=np.int64),
                            c.labels[ids], class_count=c.partition_count,
                            action_count=1)
    return fit_classifier(rows, cfg.representation_fit, warm_from=warm_from)


def refine_to_fixpoint(data: TrajectoryDataset,
                       cfg: RefineConfig) -> RefineResult:
    """Run the full pipeline until two consecutive clusterings are identical
    as set partitions (or ``max_iterations`` is reached, in which case the
    best-so-far result is returned with ``converged=False``)."""
    seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.max_iterations + 2)
    trace: list[TraceEntry] = []

    t0 = time.perf_counter()
    c = initial_clustering(data)
    trace.append(TraceEntry(0, "init", c.partition_count,
                            c.non_terminal_count(),
                            int(c.ignored.sum()), float("nan"),
                            time.perf_counter() - t0, c))

    t0 = time.perf_counter()
    reward_cfg = replace(cfg, reward_fit=replace(cfg.reward_fit,
                                                 seed=int(seeds[0])))
    c, _, residual = reward_refine(data, c, reward_cfg)
    trace.append(TraceEntry(1, "reward", c.partition_count,
                            c.non_terminal_count(),
                            int(c.ignored.sum()), residual,
                            time.perf_counter() - t0, c))

    converged = False
    sf_clf: Classifier | None = None
    lsfm: Lsfm | None = None
    for i in range(2, cfg.max_iterations + 1):
        t0 = time.perf_counter()
        sf_cfg = replace(cfg, sf_fit=replace(cfg.sf_fit, seed=int(seeds[i - 1])))
        nxt, sf_clf, lsfm, residual = sf_refine(data, c, sf_cfg,
                                                warm_from=sf_clf)
        notes = [f"selfloop rows: {len(lsfm.selfloop_rows)}"] \
            if lsfm.selfloop_rows else []
        trace.append(TraceEntry(i, "sf", nxt.partition_count,
                                nxt.non_terminal_count(),
                                int(nxt.ignored.sum()), residual,
                                time.perf_counter() - t0, nxt, notes))
        if nxt.same_partition(c):
            c = nxt
            converged = True
            break
        c = nxt
    if not converged:
        warnings.warn(f"refinement did not converge within "
                      f"{cfg.max_iterations} iterations", UserWarning,
                      stacklevel=2)

    rep_cfg = replace(cfg, representation_fit=replace(
        cfg.representation_fit, seed=int(seeds[-1])))
    representation = _fit_representation(data, c, rep_cfg, warm_from=sf_clf)
    final_lsfm = build_lsfm(data, c, cfg.gamma)
    return RefineResult(c, representation, final_lsfm, trace, converged)


def write_trace_csv(trace: list[TraceEntry], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "stage", "partition_count",
                         "ignored_count", "max_residual"])
        for e in trace:
            writer.writerow([e.iteration, e.stage, e.partition_count,
                             e.ignored_count, repr(e.max_residual)])


def write_assignment_csv(c: ClusterAssignment, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "partition", "ignored"])
        for i, (label, ign) in enumerate(zip(c.labels, c.ignored)):
            writer.writerow([i, int(label), int(ign)])
