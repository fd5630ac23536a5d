"""State-action classifiers: tabular frequencies, k-NN voting, and an MLP.

All classifiers share the same contract: ``predict_proba(obs, action)``
returns a probability vector over ``class_count`` classes that sums to one.
Unseen (state, action) pairs fall back to the uniform distribution for the
tabular and k-NN kinds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Observation, obs_kind


class FitError(ValueError):
    """Raised when a classifier cannot be fitted on the given data."""


@dataclass(frozen=True)
class FitConfig:
    """Which model to fit and its hyper-parameters (unused fields ignored)."""

    kind: str = "tabular"  # tabular | knn | mlp
    k: int = 5
    hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 0.005
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("tabular", "knn", "mlp"):
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        for name in ("k", "learning_rate", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(h <= 0 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")


class LabeledSaDataset:
    """Rows of (state, action, class label) with an optional ignore mask."""

    def __init__(self, states: Sequence[Observation], actions, labels,
                 class_count: int, action_count: int, mask=None):
        self.states = list(states)
        self.actions = np.asarray(actions, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.class_count = int(class_count)
        self.action_count = int(action_count)
        if mask is None:
            mask = np.zeros(len(self.states), dtype=bool)
        self.mask = np.asarray(mask, dtype=bool)
        if not (len(self.states) == len(self.actions) == len(self.labels)
                == len(self.mask)):
            raise ValueError("row arrays have inconsistent lengths")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= class_count):
            raise ValueError("labels out of range")
        kinds = {obs_kind(s) for s in self.states}
        if len(kinds) > 1:
            raise ValueError("mixed observation kinds")
        self.observation_kind = kinds.pop() if kinds else "discrete"

    def __len__(self) -> int:
        return len(self.states)


def _check_trainable(data: LabeledSaDataset) -> np.ndarray:
    """Validate the fit preconditions and return indices of unmasked rows."""
    keep = np.flatnonzero(~data.mask)
    if len(keep) == 0:
        raise FitError("no unmasked rows to fit on")
    kept_labels = set(data.labels[keep].tolist())
    for c in range(data.class_count):
        has_rows = bool((data.labels == c).any())
        if has_rows and c not in kept_labels:
            raise FitError(f"class {c} has zero unmasked rows")
    return keep


def _as_matrix(states: Sequence[Observation]) -> np.ndarray:
    return np.asarray(states, dtype=np.float64)


class TabularClassifier:
    """Empirical label frequencies per exact (observation value, action) key."""

    kind = "tabular"

    def __init__(self, class_count: int, action_count: int,
                 observation_kind: str, table: dict):
        self.class_count = class_count
        self.action_count = action_count
        self.observation_kind = observation_kind
        self.table = table

    @classmethod
    def fit(cls, data: LabeledSaDataset) -> "TabularClassifier":
        keep = _check_trainable(data)
        table: dict[tuple, np.ndarray] = {}
        for i in keep:
            key = (data.states[i], int(data.actions[i]))
            counts = table.get(key)
            if counts is None:
                counts = np.zeros(data.class_count)
                table[key] = counts
            counts[data.labels[i]] += 1.0
        return cls(data.class_count, data.action_count, data.observation_kind,
                   table)

    def predict_proba(self, obs: Observation, action: int) -> np.ndarray:
        if obs_kind(obs) != self.observation_kind:
            raise ValueError("observation kind does not match training data")
        counts = self.table.get((obs, int(action)))
        if counts is None:
            return np.full(self.class_count, 1.0 / self.class_count)
        return counts / counts.sum()

    def predict_proba_batch(self, states, actions) -> np.ndarray:
        out = np.empty((len(states), self.class_count))
        for i, (s, a) in enumerate(zip(states, actions)):
            out[i] = self.predict_proba(s, int(a))
        return out


class KnnClassifier:
    """Label-frequency vote among the k nearest training states per action.

    Distances are Euclidean on vector observations; exact distance ties are
    broken toward the lowest training-row id.
    """

    kind = "knn"

    def __init__(self, class_count: int, action_count: int, k: int,
                 points: dict, labels: dict, row_ids: dict):
        self.class_count = class_count
        self.action_count = action_count
        self.observation_kind = "vector"
        self.k = k
        self._points = points      # action -> (n_a, dim) array
        self._labels = labels      # action -> (n_a,) int array
        self._row_ids = row_ids    # action -> original row ids (for ties)

    @classmethod
    def fit(cls, data: LabeledSaDataset, k: int) -> "KnnClassifier":
        if data.observation_kind != "vector":
            raise FitError("knn classifiers require vector observations")
        keep = _check_trainable(data)
        mat = _as_matrix([data.states[i] for i in keep])
        actions = data.actions[keep]
        labels = data.labels[keep]
        points, lab, rows = {}, {}, {}
        for a in range(data.action_count):
            sel = np.flatnonzero(actions == a)
            points[a] = mat[sel]
            lab[a] = labels[sel]
            rows[a] = keep[sel]
        return cls(data.class_count, data.action_count, k, points, lab, rows)

    # Distance ties are resolved by adding row_id * _TIE_EPS to the squared
    # distances: exactly tied training points then rank by ascending id.
    _TIE_EPS = 1e-12
    _CHUNK = 512

    def predict_proba(self, obs: Observation, action: int) -> np.ndarray:
        if obs_kind(obs) != "vector":
            raise ValueError("observation kind does not match training data")
        return self.predict_proba_batch([obs], [action])[0]

    def predict_proba_batch(self, states, actions) -> np.ndarray:
        if len(states) and obs_kind(states[0]) != "vector":
            raise ValueError("observation kind does not match training data")
        mat = _as_matrix(states)
        actions = np.asarray(actions)
        out = np.empty((len(mat), self.class_count))
        for a in range(self.action_count):
            sel = np.flatnonzero(actions == a)
            if len(sel) == 0:
                continue
            pts = self._points[a]
            if len(pts) == 0:
                out[sel] = 1.0 / self.class_count
                continue
            k = min(self.k, len(pts))
            labels = self._labels[a]
            bias = self._row_ids[a] * self._TIE_EPS + np.square(pts).sum(axis=1)
            for start in range(0, len(sel), self._CHUNK):
                rows = sel[start:start + self._CHUNK]
                q = mat[rows]
                d2 = np.square(q).sum(axis=1)[:, None] - 2.0 * (q @ pts.T) + bias
                idx = (np.argpartition(d2, k - 1, axis=1)[:, :k]
                       if k < len(pts) else
                       np.broadcast_to(np.arange(k), (len(q), k)))
                votes = np.zeros((len(q), self.class_count))
                np.add.at(votes, (np.repeat(np.arange(len(q)), k),
                                  labels[idx].ravel()), 1.0)
                out[rows] = votes / k
        return out


class MlpClassifier:
    """Fully connected ReLU network over (observation, one-hot action) inputs,
    trained with softmax cross-entropy and Adam on shuffled mini-batches."""

    kind = "mlp"

    def __init__(self, class_count: int, action_count: int,
                 observation_kind: str, obs_dim: int, weights: list):
        self.class_count = class_count
        self.action_count = action_count
        self.observation_kind = observation_kind
        self.obs_dim = obs_dim  # one-hot width for discrete observations
        self.weights = weights  # list of (W, b) pairs

    # -- encoding ----------------------------------------------------------

    def _encode(self, states, actions) -> np.ndarray:
        n = len(states)
        feats = np.zeros((n, self.obs_dim + self.action_count))
        if self.observation_kind == "discrete":
            idx = np.asarray(states, dtype=np.int64)
            if idx.min() < 0 or idx.max() >= self.obs_dim:
                raise ValueError("discrete observation out of the trained range")
            feats[np.arange(n), idx] = 1.0
        else:
            feats[:, :self.obs_dim] = _as_matrix(states)
        feats[np.arange(n), self.obs_dim + np.asarray(actions, dtype=np.int64)] = 1.0
        return feats

    # -- forward / backward ------------------------------------------------

    @staticmethod
    def _forward(weights, x):
        acts = [x]
        for i, (W, b) in enumerate(weights):
            z = acts[-1] @ W + b
            acts.append(np.maximum(z, 0.0) if i < len(weights) - 1 else z)
        return acts

    @staticmethod
    def _softmax(z):
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    @staticmethod
    def loss_and_grads(weights, x, labels):
        """Mean cross-entropy over the batch and gradients for every layer."""
        acts = MlpClassifier._forward(weights, x)
        probs = MlpClassifier._softmax(acts[-1])
        n = len(x)
        loss = -np.log(probs[np.arange(n), labels] + 1e-300).mean()
        delta = probs
        delta[np.arange(n), labels] -= 1.0
        delta /= n
        grads = [None] * len(weights)
        for i in range(len(weights) - 1, -1, -1):
            grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
            if i > 0:
                delta = (delta @ weights[i][0].T) * (acts[i] > 0.0)
        return loss, grads

    @classmethod
    def _init_weights(cls, dims, rng):
        weights = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(d_in)
            W = rng.uniform(-bound, bound, size=(d_in, d_out))
            b = rng.uniform(-bound, bound, size=d_out)
            weights.append((W, b))
        return weights

    @classmethod
    def fit(cls, data: LabeledSaDataset, cfg: FitConfig,
            warm_from: "MlpClassifier | None" = None) -> "MlpClassifier":
        keep = _check_trainable(data)
        if data.observation_kind == "discrete":
            obs_dim = int(max(int(s) for s in data.states)) + 1
            if warm_from is not None:
                obs_dim = max(obs_dim, warm_from.obs_dim)
        else:
            obs_dim = len(data.states[0])
        model = cls(data.class_count, data.action_count, data.observation_kind,
                    obs_dim, [])
        dims = [obs_dim + data.action_count, *cfg.hidden, data.class_count]
        rng = np.random.default_rng(cfg.seed)
        weights = cls._init_weights(dims, rng)
        if warm_from is not None:
            # Re-use hidden layers from the previous fit where shapes match;
            # the output layer always starts fresh.
            for i in range(len(weights) - 1):
                if (i < len(warm_from.weights) - 1
                        and warm_from.weights[i][0].shape == weights[i][0].shape):
                    W, b = warm_from.weights[i]
                    weights[i] = (W.copy(), b.copy())

        x = model._encode([data.states[i] for i in keep], data.actions[keep])
        y = data.labels[keep]
        m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in weights]
        v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in weights]
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        t = 0
        for _ in range(cfg.epochs):
            order = rng.permutation(len(x))
            for start in range(0, len(x), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                _, grads = cls.loss_and_grads(weights, x[batch], y[batch])
                t += 1
                lr_t = cfg.learning_rate * np.sqrt(1 - beta2 ** t) / (1 - beta1 ** t)
                for i, (gW, gb) in enumerate(grads):
                    mW = beta1 * m[i][0] + (1 - beta1) * gW
                    mb = beta1 * m[i][1] + (1 - beta1) * gb
                    vW = beta2 * v[i][0] + (1 - beta2) * gW ** 2
                    vb = beta2 * v[i][1] + (1 - beta2) * gb ** 2
                    m[i], v[i] = (mW, mb), (vW, vb)
                    W, b = weights[i]
                    weights[i] = (W - lr_t * mW / (np.sqrt(vW) + eps),
                                  b - lr_t * mb / (np.sqrt(vb) + eps))
        model.weights = weights
        return model

    def predict_proba(self, obs: Observation, action: int) -> np.ndarray:
        return self.predict_proba_batch([obs], [action])[0]

    def predict_proba_batch(self, states, actions) -> np.ndarray:
        if states and obs_kind(states[0]) != self.observation_kind:
            raise ValueError("observation kind does not match training data")
        x = self._encode(states, actions)
        return self._softmax(self._forward(self.weights, x)[-1])


Classifier = TabularClassifier | KnnClassifier | MlpClassifier


def fit_classifier(data: LabeledSaDataset, cfg: FitConfig,
                   warm_from: Classifier | None = None) -> Classifier:
    """Fit the classifier kind selected by ``cfg`` on the unmasked rows."""
    if cfg.kind == "tabular":
        return TabularClassifier.fit(data)
    if cfg.kind == "knn":
        return KnnClassifier.fit(data, cfg.k)
    warm = warm_from if isinstance(warm_from, MlpClassifier) else None
    return MlpClassifier.fit(data, cfg, warm_from=warm)


def predict_distribution(clf: Classifier, obs: Observation,
                         action: int) -> np.ndarray:
    return clf.predict_proba(obs, action)


def predict_class(clf: Classifier, obs: Observation, action: int) -> int:
    """Argmax of the predicted distribution, ties toward the lowest index."""
    return int(np.argmax(clf.predict_proba(obs, action)))


def expectation_residual(clf: Classifier, data: LabeledSaDataset,
                         class_values: np.ndarray | None = None) -> float:
    """Worst training-row gap between predicted expectation and target.

    With ``class_values`` the gap is ``|values . p - values[label]|`` (scalar
    targets); without it the L2 distance between the predicted distribution
    and the one-hot target is used.
    """
    keep = np.flatnonzero(~data.mask)
    if len(keep) == 0:
        return 0.0
    probs = clf.predict_proba_batch([data.states[i] for i in keep],
                                    data.actions[keep])
    labels = data.labels[keep]
    if class_values is not None:
        values = np.asarray(class_values, dtype=np.float64)
        return float(np.abs(probs @ values - values[labels]).max())
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    return float(np.sqrt(np.square(probs - onehot).sum(axis=1)).max())


# -- serialization ----------------------------------------------------------

BLOB_FORMAT = 1


def classifier_to_blob(clf: Classifier) -> str:
    """Serialize to a versioned JSON blob with exact float round-trip."""
    head = {"format": BLOB_FORMAT, "kind": clf.kind,
            "class_count": clf.class_count, "action_count": clf.action_count,
            "observation_kind": clf.observation_kind}
    if isinstance(clf, TabularClassifier):
        rows = []
        for (obs, action), counts in clf.table.items():
            key = obs if isinstance(obs, int) else list(obs)
            rows.append([key, action, counts.tolist()])
        head["table"] = rows
    elif isinstance(clf, KnnClassifier):
        head["k"] = clf.k
        head["per_action"] = [
            {"points": clf._points[a].tolist(),
             "labels": clf._labels[a].tolist(),
             "row_ids": clf._row_ids[a].tolist()}
            for a in range(clf.action_count)]
    else:
        head["obs_dim"] = clf.obs_dim
        head["weights"] = [[W.tolist(), b.tolist()] for W, b in clf.weights]
    return json.dumps(head, sort_keys=True)


def classifier_from_blob(blob: str) -> Classifier:
    head = json.loads(blob)
    if head.get("format") != BLOB_FORMAT:
        raise ValueError(f"unsupported classifier blob format {head.get('format')}")
    kind = head["kind"]
    if kind == "tabular":
        table = {}
        for key, action, counts in head["table"]:
            obs = key if isinstance(key, int) else tuple(float(v) for v in key)
            table[(obs, int(action))] = np.asarray(counts, dtype=np.float64)
        return TabularClassifier(head["class_count"], head["action_count"],
                                 head["observation_kind"], table)
    if kind == "knn":
        points, labels, rows = {}, {}, {}
        for a, entry in enumerate(head["per_action"]):
            pts = np.asarray(entry["points"], dtype=np.float64)
            points[a] = pts.reshape(len(entry["labels"]), -1) if len(
                entry["labels"]) else pts.reshape(0, 0)
            labels[a] = np.asarray(entry["labels"], dtype=np.int64)
            rows[a] = np.asarray(entry["row_ids"], dtype=np.int64)
        return KnnClassifier(head["class_count"], head["action_count"],
                             head["k"], points, labels, rows)
    if kind == "mlp":
        weights = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64))
                   for W, b in head["weights"]]
        return MlpClassifier(head["class_count"], head["action_count"],
                             head["observation_kind"], head["obs_dim"], weights)
    raise ValueError(f"unknown classifier kind {kind!r}")
