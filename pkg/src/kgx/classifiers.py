"""Knowledge-driven classifier bank and the evaluation metric suite.

Five model kinds, all implemented here on plain numpy and wrapped in the
scikit-learn estimator protocol (``fit`` / ``predict`` / ``predict_proba``,
``get_params``). Training is deterministic given ``seed``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import DegenerateLabels, InvalidParameter, SchemaMismatch, StratificationImpossible
from .rng import SplitMix64, derive_seed

MODEL_FORMAT = "kgx-model-v1"


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class _Base(ClassifierMixin, BaseEstimator):
    """Shared label handling and optional schema-fingerprint guard."""

    def _prepare(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        classes = np.unique(y)
        if len(classes) < 2:
            raise DegenerateLabels(f"need at least two classes, got {classes.tolist()}")
        self.classes_ = classes
        self.n_features_in_ = X.shape[1]
        return X, np.searchsorted(classes, y)

    def _check(self, X, fingerprint=None):
        check_is_fitted(self, "classes_")
        expected = getattr(self, "schema_fingerprint", None)
        if fingerprint is not None and expected is not None and fingerprint != expected:
            raise SchemaMismatch(f"model expects schema {expected}, got {fingerprint}")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise SchemaMismatch(f"model expects {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def predict(self, X, fingerprint=None):
        p = self.predict_proba(X, fingerprint)
        return self.classes_[np.argmax(p, axis=1)]


def _standardize_fit(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return mu, sd


# ---------------------------------------------------------------- linear models

class SoftmaxRegression(_Base):
    """Multinomial logistic regression by full-batch gradient descent on standardized inputs."""

    def __init__(self, lam=1e-4, lr=0.1, epochs=500, seed=0, schema_fingerprint=None):
        self.lam = lam
        self.lr = lr
        self.epochs = epochs
        self.seed = seed
        self.schema_fingerprint = schema_fingerprint

    def fit(self, X, y):
        X, yi = self._prepare(X, y)
        self.mean_, self.scale_ = _standardize_fit(X)
        Z = (X - self.mean_) / self.scale_
        n, d = Z.shape
        c = len(self.classes_)
        Y = np.eye(c)[yi]
        W = np.zeros((d, c))
        b = np.zeros(c)
        for _ in range(self.epochs):
            G = (_softmax(Z @ W + b) - Y) / n
            W -= self.lr * (Z.T @ G + self.lam * W)
            b -= self.lr * G.sum(axis=0)
        self.coef_, self.intercept_ = W, b
        return self

    def decision_function(self, X, fingerprint=None):
        X = self._check(X, fingerprint)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict_proba(self, X, fingerprint=None):
        return _softmax(self.decision_function(X, fingerprint))


class LinearSVM(_Base):
    """One-vs-rest linear SVM: hinge loss, L2, seeded stochastic subgradient steps (Pegasos schedule)."""

    def __init__(self, lam=1e-3, epochs=50, seed=0, schema_fingerprint=None):
        self.lam = lam
        self.epochs = epochs
        self.seed = seed
        self.schema_fingerprint = schema_fingerprint

    def fit(self, X, y):
        X, yi = self._prepare(X, y)
        self.mean_, self.scale_ = _standardize_fit(X)
        Z = np.hstack([(X - self.mean_) / self.scale_, np.ones((len(X), 1))])
        n, d = Z.shape
        c = len(self.classes_)
        W = np.zeros((c, d))
        for k in range(c):
            t = 0
            w = np.zeros(d)
            target = np.where(yi == k, 1.0, -1.0)
            rng = SplitMix64(derive_seed(self.seed, "svm", k))
            for _ in range(self.epochs):
                for i in rng.permutation(n):
                    t += 1
                    eta = 1.0 / (self.lam * (t + 1))
                    margin = target[i] * (w @ Z[i])
                    w *= 1.0 - eta * self.lam
                    if margin < 1.0:
                        w += eta * target[i] * Z[i]
            W[k] = w
        self.coef_ = W
        return self

    def decision_function(self, X, fingerprint=None):
        X = self._check(X, fingerprint)
        Z = np.hstack([(X - self.mean_) / self.scale_, np.ones((len(X), 1))])
        return Z @ self.coef_.T

    def predict_proba(self, X, fingerprint=None):
        return _softmax(self.decision_function(X, fingerprint))


class KNearestNeighbors(_Base):
    """k-NN on standardized features; distance ties go to the smaller training
    index, vote ties to the smaller class."""

    def __init__(self, k=5, schema_fingerprint=None):
        self.k = k
        self.schema_fingerprint = schema_fingerprint

    def fit(self, X, y):
        X, yi = self._prepare(X, y)
        if self.k < 1:
            raise InvalidParameter("k must be >= 1")
        self.mean_, self.scale_ = _standardize_fit(X)
        self.train_ = (X - self.mean_) / self.scale_
        self.labels_ = yi
        return self

    def predict_proba(self, X, fingerprint=None):
        X = self._check(X, fingerprint)
        Z = (X - self.mean_) / self.scale_
        k = min(self.k, len(self.train_))
        c = len(self.classes_)
        out = np.zeros((len(Z), c))
        for i, z in enumerate(Z):
            d2 = ((self.train_ - z) ** 2).sum(axis=1)
            nn = np.argsort(d2, kind="stable")[:k]
            out[i] = np.bincount(self.labels_[nn], minlength=c) / k
        return out

    def predict(self, X, fingerprint=None):
        # argmax already returns the first (smallest) class on vote ties
        return self.classes_[np.argmax(self.predict_proba(X, fingerprint), axis=1)]


# ---------------------------------------------------------------- trees

@dataclass
class Tree:
    """Array-encoded binary tree; ``left[i] == -1`` marks a leaf."""
    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def add(self, value) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.value) - 1

    def apply(self, X: np.ndarray) -> np.ndarray:
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(len(X), dtype=np.int64)
        active = left[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, feat[nd]] <= thr[nd]
            node[idx] = np.where(go_left, left[nd], right[nd])
            active = left[node] >= 0
        return node

    def predict_value(self, X) -> np.ndarray:
        vals = np.asarray(self.value, dtype=np.float64)
        return vals[self.apply(X)]

    def to_dict(self) -> dict:
        return {"feature": list(self.feature), "threshold": [float(t) for t in self.threshold],
                "left": list(self.left), "right": list(self.right),
                "value": np.asarray(self.value, dtype=np.float64).tolist()}

    @classmethod
    def from_dict(cls, d) -> "Tree":
        return cls(list(d["feature"]), list(d["threshold"]), list(d["left"]), list(d["right"]), list(d["value"]))


def _best_split(X, idx, feats, stats, kind):
    """Best (feature, threshold, gain) over ``feats`` for the rows ``idx``.

    ``stats`` is a one-hot class matrix (kind="gini") or a residual vector
    (kind="mse"). Thresholds are midpoints between distinct sorted values;
    ties keep the first feature in ``feats`` and the smallest threshold.
    """
    n = len(idx)
    best = (None, 0.0, 0.0)
    if kind == "gini":
        S = stats[idx]
        tot = S.sum(axis=0)
        parent = n - (tot ** 2).sum() / n
    else:
        r = stats[idx]
        parent = (r ** 2).sum() - r.sum() ** 2 / n
    for f in feats:
        x = X[idx, f]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        cut = np.flatnonzero(xs[1:] > xs[:-1])       # split after position cut
        if len(cut) == 0:
            continue
        nl = (cut + 1).astype(np.float64)
        nr = n - nl
        if kind == "gini":
            cl = np.cumsum(S[order], axis=0)[cut]
            cr = tot - cl
            child = (nl - (cl ** 2).sum(axis=1) / nl) + (nr - (cr ** 2).sum(axis=1) / nr)
        else:
            rs = r[order]
            s1 = np.cumsum(rs)[cut]
            s2 = np.cumsum(rs ** 2)[cut]
            tot1, tot2 = rs.sum(), (rs ** 2).sum()
            child = (s2 - s1 ** 2 / nl) + ((tot2 - s2) - (tot1 - s1) ** 2 / nr)
        gains = parent - child
        j = int(np.argmax(gains))
        if gains[j] > best[2] + 1e-12:
            best = (f, 0.5 * (xs[cut[j]] + xs[cut[j] + 1]), float(gains[j]))
    return best


def grow_tree(X, stats, idx, max_depth, kind, leaf_value, feature_picker=None) -> Tree:
    tree = Tree()
    d = X.shape[1]

    def build(rows, depth):
        node = tree.add(leaf_value(rows))
        if depth >= max_depth or len(rows) < 2:
            return node
        if kind == "gini" and stats[rows].sum(axis=0).max() == len(rows):
            return node
        feats = feature_picker(d) if feature_picker else range(d)
        f, thr, gain = _best_split(X, rows, feats, stats, kind)
        if f is None or gain <= 0:
            return node
        mask = X[rows, f] <= thr
        tree.feature[node] = int(f)
        tree.threshold[node] = float(thr)
        tree.left[node] = build(rows[mask], depth + 1)
        tree.right[node] = build(rows[~mask], depth + 1)
        return node

    build(np.asarray(idx), 0)
    return tree


class RandomForest(_Base):
    """Bagged Gini trees with sqrt(d) candidate features per split; probabilities are vote fractions."""

    def __init__(self, n_trees=100, max_depth=8, seed=0, schema_fingerprint=None):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.seed = seed
        self.schema_fingerprint = schema_fingerprint

    def fit(self, X, y):
        X, yi = self._prepare(X, y)
        n, d = X.shape
        c = len(self.classes_)
        onehot = np.eye(c)[yi]
        m = max(1, int(math.sqrt(d)))
        self.trees_ = []
        for t in range(self.n_trees):
            rng = SplitMix64(derive_seed(self.seed, "forest", t))
            boot = rng.integers(0, n, n)

            def pick(dim, rng=rng):
                return np.sort(rng.permutation(dim)[:m])

            def leaf(rows):
                return int(np.argmax(onehot[rows].sum(axis=0)))

            self.trees_.append(grow_tree(X, onehot, boot, self.max_depth, "gini", leaf, pick))
        return self

    def predict_proba(self, X, fingerprint=None):
        X = self._check(X, fingerprint)
        c = len(self.classes_)
        votes = np.zeros((len(X), c))
        for tree in self.trees_:
            votes[np.arange(len(X)), tree.predict_value(X).astype(np.int64)] += 1
        return votes / len(self.trees_)


class GradientBoosting(_Base):
    """One-vs-rest logistic boosting with depth-limited regression trees and Newton leaf values."""

    def __init__(self, n_rounds=100, learning_rate=0.1, max_depth=3, seed=0, schema_fingerprint=None):
        self.n_rounds = n_rounds
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.seed = seed
        self.schema_fingerprint = schema_fingerprint

    def fit(self, X, y):
        X, yi = self._prepare(X, y)
        n = len(X)
        c = len(self.classes_)
        self.init_ = np.zeros(c)
        self.trees_ = [[] for _ in range(c)]
        for k in range(c):
            target = (yi == k).astype(np.float64)
            p0 = min(max(target.mean(), 1e-6), 1 - 1e-6)
            self.init_[k] = math.log(p0 / (1 - p0))
            F = np.full(n, self.init_[k])
            for _ in range(self.n_rounds):
                p = _sigmoid(F)
                resid = target - p
                hess = p * (1 - p)

                def leaf(rows, resid=resid, hess=hess):
                    h = hess[rows].sum()
                    return float(resid[rows].sum() / h) if h > 1e-12 else 0.0

                tree = grow_tree(X, resid, np.arange(n), self.max_depth, "mse", leaf)
                self.trees_[k].append(tree)
                F += self.learning_rate * tree.predict_value(X)
        return self

    def decision_function(self, X, fingerprint=None):
        X = self._check(X, fingerprint)
        F = np.tile(self.init_, (len(X), 1))
        for k, trees in enumerate(self.trees_):
            for tree in trees:
                F[:, k] += self.learning_rate * tree.predict_value(X)
        return F

    def predict_proba(self, X, fingerprint=None):
        # normalised one-vs-rest sigmoids, in log space so very negative margins cannot underflow to 0/0
        logp = -np.logaddexp(0.0, -self.decision_function(X, fingerprint))
        return _softmax(logp)


KINDS = {
    "logreg": SoftmaxRegression,
    "linear_svm": LinearSVM,
    "knn": KNearestNeighbors,
    "random_forest": RandomForest,
    "gradient_boosting": GradientBoosting,
}


def make_classifier(kind: str, **params):
    if kind not in KINDS:
        raise InvalidParameter(f"unknown classifier kind {kind!r}; expected one of {sorted(KINDS)}")
    return KINDS[kind](**params)


def train(kind: str, X, y, **params):
    return make_classifier(kind, **params).fit(X, y)


def kind_of(model) -> str:
    for name, cls in KINDS.items():
        if type(model) is cls:
            return name
    raise InvalidParameter(f"not a kgx classifier: {type(model).__name__}")


# ---------------------------------------------------------------- persistence

def model_to_dict(model) -> dict:
    check_is_fitted(model, "classes_")
    state = {"classes": model.classes_.tolist(), "n_features_in": int(model.n_features_in_)}
    for attr in ("mean_", "scale_", "coef_", "intercept_", "init_", "train_", "labels_"):
        if hasattr(model, attr):
            state[attr] = np.asarray(getattr(model, attr)).tolist()
    if isinstance(model, RandomForest):
        state["trees_"] = [t.to_dict() for t in model.trees_]
    if isinstance(model, GradientBoosting):
        state["trees_"] = [[t.to_dict() for t in ts] for ts in model.trees_]
    params = model.get_params()
    return {"format": MODEL_FORMAT, "kind": kind_of(model),
            "schema_fingerprint": params.pop("schema_fingerprint"),
            "params": params, "state": state}


def model_from_dict(d):
    if d.get("format") != MODEL_FORMAT:
        raise InvalidParameter(f"unsupported model format {d.get('format')!r}")
    model = make_classifier(d["kind"], schema_fingerprint=d["schema_fingerprint"], **d["params"])
    st = d["state"]
    model.classes_ = np.asarray(st["classes"])
    model.n_features_in_ = st["n_features_in"]
    for attr in ("mean_", "scale_", "coef_", "intercept_", "init_", "train_"):
        if attr in st:
            setattr(model, attr, np.asarray(st[attr], dtype=np.float64))
    if "labels_" in st:
        model.labels_ = np.asarray(st["labels_"], dtype=np.int64)
    if isinstance(model, RandomForest):
        model.trees_ = [Tree.from_dict(t) for t in st["trees_"]]
    if isinstance(model, GradientBoosting):
        model.trees_ = [[Tree.from_dict(t) for t in ts] for ts in st["trees_"]]
    return model


def save_model(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))


# ---------------------------------------------------------------- splitting

@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    ids: list

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = list(self.ids)
        if not (len(self.features) == len(self.labels) == len(self.ids)):
            raise InvalidParameter("features, labels and ids must have the same length")

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], [self.ids[i] for i in idx])


def split_counts(n: int, fractions, rng: SplitMix64) -> list[int]:
    """Floor allocation, then leftover units go one each to splits drawn by
    the seeded stream with probability proportional to their fractional parts."""
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r + 1e-9)) for r in raw]
    frac = [max(r - c, 0.0) for r, c in zip(raw, counts)]
    for _ in range(n - sum(counts)):
        total = sum(frac)
        if total <= 0:
            frac = [1.0 if f == 0 else f for f in fractions]
            total = sum(frac)
        u = rng.uniform() * total
        acc = 0.0
        pick = len(frac) - 1
        for i, f in enumerate(frac):
            acc += f
            if u < acc:
                pick = i
                break
        counts[pick] += 1
        frac[pick] = 0.0
    return counts


def stratified_split(labels, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Per-class proportional partition; returns sorted index arrays, one per fraction."""
    labels = np.asarray(labels)
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidParameter("fractions must be positive and sum to 1")
    parts = [[] for _ in fractions]
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < 3:
            raise StratificationImpossible(f"class {cls} has {len(members)} sample(s); need at least 3")
        rng = SplitMix64(derive_seed(seed, "split", int(cls)))
        members = members[rng.permutation(len(members))]
        counts = split_counts(len(members), fractions, rng)
        start = 0
        for p, c in zip(parts, counts):
            p.extend(members[start:start + c].tolist())
            start += c
    return [np.array(sorted(p), dtype=np.int64) for p in parts]


# ---------------------------------------------------------------- metrics

TABLE_COLUMNS = ("Val. Acc.", "Test Acc.", "Precision", "Recall", "F1-Score", "Weighted Prec.", "Weighted F1")


@dataclass
class MetricsReport:
    val_accuracy: float | None
    test_accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    precision_weighted: float
    f1_weighted: float
    confusion: np.ndarray
    per_class: dict = field(default_factory=dict)    # precision / recall / f1 / support lists

    def table_row(self) -> dict:
        vals = (self.val_accuracy, self.test_accuracy, self.precision_macro, self.recall_macro,
                self.f1_macro, self.precision_weighted, self.f1_weighted)
        return dict(zip(TABLE_COLUMNS, vals))

    def to_dict(self, model: str | None = None) -> dict:
        d = {"columns": list(TABLE_COLUMNS), "row": self.table_row(),
             "confusion": self.confusion.tolist(), "per_class": self.per_class}
        if model is not None:
            d["model"] = model
        return d

    def to_json(self, model=None) -> str:
        return json.dumps(self.to_dict(model), sort_keys=True, indent=2) + "\n"

    def write_confusion_csv(self, path) -> None:
        c = self.confusion.shape[0]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred"] + [str(j) for j in range(c)])
            for i in range(c):
                w.writerow([str(i)] + [str(int(v)) for v in self.confusion[i]])


def confusion_matrix(pred, labels, n_classes: int | None = None) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise InvalidParameter(f"predictions ({len(pred)}) and labels ({len(labels)}) differ in length")
    if n_classes is None:
        n_classes = int(max(pred.max(initial=0), labels.max(initial=0))) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def _div(a, b):
    return np.divide(a, b, out=np.zeros_like(a, dtype=np.float64), where=b > 0)


def evaluate(pred, labels, n_classes: int | None = None, val_accuracy: float | None = None) -> MetricsReport:
    """Macro and support-weighted metrics; 0/0 cells count as 0."""
    cm = confusion_matrix(pred, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    prec = _div(tp, predicted)
    rec = _div(tp, support)
    f1 = _div(2 * prec * rec, prec + rec)
    total = cm.sum()
    w = support / total if total else np.zeros_like(support)
    acc = float(tp.sum() / total) if total else 0.0
    return MetricsReport(
        val_accuracy=val_accuracy,
        test_accuracy=acc,
        precision_macro=float(prec.mean()),
        recall_macro=float(rec.mean()),
        f1_macro=float(f1.mean()),
        precision_weighted=float((w * prec).sum()),
        f1_weighted=float((w * f1).sum()),
        confusion=cm,
        per_class={"precision": prec.tolist(), "recall": rec.tolist(), "f1": f1.tolist(),
                   "support": support.astype(int).tolist()},
    )
