"""Cost regressors: least squares over cost-model basis terms, and boosted trees."""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from .analytic import Environment, LsmConfig, Policy
from .samples import CostSample
from .workload import WorkloadMix

RAW_FEATURES = ("N", "E", "B", "T", "M_b", "M_c", "M_f", "v", "r", "q", "w", "s", "tiering")
FEATURE_HASH = hashlib.sha256(",".join(RAW_FEATURES).encode()).hexdigest()[:12]
_IDX = {name: i for i, name in enumerate(RAW_FEATURES)}

BASIS_NAMES = (
    "v*p", "v*p*T", "r*p", "r*p*T", "q*L", "q*L*T", "q*s/B", "q*T*s/B", "w*L*T/B", "w*L/B",
    "v", "r", "q", "w", "(v+r+q)*cache",
)

RIDGE = 1e-8
REFINE_STEPS = 50


class RankDeficientError(ValueError):
    def __init__(self, columns: Sequence[str]):
        self.columns = tuple(columns)
        super().__init__(f"rank-deficient design matrix; dependent columns: {', '.join(self.columns)}")


@dataclass(frozen=True)
class FeatureVector:
    """Raw features in the fixed order :data:`RAW_FEATURES`."""

    values: tuple

    def __post_init__(self):
        if len(self.values) != len(RAW_FEATURES):
            raise ValueError(f"expected {len(RAW_FEATURES)} features, got {len(self.values)}")

    @classmethod
    def from_parts(cls, env: Environment, cfg: LsmConfig, mix: WorkloadMix) -> "FeatureVector":
        return cls((float(env.N), float(env.E), float(env.B), float(cfg.T), float(cfg.M_b),
                    float(cfg.M_c), float(cfg.M_f), mix.v, mix.r, mix.q, mix.w, float(mix.s),
                    1.0 if Policy(cfg.policy) is Policy.TIERING else 0.0))

    @classmethod
    def from_sample(cls, sample: CostSample) -> "FeatureVector":
        return cls.from_parts(sample.env, sample.config, sample.mix)

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


def feature_matrix(samples) -> np.ndarray:
    """Stack samples, feature vectors or raw rows into an ``(n, 13)`` array."""
    rows = []
    for s in samples:
        if isinstance(s, CostSample):
            rows.append(FeatureVector.from_sample(s).values)
        elif isinstance(s, FeatureVector):
            rows.append(s.values)
        else:
            rows.append(tuple(s))
    X = np.asarray(rows, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(RAW_FEATURES):
        raise ValueError(f"feature rows must have {len(RAW_FEATURES)} columns")
    return X


LEVEL_MODES = ("relaxed", "clamped", "ceil")


def level_feature(N, E, M_b, T, mode: str = "relaxed") -> np.ndarray:
    """Level count ``log_T(N*E/M_b + 1)``.

    ``"clamped"`` floors it at one level, ``"ceil"`` takes the integer count
    (at least 1) that the engine builds.
    """
    ratio = np.asarray(N, dtype=float) * E / M_b + 1.0
    L = np.log(ratio) / np.log(T)
    if mode == "relaxed":
        return L
    if mode == "clamped":
        return np.maximum(1.0, L)
    if mode == "ceil":
        # same tolerance as the integer count used to lay out the engine
        return np.maximum(1.0, np.ceil(np.log(ratio * (1 - 1e-12)) / np.log(T)))
    raise ValueError(f"level mode must be one of {LEVEL_MODES}")


def basis_matrix(X: np.ndarray, fp_exponent: float = 1.0, level_mode: str = "relaxed") -> np.ndarray:
    """Expand raw features into the cost-model basis.

    ``p = exp(-fp_exponent * filter_bits / N)``; ``fp_exponent = 1`` is the
    analytic model's form and ``ln(2)^2`` the Bloom-filter law. ``L`` is the
    relaxed level count, or the integer count an engine actually builds when
    ``level_mode="ceil"``. Policy-specific terms are zero for the other policy.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(RAW_FEATURES):
        raise ValueError(f"feature rows must have {len(RAW_FEATURES)} columns, got {X.shape[1]}")
    col = lambda name: X[:, _IDX[name]]
    N, E, B, T = col("N"), col("E"), col("B"), col("T")
    M_b, M_c, M_f = col("M_b"), col("M_c"), col("M_f")
    v, r, q, w, s = col("v"), col("r"), col("q"), col("w"), col("s")
    tier = col("tiering")
    lev = 1.0 - tier
    p = np.exp(-fp_exponent * 8.0 * M_f / N)
    L = level_feature(N, E, M_b, T, level_mode)
    cache = np.minimum(1.0, M_c / (N * E))
    return np.column_stack([
        v * p * lev, v * p * T * tier,
        r * p * lev, r * p * T * tier,
        q * L * lev, q * L * T * tier,
        q * s / B * lev, q * T * s / B * tier,
        w * L * T / B * lev, w * L / B * tier,
        v, r, q, w,
        (v + r + q) * cache,
    ])


@dataclass
class Tree:
    """Flat regression tree; ``feature[i] < 0`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            go_left = X[rows[inner], f[inner]] <= self.threshold[node[inner]]
            node[inner] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])


@dataclass
class TrainedModel:
    kind: str  # "poly" or "trees"
    label: str = "latency"
    coef: np.ndarray | None = None
    fp_exponent: float = 1.0
    level_mode: str = "relaxed"
    trees: list = field(default_factory=list)
    base: float = 0.0
    learning_rate: float = 0.1
    n_samples: int = 0
    seed: int = 0
    deficient: tuple = ()
    stage_rmse: list = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        return predict(self, X)


def _labels(samples, labels, label: str) -> np.ndarray:
    if labels is not None:
        return np.asarray(labels, dtype=float)
    return np.asarray([s.label(label) for s in samples], dtype=float)


def fit_poly(samples, labels=None, *, label: str = "latency", fp_exponent: float = 1.0,
             level_mode: str = "relaxed", strict: bool = True, seed: int = 0) -> TrainedModel:
    """Ridge-damped least squares of the label on :func:`basis_matrix`.

    ``samples`` may be :class:`CostSample` objects (labels taken from them) or
    raw feature rows with explicit ``labels``. Dependent basis columns raise
    :class:`RankDeficientError` when ``strict``; otherwise they get a zero
    coefficient, are listed in ``model.deficient`` and a warning is issued.
    """
    X = feature_matrix(samples)
    y = _labels(samples, labels, label)
    Phi = basis_matrix(X, fp_exponent, level_mode)
    n, k = Phi.shape
    if n < k and strict:
        raise ValueError(f"need at least {k} samples for {k} basis functions, got {n}")
    scale = np.linalg.norm(Phi, axis=0)
    nonzero = scale > 0
    scale[~nonzero] = 1.0
    A = Phi / scale
    # QR with column pivoting finds a maximal independent column subset
    _, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R)) if R.size else np.zeros(0)
    tol = max(n, k) * np.finfo(float).eps * (diag[0] if len(diag) else 0.0) * 1e3
    rank = int(np.sum(diag > tol))
    keep = np.sort(piv[:rank])
    dropped = sorted(set(range(k)) - set(keep.tolist()))
    if dropped:
        names = [BASIS_NAMES[i] for i in dropped]
        if strict:
            raise RankDeficientError(names)
        warnings.warn(str(RankDeficientError(names)), RuntimeWarning, stacklevel=2)
    Ak = A[:, keep]
    # ridge-damped system solved as an augmented least-squares problem, then
    # refined (iterated Tikhonov) so the damping bias decays geometrically
    aug = np.vstack([Ak, math.sqrt(RIDGE) * np.eye(len(keep))])
    sol = np.zeros(len(keep))
    for _ in range(REFINE_STEPS):
        rhs = np.concatenate([y - Ak @ sol, np.zeros(len(keep))])
        step, *_ = np.linalg.lstsq(aug, rhs, rcond=None)
        sol = sol + step
        if np.linalg.norm(step) <= 1e-15 * max(np.linalg.norm(sol), 1e-300):
            break
    coef = np.zeros(k)
    coef[keep] = sol / scale[keep]
    rmse = float(np.sqrt(np.mean((Phi @ coef - y) ** 2))) if n else 0.0
    return TrainedModel("poly", label=label, coef=coef, fp_exponent=fp_exponent, level_mode=level_mode, n_samples=n,
                        seed=seed, deficient=tuple(BASIS_NAMES[i] for i in dropped), stage_rmse=[rmse])


def _best_split(X: np.ndarray, g: np.ndarray, min_leaf: int):
    """Best (gain, feature, threshold) over all features by sorted prefix sums."""
    n = len(g)
    total, best = g.sum(), (0.0, -1, 0.0)
    base = total * total / n
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs, gs = X[order, f], g[order]
        csum = np.cumsum(gs)[:-1]
        nl = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (n - nl >= min_leaf)
        if not valid.any():
            continue
        gain = csum ** 2 / nl + (total - csum) ** 2 / (n - nl) - base
        gain[~valid] = -np.inf
        i = int(np.argmax(gain))
        if gain[i] > best[0] * (1 + 1e-12) + 1e-12 * abs(base):
            best = (float(gain[i]), f, float(0.5 * (xs[i] + xs[i + 1])))
    return best


def _grow(X: np.ndarray, g: np.ndarray, max_depth: int, min_leaf: int) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def node(idx: np.ndarray, depth: int) -> int:
        me = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(g[idx].mean()))
        if depth >= max_depth or len(idx) < 2 * min_leaf:
            return me
        gain, f, thr = _best_split(X[idx], g[idx], min_leaf)
        if f < 0:
            return me
        mask = X[idx, f] <= thr
        feature[me], threshold[me] = f, thr
        left[me] = node(idx[mask], depth + 1)
        right[me] = node(idx[~mask], depth + 1)
        return me

    node(np.arange(len(g)), 0)
    return Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold), np.asarray(left, dtype=np.int64),
                np.asarray(right, dtype=np.int64), np.asarray(value))


def fit_trees(samples, labels=None, *, label: str = "latency", n_trees: int = 100, max_depth: int = 3,
              learning_rate: float = 0.1, min_leaf: int = 2, seed: int = 0) -> TrainedModel:
    """Squared-loss gradient boosting on the raw features.

    Each stage fits a depth-limited tree to the current residuals; the model
    adds ``learning_rate`` times its leaf means. ``stage_rmse[i]`` is the
    training RMSE after ``i`` trees.
    """
    X = feature_matrix(samples)
    y = _labels(samples, labels, label)
    if len(y) < 2:
        raise ValueError("need at least 2 samples")
    if not 0 < learning_rate <= 1:
        raise ValueError("learning_rate must be in (0, 1]")
    base = float(y.mean())
    pred = np.full(len(y), base)
    rmse = [float(np.sqrt(np.mean((y - pred) ** 2)))]
    trees = []
    for _ in range(n_trees):
        tree = _grow(X, y - pred, max_depth, min_leaf)
        trees.append(tree)
        pred = pred + learning_rate * tree.predict(X)
        rmse.append(float(np.sqrt(np.mean((y - pred) ** 2))))
    return TrainedModel("trees", label=label, trees=trees, base=base, learning_rate=learning_rate,
                        n_samples=len(y), seed=seed, stage_rmse=rmse)


def predict(model: TrainedModel, X) -> np.ndarray:
    """Predicted cost for each row; a single feature vector gives a length-1 array."""
    if isinstance(X, (FeatureVector, CostSample)):
        X = [X]
    X = feature_matrix(X) if not isinstance(X, np.ndarray) else np.atleast_2d(X.astype(float))
    if X.shape[1] != len(RAW_FEATURES):
        raise ValueError(f"feature rows must have {len(RAW_FEATURES)} columns, got {X.shape[1]}")
    if model.kind == "poly":
        return basis_matrix(X, model.fp_exponent, model.level_mode) @ model.coef
    if model.kind == "trees":
        out = np.full(len(X), model.base)
        for t in model.trees:
            out += model.learning_rate * t.predict(X)
        return out
    raise ValueError(f"unknown model kind {model.kind!r}")


def fit(kind: str, samples, labels=None, **kw) -> TrainedModel:
    if kind == "poly":
        return fit_poly(samples, labels, **kw)
    if kind == "trees":
        return fit_trees(samples, labels, **kw)
    raise ValueError(f"unknown model kind {kind!r}; expected 'poly' or 'trees'")


# -- model files ---------------------------------------------------------------

def _g(x: float) -> str:
    return format(float(x), ".17g")


def dumps(model: TrainedModel) -> str:
    lines = [
        "camal-model 1",
        f"kind {model.kind}",
        f"label {model.label}",
        f"features {FEATURE_HASH}",
        f"samples {model.n_samples}",
        f"seed {model.seed}",
    ]
    if model.kind == "poly":
        lines.append(f"fp_exponent {_g(model.fp_exponent)}")
        lines.append(f"levels {model.level_mode}")
        lines.append(f"deficient {';'.join(model.deficient)}")
        lines.append("coef " + " ".join(_g(c) for c in model.coef))
    else:
        lines.append(f"base {_g(model.base)}")
        lines.append(f"learning_rate {_g(model.learning_rate)}")
        lines.append(f"trees {len(model.trees)}")
        for t in model.trees:
            lines.append(f"tree {len(t.feature)}")

            def emit(i: int) -> None:
                lines.append(f"{int(t.feature[i])} {_g(t.threshold[i])} {_g(t.value[i])}")
                if t.feature[i] >= 0:
                    emit(int(t.left[i]))
                    emit(int(t.right[i]))

            emit(0)
    return "\n".join(lines) + "\n"


def loads(text: str) -> TrainedModel:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "camal-model 1":
        raise ValueError("not a model file")
    head: dict[str, str] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith(("coef", "trees")):
        key, _, rest = lines[i].partition(" ")
        head[key] = rest
        i += 1
    if head.get("features") != FEATURE_HASH:
        raise ValueError("model was trained on a different feature ordering")
    common = dict(label=head["label"], n_samples=int(head["samples"]), seed=int(head["seed"]))
    if head["kind"] == "poly":
        coef = np.array([float(x) for x in lines[i].split()[1:]])
        if len(coef) != len(BASIS_NAMES):
            raise ValueError("coefficient count does not match the basis")
        deficient = tuple(x for x in head.get("deficient", "").split(";") if x)
        return TrainedModel("poly", coef=coef, fp_exponent=float(head["fp_exponent"]),
                            level_mode=head.get("levels", "relaxed"),
                            deficient=deficient, **common)
    n_trees = int(lines[i].split()[1])
    i += 1
    trees = []
    for _ in range(n_trees):
        size = int(lines[i].split()[1])
        i += 1
        rows = [lines[i + j].split() for j in range(size)]
        i += size
        feature = np.full(size, -1, dtype=np.int64)
        threshold, value = np.zeros(size), np.zeros(size)
        left = np.full(size, -1, dtype=np.int64)
        right = np.full(size, -1, dtype=np.int64)
        pos = 0

        def build() -> int:
            nonlocal pos
            me = pos
            f, thr, val = rows[me]
            pos += 1
            feature[me], threshold[me], value[me] = int(f), float(thr), float(val)
            if feature[me] >= 0:
                left[me] = build()
                right[me] = build()
            return me

        build()
        trees.append(Tree(feature, threshold, left, right, value))
    return TrainedModel("trees", trees=trees, base=float(head["base"]),
                        learning_rate=float(head["learning_rate"]), **common)


def save(model: TrainedModel, path: str | Path) -> None:
    Path(path).write_text(dumps(model))


def load(path: str | Path) -> TrainedModel:
    return loads(Path(path).read_text())
