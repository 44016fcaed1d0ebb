"""Representation similarity, transplants, linear probes and paired significance tests."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import COMPONENT_KEYS, MaskMode, TransformerModel, extract_all_layers, layer_of

# ---------------------------------------------------------------------------
# CKA
# ---------------------------------------------------------------------------


def _gram(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("representation matrix must be 2-D (n, p)")
    if X.shape[0] < 2:
        raise ValueError("CKA needs at least two rows")
    if np.all(X == X[0]):
        raise ValueError("CKA undefined: an input has zero variance (all rows identical)")
    Xc = X - X.mean(axis=0, keepdims=True)
    return Xc @ Xc.T


def linear_cka(X: np.ndarray, Y: np.ndarray) -> float:
    """Linear CKA between row-aligned representation matrices, in float64.

    Columns are centred internally.  Raises ``ValueError`` when either input
    has no variance (every row identical).
    """
    if np.shape(X)[0] != np.shape(Y)[0]:
        raise ValueError(f"row count mismatch: {np.shape(X)[0]} vs {np.shape(Y)[0]}")
    K = _gram(X)
    L = _gram(Y)
    kk = float(np.vdot(K, K))
    ll = float(np.vdot(L, L))
    if kk <= 0.0 or ll <= 0.0:
        raise ValueError("CKA undefined: an input has zero variance")
    # K and L are symmetric, so tr(KL) is the elementwise inner product
    return float(np.vdot(K, L)) / math.sqrt(kk * ll)


@dataclass
class RepresentationSet:
    """Per-layer mean-pooled representations of one model on one text set."""

    layers: dict[int, np.ndarray]
    model_id: str = ""
    text_set: str = ""

    @property
    def n(self) -> int:
        return next(iter(self.layers.values())).shape[0]

    @classmethod
    def extract(cls, model: TransformerModel, texts, *, model_id: str = "", text_set: str = "",
                layers: Sequence[int] | None = None,
                mask_mode: MaskMode | str = MaskMode.BIDIRECTIONAL) -> "RepresentationSet":
        return cls(extract_all_layers(model, texts, layers, mask_mode=mask_mode), model_id, text_set)


def _ci95(values: np.ndarray) -> float:
    # normal-approximation half width; zero for a single seed
    k = values.shape[0]
    if k < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / math.sqrt(k))


@dataclass
class DivergenceProfile:
    layers: list[int]
    per_seed: np.ndarray  # (n_seeds, n_layers)

    @property
    def mean(self) -> np.ndarray:
        return self.per_seed.mean(axis=0)

    @property
    def ci95(self) -> np.ndarray:
        return np.array([_ci95(self.per_seed[:, j]) for j in range(len(self.layers))])


def divergence_from_sets(a: Sequence[RepresentationSet], b: Sequence[RepresentationSet]) -> DivergenceProfile:
    """``1 - CKA`` per layer for paired representation sets (one pair per text seed)."""
    if len(a) != len(b) or not a:
        raise ValueError("need the same non-zero number of representation sets on both sides")
    layers = sorted(a[0].layers)
    rows = []
    for ra, rb in zip(a, b):
        if sorted(ra.layers) != layers or sorted(rb.layers) != layers:
            raise ValueError("layer-count mismatch between compared representation sets")
        if ra.text_set != rb.text_set or ra.n != rb.n:
            raise ValueError("compared representations come from different text sets")
        rows.append([1.0 - linear_cka(ra.layers[l], rb.layers[l]) for l in layers])
    return DivergenceProfile(layers, np.array(rows))


def divergence_profile(model_a: TransformerModel, model_b: TransformerModel,
                       text_sets: Sequence[Sequence[Sequence[int]]]) -> DivergenceProfile:
    """Layerwise divergence averaged over evaluation text sets (one per sampling seed)."""
    if model_a.config.n_layers != model_b.config.n_layers:
        raise ValueError(f"layer-count mismatch: {model_a.config.n_layers} vs {model_b.config.n_layers}")
    a = [RepresentationSet.extract(model_a, t, text_set=str(i)) for i, t in enumerate(text_sets)]
    b = [RepresentationSet.extract(model_b, t, text_set=str(i)) for i, t in enumerate(text_sets)]
    return divergence_from_sets(a, b)


class DegenerateRatioError(ValueError):
    pass


RATIO_FLOOR = 1e-9


@dataclass
class RatioProfile:
    layers: list[int]
    numerator: np.ndarray
    denominator: np.ndarray
    ratio: np.ndarray
    numerator_ci95: np.ndarray = field(default=None)


def ratio_from_profiles(numerator: DivergenceProfile, denominator: DivergenceProfile) -> RatioProfile:
    if numerator.layers != denominator.layers:
        raise ValueError("numerator and denominator cover different layers")
    num, den = numerator.mean, denominator.mean
    for l, d in zip(numerator.layers, den):
        if not d > RATIO_FLOOR:
            raise DegenerateRatioError(
                f"seed-noise divergence at layer {l} is {d:.3g} (<= {RATIO_FLOOR}); ratio undefined")
    return RatioProfile(list(numerator.layers), num, den, num / den, numerator.ci95)


def seed_noise_ratio(clm_model: TransformerModel, mlm_s1: TransformerModel, mlm_s2: TransformerModel,
                     text_sets) -> RatioProfile:
    """``d(CLM, MLM_s1) / d(MLM_s2, MLM_s1)`` per layer."""
    return ratio_from_profiles(divergence_profile(clm_model, mlm_s1, text_sets),
                               divergence_profile(mlm_s2, mlm_s1, text_sets))


def divergence_table(profile: DivergenceProfile, ratio: RatioProfile | None = None) -> str:
    """CSV with columns layer, d_mean, d_ci95, r, numerator, denominator."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "d_mean", "d_ci95", "r", "numerator", "denominator"])
    mean, ci = profile.mean, profile.ci95
    for j, l in enumerate(profile.layers):
        if ratio is None:
            r = num = den = ""
        else:
            k = ratio.layers.index(l)
            r, num, den = f"{ratio.ratio[k]:.6g}", f"{ratio.numerator[k]:.6g}", f"{ratio.denominator[k]:.6g}"
        w.writerow([l, f"{mean[j]:.6g}", f"{ci[j]:.6g}", r, num, den])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# transplants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransplantSpec:
    lo: int
    hi: int
    components: tuple[str, ...] = ("attention", "mlp", "layer_norms")
    source_id: str = "source"
    target_id: str = "target"

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        bad = set(self.components) - set(COMPONENT_KEYS)
        if bad:
            raise ValueError(f"unknown components {sorted(bad)}")
        if self.lo < 0 or self.hi < self.lo - 1:
            raise ValueError(f"invalid transplant range [{self.lo}, {self.hi}]")

    def selects(self, name: str) -> bool:
        layer = layer_of(name)
        if layer is None or not self.lo <= layer <= self.hi:
            return False
        leaf = name.split(".", 2)[2]
        return any(leaf in COMPONENT_KEYS[c] for c in self.components)


def transplant(target: TransformerModel, source: TransformerModel, spec: TransplantSpec) -> TransformerModel:
    """Hybrid whose selected block components come from ``source`` and everything else from ``target``."""
    if target.config != source.config:
        raise ValueError("transplant needs identical architectures")
    if spec.hi >= target.config.n_layers:
        raise ValueError(f"transplant range [{spec.lo}, {spec.hi}] exceeds the model")
    params = {k: (source.params[k] if spec.selects(k) else v).copy() for k, v in target.params.items()}
    return TransformerModel(target.config, params)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, labels: Sequence[int] | None = None) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    labels = np.unique(np.concatenate([y_true, y_pred])) if labels is None else np.asarray(labels)
    scores = []
    for c in labels:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


@dataclass
class LogisticModel:
    W: np.ndarray
    b: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    classes: np.ndarray
    iterations: int
    converged: bool

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mu) / self.sigma
        return Z @ self.W + self.b

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.decision_function(X), axis=1)]


def fit_logistic(X: np.ndarray, y: np.ndarray, *, l2: float = 1e-3, tol: float = 1e-6,
                 max_iter: int = 5000) -> LogisticModel:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardised with the training statistics.  The objective is
    the mean cross entropy plus ``l2/2 * ||W||^2``; iteration stops once the
    objective changes by less than ``tol`` between steps.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes, yi = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes")
    n, p = X.shape
    mu = X.mean(axis=0)
    sigma = X.std(axis=0)
    sigma[sigma == 0] = 1.0
    Z = (X - mu) / sigma
    k = classes.size
    Y = np.zeros((n, k))
    Y[np.arange(n), yi] = 1.0
    # softmax cross entropy is 1/2-smooth in the logits; bound the step by the data's curvature
    lip = 0.5 * (np.linalg.norm(Z, 2) ** 2 / n + 1.0) + l2
    step = 1.0 / lip
    W = np.zeros((p, k))
    b = np.zeros(k)
    prev = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        S = Z @ W + b
        S -= S.max(axis=1, keepdims=True)
        E = np.exp(S)
        Zs = E.sum(axis=1, keepdims=True)
        P = E / Zs
        loss = float(-(S[np.arange(n), yi] - np.log(Zs[:, 0])).mean() + 0.5 * l2 * np.vdot(W, W))
        if abs(prev - loss) < tol:
            converged = True
            break
        prev = loss
        G = (P - Y) / n
        W -= step * (Z.T @ G + l2 * W)
        b -= step * G.sum(axis=0)
    return LogisticModel(W, b, mu, sigma, classes, it, converged)


def stratified_split(y: np.ndarray, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    y = np.asarray(y)
    train, test = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = int(round(test_fraction * idx.size))
        k = min(max(k, 1), idx.size - 1) if idx.size > 1 else 0
        test.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


@dataclass
class ProbeResult:
    task: str
    f1: list[float]
    accuracy: list[float]

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.f1))

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy))


def linear_probe(representations: np.ndarray, labels: np.ndarray, seeds: Sequence[int] = (0, 1, 2), *,
                 task: str = "", test_fraction: float = 0.3, test_representations: np.ndarray | None = None,
                 test_labels: np.ndarray | None = None, l2: float = 1e-3) -> ProbeResult:
    """Macro-F1 of a logistic-regression probe on frozen representations.

    Each seed draws its own stratified train/test split.  With an explicit
    test set, every seed trains on all of ``representations``; the fit is
    deterministic, so seeds then agree.
    """
    X = np.asarray(representations, dtype=np.float64)
    y = np.asarray(labels)
    if np.unique(y).size < 2:
        raise ValueError("linear probe needs at least two classes")
    f1s, accs = [], []
    for s in seeds:
        if test_representations is None:
            tr, te = stratified_split(y, test_fraction, s)
            Xtr, ytr, Xte, yte = X[tr], y[tr], X[te], y[te]
        else:
            Xtr, ytr = X, y
            Xte, yte = np.asarray(test_representations, dtype=np.float64), np.asarray(test_labels)
        clf = fit_logistic(Xtr, ytr, l2=l2)
        pred = clf.predict(Xte)
        f1s.append(macro_f1(yte, pred, labels=np.unique(y)))
        accs.append(float(np.mean(pred == yte)))
    return ProbeResult(task, f1s, accs)


# ---------------------------------------------------------------------------
# paired bootstrap
# ---------------------------------------------------------------------------


@dataclass
class BootstrapResult:
    p_value: float
    mean_diff: float
    n_resamples: int


def _t_stat(d: np.ndarray, axis=-1) -> np.ndarray:
    n = d.shape[axis]
    mean = d.mean(axis=axis)
    sd = d.std(axis=axis, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return mean / (sd / math.sqrt(n))


def paired_differences(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2:
        raise ValueError(f"score grids must share a (tasks, seeds) shape, got {A.shape} vs {B.shape}")
    return (A - B).reshape(-1)


def paired_bootstrap(scores_a, scores_b, n_resamples: int = 10000, seed: int = 0) -> BootstrapResult:
    """Two-sided bootstrap p-value for ``mean(A - B) == 0`` over a task x seed grid.

    (task, seed) cells are resampled with replacement.  The statistic is the
    studentised mean difference and the bootstrap distribution is centred on
    the observed mean (the null is imposed by shifting).  A grid of identical
    scores gives ``p = 1``; a constant nonzero difference gives the smallest
    attainable ``1 / (n_resamples + 1)``.
    """
    if n_resamples < 1000:
        raise ValueError("n_resamples must be >= 1000")
    d = paired_differences(scores_a, scores_b)
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1)) if n > 1 else 0.0
    if sd == 0.0:
        p = 1.0 if mean == 0.0 else 1.0 / (n_resamples + 1)
        return BootstrapResult(p, mean, n_resamples)
    t_obs = abs(mean / (sd / math.sqrt(n)))
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 1000
    done = 0
    while done < n_resamples:
        m = min(chunk, n_resamples - done)
        idx = rng.integers(0, n, size=(m, n))
        t = _t_stat(d[idx] - mean)
        # degenerate resamples (all picks equal) carry no evidence against the null
        hits += int(np.sum(~(np.abs(t) < t_obs)))
        done += m
    return BootstrapResult((hits + 1) / (n_resamples + 1), mean, n_resamples)
