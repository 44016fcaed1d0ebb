"""Needle-in-a-haystack retrieval probing.

A fact (a short templated token sequence) is inserted into domain text at a
controlled position.  The query fact is appended after an EOS separator.
Positives query the inserted fact; negatives insert a distractor built from
the same template with different slot values and still query the original.
A small MLP probe reads the mean-pooled final-layer representation of the
frozen encoder and predicts present/absent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DomainSpec, token_stream
from .model import EOS_ID, MaskMode, TransformerModel, extract_representations
from . import numerics as nx

POSITION_FRACTIONS = {"start": 0.05, "middle": 0.5, "end": 0.95}


@dataclass(frozen=True)
class FactTemplate:
    template_id: int
    # ("kw", token) or ("slot", slot_index)
    pattern: tuple[tuple[str, int], ...]
    lexicons: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        n_slots = sum(1 for k, _ in self.pattern if k == "slot")
        if not 2 <= n_slots <= 4 or n_slots != len(self.lexicons):
            raise ValueError("a fact template needs 2-4 slots, one lexicon per slot")
        if any(len(set(lex)) != len(lex) or len(lex) < 2 for lex in self.lexicons):
            raise ValueError("slot lexicons need >= 2 distinct tokens")

    @property
    def n_slots(self) -> int:
        return len(self.lexicons)

    @property
    def length(self) -> int:
        return len(self.pattern)

    def instantiate(self, values: Sequence[int]) -> np.ndarray:
        """Token sequence for slot-value indices ``values``."""
        if len(values) != self.n_slots:
            raise ValueError("wrong number of slot values")
        out = []
        for kind, v in self.pattern:
            out.append(v if kind == "kw" else self.lexicons[v][values[v]])
        return np.asarray(out, dtype=np.int32)


def default_fact_templates(spec: DomainSpec, n_templates: int = 8, lexicon_size: int = 6,
                           seed: int = 0) -> list[FactTemplate]:
    """Fact templates over domain-exclusive keywords and slot lexicons."""
    rng = np.random.default_rng(seed)
    kws = np.array(sorted(spec.keyword_twins.values()))
    templates = []
    for t in range(n_templates):
        n_slots = 2 + t % 3
        frame = [int(k) for k in rng.choice(kws, size=3, replace=False)]
        types = rng.choice(len(spec.domain_lexicons), size=n_slots, replace=False)
        lexicons = tuple(tuple(int(x) for x in rng.choice(spec.domain_lexicons[s], size=lexicon_size, replace=False))
                         for s in types)
        pattern = [("kw", frame[0]), ("kw", frame[1])] + [("slot", j) for j in range(n_slots)] + [("kw", frame[2])]
        templates.append(FactTemplate(t, tuple(pattern), lexicons))
    return templates


@dataclass
class NeedleExample:
    haystack: np.ndarray
    query: np.ndarray
    inserted: np.ndarray
    label: int  # 1 present, 0 absent
    length: int
    position: str
    template_id: int = -1
    offset: int = -1

    @property
    def input_ids(self) -> np.ndarray:
        return np.concatenate([self.haystack, np.array([EOS_ID], dtype=np.int32), self.query])


@dataclass(frozen=True)
class NeedleDatasetConfig:
    lengths: tuple[int, ...] = (32, 64, 128, 192, 256)
    positions: tuple[str, ...] = ("start", "middle", "end")
    pairs_per_cell: int = 100
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(int(x) for x in self.lengths))
        object.__setattr__(self, "positions", tuple(self.positions))
        object.__setattr__(self, "split", tuple(float(x) for x in self.split))
        if self.pairs_per_cell < 2 or self.pairs_per_cell % 2:
            raise ValueError("pairs_per_cell must be an even number >= 2")
        if any(p not in POSITION_FRACTIONS for p in self.positions):
            raise ValueError(f"positions must come from {sorted(POSITION_FRACTIONS)}")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError("split fractions must be three non-negatives summing to 1")

    @property
    def cells(self) -> list[tuple[int, str]]:
        return [(L, p) for L in self.lengths for p in self.positions]


def contains(haystack: np.ndarray, needle: np.ndarray) -> bool:
    n, m = haystack.size, needle.size
    if m == 0 or m > n:
        return m == 0
    win = np.lib.stride_tricks.sliding_window_view(haystack, m)
    return bool(np.any(np.all(win == needle, axis=1)))


def insertion_offset(position: str, haystack_len: int, fact_len: int) -> int:
    """Fact start at the bucket fraction of the haystack, clipped so the fact fits."""
    return min(int(POSITION_FRACTIONS[position] * haystack_len), haystack_len - fact_len)


@dataclass
class NeedleSplits:
    train: list[NeedleExample]
    val: list[NeedleExample]
    test: list[NeedleExample]


def generate_needle_dataset(cfg: NeedleDatasetConfig, templates: Sequence[FactTemplate], corpus,
                            seed: int) -> NeedleSplits:
    """Balanced examples per (length, position) cell, split per cell and label.

    ``length`` is the total input length: haystack, EOS separator and query.
    ``corpus`` is a list of documents (or token arrays) supplying haystack text.
    """
    if not templates:
        raise ValueError("no fact templates")
    stream = token_stream(corpus)
    longest_fact = max(t.length for t in templates)
    max_h = max(cfg.lengths) - 1 - longest_fact
    if min(cfg.lengths) - 1 - 2 * longest_fact < 1:
        raise ValueError("shortest length bucket cannot hold a fact and its query")
    if stream.size < max_h + 1:
        raise ValueError(f"corpus has {stream.size} tokens; the longest haystack needs {max_h}")
    rng = np.random.default_rng(seed)
    splits = NeedleSplits([], [], [])
    for length, position in cfg.cells:
        for label in (1, 0):
            cell = [_make_example(rng, templates, stream, length, position, label)
                    for _ in range(cfg.pairs_per_cell // 2)]
            n = len(cell)
            n_val = int(round(cfg.split[1] * n))
            n_test = int(round(cfg.split[2] * n))
            n_train = n - n_val - n_test
            splits.train += cell[:n_train]
            splits.val += cell[n_train:n_train + n_val]
            splits.test += cell[n_train + n_val:]
    return splits


def _make_example(rng, templates, stream, length, position, label) -> NeedleExample:
    tpl = templates[int(rng.integers(len(templates)))]
    values = [int(rng.integers(len(lex))) for lex in tpl.lexicons]
    fact = tpl.instantiate(values)
    if label:
        inserted = fact
    else:
        # every slot changes, so the distractor shares only the template frame
        other = [(v + 1 + int(rng.integers(len(lex) - 1))) % len(lex) for v, lex in zip(values, tpl.lexicons)]
        inserted = tpl.instantiate(other)
    h = length - 1 - fact.size
    off = insertion_offset(position, h, inserted.size)
    for _ in range(1000):
        start = int(rng.integers(0, stream.size - (h - inserted.size) + 1))
        filler = stream[start:start + h - inserted.size]
        hay = np.concatenate([filler[:off], inserted, filler[off:]]).astype(np.int32)
        if label or not contains(hay, fact):
            break
    else:  # pragma: no cover - needs a pathological corpus
        raise RuntimeError("could not draw a haystack free of the query fact")
    return NeedleExample(hay, fact.copy(), inserted.copy(), int(label), int(length), position, tpl.template_id, off)


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NeedleProbeConfig:
    hidden: int = 64
    dropout: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 40
    seed: int = 0
    layer: int | None = None  # None -> last block


def pooled_features(encoder: TransformerModel, examples: Sequence[NeedleExample], layer: int | None = None) -> np.ndarray:
    layer = encoder.config.n_layers - 1 if layer is None else layer
    return extract_representations(encoder, [e.input_ids for e in examples], layer, mask_mode=MaskMode.BIDIRECTIONAL)


@dataclass
class NeedleProbe:
    params: dict[str, np.ndarray]
    mu: np.ndarray
    sigma: np.ndarray
    config: NeedleProbeConfig
    best_epoch: int = -1
    val_history: list[float] = field(default_factory=list)

    def logits_from_features(self, F: np.ndarray) -> np.ndarray:
        Z = (F - self.mu) / self.sigma
        h, _ = nx.gelu(Z @ self.params["w1"] + self.params["b1"])
        return h @ self.params["w2"] + self.params["b2"]

    def predict_features(self, F: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits_from_features(F), axis=1)

    def predict(self, encoder: TransformerModel, examples: Sequence[NeedleExample]) -> np.ndarray:
        return self.predict_features(pooled_features(encoder, examples, self.config.layer))


def _probe_loss_grads(params, Z, y, dropout, rng):
    keep = 1.0 - dropout
    m0 = (rng.random(Z.shape) < keep) / keep if dropout else 1.0
    x0 = Z * m0
    u = x0 @ params["w1"] + params["b1"]
    h, gc = nx.gelu(u)
    m1 = (rng.random(h.shape) < keep) / keep if dropout else 1.0
    h1 = h * m1
    logits = h1 @ params["w2"] + params["b2"]
    loss, dlog = nx.cross_entropy(logits, y, np.ones(y.size, dtype=bool))
    g = {"w2": h1.T @ dlog, "b2": dlog.sum(0)}
    dh = (dlog @ params["w2"].T) * m1
    du = nx.gelu_backward(dh, gc)
    g["w1"] = x0.T @ du
    g["b1"] = du.sum(0)
    return loss, g


def train_needle_probe(encoder: TransformerModel, train: Sequence[NeedleExample], val: Sequence[NeedleExample],
                       cfg: NeedleProbeConfig = NeedleProbeConfig()) -> NeedleProbe:
    """Fit the MLP probe on frozen pooled features; keep the best epoch by validation accuracy."""
    before = encoder.content_hash()
    Ftr = pooled_features(encoder, train, cfg.layer)
    Fva = pooled_features(encoder, val, cfg.layer)
    ytr = np.array([e.label for e in train])
    yva = np.array([e.label for e in val])
    rng = np.random.default_rng(cfg.seed)
    d = Ftr.shape[1]
    mu = Ftr.mean(0)
    sigma = Ftr.std(0)
    sigma[sigma == 0] = 1.0
    params = {
        "w1": rng.normal(0, 1 / math.sqrt(d), (d, cfg.hidden)),
        "b1": np.zeros(cfg.hidden),
        "w2": rng.normal(0, 1 / math.sqrt(cfg.hidden), (cfg.hidden, 2)),
        "b2": np.zeros(2),
    }
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    probe = NeedleProbe({k: p.copy() for k, p in params.items()}, mu, sigma, cfg)
    Ztr = (Ftr - mu) / sigma
    best = -1.0
    step = 0
    b1, b2, eps = 0.9, 0.999, 1e-8
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(ytr))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            _, g = _probe_loss_grads(params, Ztr[idx], ytr[idx], cfg.dropout, rng)
            step += 1
            for k in params:
                m[k] = b1 * m[k] + (1 - b1) * g[k]
                v[k] = b2 * v[k] + (1 - b2) * g[k] ** 2
                params[k] *= 1 - cfg.lr * cfg.weight_decay
                params[k] -= cfg.lr * (m[k] / (1 - b1 ** step)) / (np.sqrt(v[k] / (1 - b2 ** step)) + eps)
        trial = NeedleProbe(params, mu, sigma, cfg)
        acc = float(np.mean(trial.predict_features(Fva) == yva))
        probe.val_history.append(acc)
        if acc > best:
            best = acc
            probe.params = {k: p.copy() for k, p in params.items()}
            probe.best_epoch = epoch
    if encoder.content_hash() != before:
        raise RuntimeError("encoder parameters changed during probe training")
    return probe


@dataclass
class NeedleReport:
    lengths: tuple[int, ...]
    positions: tuple[str, ...]
    correct: dict[tuple[int, str], int]
    total: dict[tuple[int, str], int]

    def accuracy(self, length: int, position: str) -> float:
        return self.correct[(length, position)] / self.total[(length, position)]

    @property
    def overall(self) -> float:
        return sum(self.correct.values()) / sum(self.total.values())

    def to_csv(self) -> str:
        lines = ["length," + ",".join(self.positions)]
        for L in self.lengths:
            lines.append(f"{L}," + ",".join(f"{self.accuracy(L, p):.4f}" for p in self.positions))
        lines.append(f"overall,{self.overall:.4f}")
        return "\n".join(lines) + "\n"


def evaluate_needle(probe, encoder: TransformerModel, test: Sequence[NeedleExample],
                    lengths: Sequence[int] | None = None, positions: Sequence[str] | None = None) -> NeedleReport:
    """Accuracy per (length, position) cell and overall.

    ``probe`` is anything with ``predict(encoder, examples) -> labels``.
    """
    cfg = NeedleDatasetConfig()
    lengths = tuple(cfg.lengths if lengths is None else lengths)
    positions = tuple(cfg.positions if positions is None else positions)
    pred = np.asarray(probe.predict(encoder, test)) if test else np.zeros(0)
    correct = {c: 0 for c in ((L, p) for L in lengths for p in positions)}
    total = dict(correct)
    for e, yhat in zip(test, pred):
        key = (e.length, e.position)
        if key not in total:
            raise ValueError(f"example in unexpected cell {key}")
        total[key] += 1
        correct[key] += int(yhat == e.label)
    empty = [c for c, n in total.items() if n == 0]
    if empty:
        raise ValueError(f"empty evaluation cell(s): {empty}")
    return NeedleReport(lengths, positions, correct, total)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _ids(a) -> str:
    return " ".join(map(str, np.asarray(a).tolist()))


def write_needle_examples(path: str | Path, examples: Sequence[NeedleExample]) -> None:
    """Tab-separated: label, length, position, haystack ids, query ids, inserted ids, template, offset."""
    with open(path, "w") as fh:
        for e in examples:
            fh.write("\t".join([str(e.label), str(e.length), e.position, _ids(e.haystack), _ids(e.query),
                                _ids(e.inserted), str(e.template_id), str(e.offset)]) + "\n")


def read_needle_examples(path: str | Path) -> list[NeedleExample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            f = line.rstrip("\n").split("\t")
            arr = lambda s: np.array([int(x) for x in s.split()], dtype=np.int32)
            extra = f[5:] + [""] * (8 - len(f))
            out.append(NeedleExample(arr(f[3]), arr(f[4]), arr(extra[0]) if extra[0] else np.zeros(0, np.int32),
                                     int(f[0]), int(f[1]), f[2],
                                     int(extra[1]) if extra[1] else -1, int(extra[2]) if extra[2] else -1))
    return out
