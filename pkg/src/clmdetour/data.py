"""Synthetic corpora, packing and objective-specific batches.

Two distributions share one vocabulary.  Documents are sequences of
"records" expanded from token templates (keywords plus lexicon slots).  A
record is rendered either with the shared keywords/lexicons (general text)
or with their domain-exclusive twins; ``domain_shift`` is the probability of
the latter, so it is also the expected share of exclusive tokens.  Each
document carries a latent specialty that biases slot fillers, which gives
the linear probes something to find.  With ``repeat_rate > 0`` records are
sometimes repeated verbatim later in the same document (re-mentions).

Token ids: ``0`` pad, ``1`` EOS, content ids ``2 .. V-2``, ``V-1`` mask.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import EOS_ID, PAD_ID

N_SLOT_TYPES = 6


@dataclass(frozen=True)
class Template:
    """A record pattern: each element is ``("kw", token)`` or ``("slot", slot_type)``."""

    elements: tuple[tuple[str, int], ...]

    @property
    def length(self) -> int:
        return len(self.elements)


@dataclass(frozen=True)
class DomainSpec:
    vocab_size: int
    shared_ids: tuple[int, ...]
    exclusive_ids: tuple[int, ...]
    templates: tuple[Template, ...]
    # lexicons[slot_type] -> shared tokens; domain_lexicons mirrors it with exclusive tokens
    lexicons: tuple[tuple[int, ...], ...]
    domain_lexicons: tuple[tuple[int, ...], ...]
    # shared keyword -> exclusive twin
    keyword_twins: dict = field(hash=False, compare=False)
    doc_length: tuple[int, int] = (24, 160)
    domain_shift: float = 0.5
    n_specialties: int = 4
    specialty_bias: float = 0.6
    slot_coupling: float = 0.7
    repeat_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.domain_shift <= 1.0:
            raise ValueError("domain_shift must lie in [0, 1]")
        if not 0.0 <= self.repeat_rate < 1.0:
            raise ValueError("repeat_rate must lie in [0, 1)")
        lo, hi = self.doc_length
        if not 1 <= lo <= hi:
            raise ValueError("doc_length must satisfy 1 <= min <= max")

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    def with_shift(self, domain_shift: float) -> "DomainSpec":
        return dataclasses.replace(self, domain_shift=domain_shift)


def default_domain_spec(domain_shift: float = 0.5, vocab_size: int = 512, n_templates: int = 8,
                        n_exclusive: int = 160, lexicon_size: int = 20, grammar_seed: int = 0,
                        doc_length: tuple[int, int] = (24, 160), repeat_rate: float = 0.0) -> DomainSpec:
    """The desk grammar: record templates over a shared/exclusive vocabulary split."""
    content = np.arange(2, vocab_size - 1)
    if n_exclusive >= content.size:
        raise ValueError("vocabulary too small for the requested exclusive partition")
    shared = content[: content.size - n_exclusive]
    exclusive = content[content.size - n_exclusive:]
    rng = np.random.default_rng(grammar_seed)
    n_kw = 4 * n_templates
    need_shared = n_kw + N_SLOT_TYPES * lexicon_size
    need_excl = n_kw + N_SLOT_TYPES * lexicon_size
    if need_shared > shared.size or need_excl > exclusive.size:
        raise ValueError("vocabulary too small for the requested grammar")
    sh = rng.permutation(shared)
    ex = rng.permutation(exclusive)
    keywords, sh = sh[:n_kw], sh[n_kw:]
    dkeywords, ex = ex[:n_kw], ex[n_kw:]
    lexicons = tuple(tuple(int(t) for t in sh[i * lexicon_size:(i + 1) * lexicon_size]) for i in range(N_SLOT_TYPES))
    dlexicons = tuple(tuple(int(t) for t in ex[i * lexicon_size:(i + 1) * lexicon_size]) for i in range(N_SLOT_TYPES))
    templates = []
    for t in range(n_templates):
        kws = [int(k) for k in keywords[4 * t:4 * t + 4]]
        n_slots = int(rng.integers(2, 4))
        slots = [int(s) for s in rng.choice(N_SLOT_TYPES, size=n_slots, replace=False)]
        elems: list[tuple[str, int]] = [("kw", kws[0]), ("slot", slots[0]), ("kw", kws[1]), ("slot", slots[1])]
        if n_slots == 3:
            elems += [("kw", kws[2]), ("slot", slots[2])]
        elems.append(("kw", kws[3]))
        templates.append(Template(tuple(elems)))
    twins = {int(k): int(d) for k, d in zip(keywords, dkeywords)}
    return DomainSpec(
        vocab_size=vocab_size,
        shared_ids=tuple(int(t) for t in shared),
        exclusive_ids=tuple(int(t) for t in exclusive),
        templates=tuple(templates),
        lexicons=lexicons,
        domain_lexicons=dlexicons,
        keyword_twins=twins,
        doc_length=doc_length,
        domain_shift=domain_shift,
        repeat_rate=repeat_rate,
    )


@dataclass
class Document:
    tokens: np.ndarray
    specialty: int
    first_template: int
    domain_records: int
    records: int

    @property
    def domain_fraction(self) -> float:
        return self.domain_records / self.records


def _render_record(spec: DomainSpec, tid: int, specialty: int, domain: bool, rng: np.random.Generator) -> list[int]:
    out = []
    prev_idx = None
    for kind, val in spec.templates[tid].elements:
        if kind == "kw":
            out.append(spec.keyword_twins[val] if domain else val)
            continue
        lex = spec.domain_lexicons[val] if domain else spec.lexicons[val]
        n = len(lex)
        if prev_idx is not None and rng.random() < spec.slot_coupling:
            idx = (prev_idx * 7 + 3) % n
        elif rng.random() < spec.specialty_bias:
            seg = n // spec.n_specialties
            idx = specialty * seg + int(rng.integers(seg))
        else:
            idx = int(rng.integers(n))
        prev_idx = idx
        out.append(lex[idx])
    return out


def generate_corpus(spec: DomainSpec, n_docs: int, seed) -> list[Document]:
    """``n_docs`` documents drawn from the template grammar, deterministic in ``seed``."""
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    if not spec.templates:
        raise ValueError("empty template set")
    rng = np.random.default_rng(seed)
    lo, hi = spec.doc_length
    docs = []
    for _ in range(n_docs):
        specialty = int(rng.integers(spec.n_specialties))
        target = int(rng.integers(lo, hi + 1))
        toks: list[int] = []
        first = -1
        n_rec = n_dom = 0
        rendered: list[tuple[list[int], bool]] = []
        while len(toks) < target:
            if spec.repeat_rate > 0 and rendered and rng.random() < spec.repeat_rate:
                rec, domain = rendered[int(rng.integers(len(rendered)))]
                toks.extend(rec)
                n_rec += 1
                n_dom += domain
                continue
            # specialties prefer a subset of templates
            if rng.random() < spec.specialty_bias:
                choices = [t for t in range(len(spec.templates)) if t % spec.n_specialties == specialty]
                tid = choices[int(rng.integers(len(choices)))] if choices else int(rng.integers(len(spec.templates)))
            else:
                tid = int(rng.integers(len(spec.templates)))
            if first < 0:
                first = tid
            domain = bool(rng.random() < spec.domain_shift)
            rec = _render_record(spec, tid, specialty, domain, rng)
            rendered.append((rec, domain))
            toks.extend(rec)
            n_rec += 1
            n_dom += domain
        docs.append(Document(np.asarray(toks, dtype=np.int32), specialty, first, n_dom, n_rec))
    return docs


def exclusive_rate(spec: DomainSpec, docs: Iterable[Document]) -> float:
    excl = np.zeros(spec.vocab_size, dtype=bool)
    excl[list(spec.exclusive_ids)] = True
    toks = np.concatenate([d.tokens for d in docs])
    return float(excl[toks].mean())


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------


@dataclass
class PackedSequence:
    token_ids: np.ndarray
    # offsets (within the window) at which a new document starts
    doc_starts: np.ndarray


def _as_token_lists(docs) -> list[np.ndarray]:
    return [np.asarray(d.tokens if isinstance(d, Document) else d, dtype=np.int32) for d in docs]


def token_stream(docs) -> np.ndarray:
    """``doc1 EOS doc2 EOS ...`` as one flat array."""
    parts = []
    for t in _as_token_lists(docs):
        parts.append(t)
        parts.append(np.array([EOS_ID], dtype=np.int32))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int32)


def pack_array(docs, window: int) -> np.ndarray:
    """Packed windows as an ``(n, window)`` array; the partial tail is dropped."""
    if window < 2:
        raise ValueError("window must be >= 2")
    stream = token_stream(docs)
    n = stream.size // window
    return stream[: n * window].reshape(n, window).copy()


def pack_stream(docs, window: int) -> list[PackedSequence]:
    """Concatenate documents with EOS separators and cut into full windows.

    No attention masking is implied at document boundaries.
    """
    lists = _as_token_lists(docs)
    windows = pack_array(lists, window)
    starts = np.cumsum([0] + [t.size + 1 for t in lists[:-1]])
    out = []
    for i, w in enumerate(windows):
        lo, hi = i * window, (i + 1) * window
        inside = starts[(starts >= lo) & (starts < hi)] - lo
        out.append(PackedSequence(w, inside.astype(np.int32)))
    return out


class StreamExhausted(RuntimeError):
    pass


class SyntheticStream:
    """Endless (or capped) packed windows generated chunk by chunk.

    The window order is a pure function of ``(spec, data_seed, key)``; no
    run-level randomness enters, so runs that share a data seed see
    identical data in identical order.
    """

    def __init__(self, spec: DomainSpec, data_seed: int, window: int, key: int = 0,
                 chunk_docs: int = 2000, max_windows: int | None = None):
        self.spec = spec
        self.window = window
        self.chunk_docs = chunk_docs
        self.max_windows = max_windows
        self._seq = np.random.SeedSequence([int(data_seed), int(key)])
        self._chunk = 0
        self._buffer = np.zeros(0, dtype=np.int32)
        self.windows_served = 0

    def _refill(self, n_tokens: int) -> None:
        parts = [self._buffer]
        have = self._buffer.size
        while have < n_tokens:
            seed = np.random.SeedSequence(self._seq.entropy, spawn_key=(self._chunk,))
            docs = generate_corpus(self.spec, self.chunk_docs, seed)
            chunk = token_stream(docs)
            parts.append(chunk)
            have += chunk.size
            self._chunk += 1
        self._buffer = np.concatenate(parts)

    def take(self, n: int) -> np.ndarray:
        if self.max_windows is not None and self.windows_served + n > self.max_windows:
            raise StreamExhausted(f"stream capped at {self.max_windows} windows")
        need = n * self.window
        if self._buffer.size < need:
            self._refill(need)
        out = self._buffer[:need].reshape(n, self.window).copy()
        self._buffer = self._buffer[need:]
        self.windows_served += n
        return out


class ArrayStream:
    """Windows served in order from a fixed packed array."""

    def __init__(self, windows: np.ndarray):
        self.windows = np.asarray(windows, dtype=np.int32)
        self.window = self.windows.shape[1]
        self.windows_served = 0

    def take(self, n: int) -> np.ndarray:
        if self.windows_served + n > len(self.windows):
            raise StreamExhausted(
                f"requested {n} windows, {len(self.windows) - self.windows_served} left")
        out = self.windows[self.windows_served:self.windows_served + n].copy()
        self.windows_served += n
        return out


# ---------------------------------------------------------------------------
# objective batches
# ---------------------------------------------------------------------------


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    target_ids: np.ndarray
    supervision_mask: np.ndarray
    mask_rate: float


@dataclass
class CausalBatch:
    input_ids: np.ndarray
    target_ids: np.ndarray
    supervision_mask: np.ndarray


def _ids_of(seq) -> np.ndarray:
    if isinstance(seq, PackedSequence):
        return np.asarray(seq.token_ids)
    if isinstance(seq, (list, tuple)) and seq and isinstance(seq[0], PackedSequence):
        return np.stack([s.token_ids for s in seq])
    return np.asarray(seq)


def apply_mlm_masking(seq, rate: float, seed, mask_id: int, *, corruption: str = "replace",
                      vocab_size: int | None = None) -> MaskedBatch:
    """Mask each non-EOS, non-pad position independently with probability ``rate``.

    ``corruption="replace"`` substitutes the mask token at every selected
    position.  ``"bert"`` uses the 80/10/10 mask/random/keep split (needs
    ``vocab_size``); under it some supervised inputs equal their targets.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    if mask_id is None:
        raise ValueError("vocabulary has no mask token")
    ids = _ids_of(seq)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    maskable = (ids != EOS_ID) & (ids != PAD_ID)
    if rate > 0 and not maskable.any():
        raise ValueError("no maskable positions")
    chosen = (rng.random(ids.shape) < rate) & maskable
    inputs = ids.copy()
    if corruption == "replace":
        inputs[chosen] = mask_id
    elif corruption == "bert":
        if vocab_size is None:
            raise ValueError("bert corruption needs vocab_size")
        u = rng.random(ids.shape)
        inputs[chosen & (u < 0.8)] = mask_id
        rnd = chosen & (u >= 0.8) & (u < 0.9)
        inputs[rnd] = rng.integers(2, mask_id, size=int(rnd.sum()))
    else:
        raise ValueError(f"unknown corruption scheme {corruption!r}")
    return MaskedBatch(inputs, ids.copy(), chosen, rate)


def make_clm_batch(seq) -> CausalBatch:
    """Inputs unchanged, targets shifted left by one; the last position is unsupervised (target -1)."""
    ids = _ids_of(seq)
    if ids.shape[-1] < 2:
        raise ValueError("window must be >= 2")
    targets = np.full_like(ids, -1)
    targets[..., :-1] = ids[..., 1:]
    sup = np.ones(ids.shape, dtype=bool)
    sup[..., -1] = False
    return CausalBatch(ids.copy(), targets, sup)


# ---------------------------------------------------------------------------
# evaluation texts and probe labels
# ---------------------------------------------------------------------------

PROBE_TASKS = ("specialty", "first_template", "domain_heavy")


def probe_labels(docs: Sequence[Document], task: str, spec: DomainSpec | None = None) -> np.ndarray:
    if task == "specialty":
        return np.array([d.specialty for d in docs])
    if task == "first_template":
        return np.array([d.first_template for d in docs])
    if task == "domain_heavy":
        thresh = 0.5 if spec is None else spec.domain_shift
        return np.array([int(d.domain_fraction > thresh) for d in docs])
    raise ValueError(f"unknown probe task {task!r}")


def eval_texts(docs: Sequence[Document], max_len: int) -> list[np.ndarray]:
    return [d.tokens[:max_len] for d in docs]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_corpus(path: str | Path, docs) -> None:
    """One document per line, whitespace-separated integer ids."""
    with open(path, "w") as fh:
        for t in _as_token_lists(docs):
            fh.write(" ".join(map(str, t.tolist())) + "\n")


def read_corpus(path: str | Path) -> list[np.ndarray]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(np.array([int(x) for x in line.split()], dtype=np.int32))
    return out


def vocab_strings(spec: DomainSpec) -> list[str]:
    names = [f"w{i}" for i in range(spec.vocab_size)]
    names[PAD_ID], names[EOS_ID], names[spec.mask_id] = "<pad>", "<eos>", "<mask>"
    for t, tpl in enumerate(spec.templates):
        for j, (kind, val) in enumerate(e for e in tpl.elements if e[0] == "kw"):
            names[val] = f"kw{t}_{j}"
            names[spec.keyword_twins[val]] = f"dkw{t}_{j}"
    for s, (lex, dlex) in enumerate(zip(spec.lexicons, spec.domain_lexicons)):
        for i, tok in enumerate(lex):
            names[tok] = f"lex{s}_{i}"
        for i, tok in enumerate(dlex):
            names[tok] = f"dlex{s}_{i}"
    return names


def write_vocab(path: str | Path, spec: DomainSpec) -> None:
    """Plain-text ``id<TAB>string`` table."""
    with open(path, "w") as fh:
        for i, name in enumerate(vocab_strings(spec)):
            fh.write(f"{i}\t{name}\n")


def read_vocab(path: str | Path) -> dict[int, str]:
    table = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                i, name = line.rstrip("\n").split("\t")
                table[int(i)] = name
    return table
