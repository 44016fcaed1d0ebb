import numpy as np
import pytest
from hypothesis import given, strategies as st

from clmdetour.data import (ArrayStream, StreamExhausted, SyntheticStream, apply_mlm_masking, default_domain_spec,
                            exclusive_rate, generate_corpus, make_clm_batch, pack_array, pack_stream, probe_labels,
                            read_corpus, read_vocab, token_stream, write_corpus, write_vocab)
from clmdetour.model import EOS_ID

MASK = 511


@pytest.fixture(scope="module")
def spec():
    return default_domain_spec(0.3)


def test_zero_shift_has_no_exclusive_tokens(spec):
    docs = generate_corpus(spec.with_shift(0.0), 300, 0)
    assert exclusive_rate(spec, docs) == 0.0


def test_same_seed_same_corpus(spec):
    a = generate_corpus(spec, 50, 123)
    b = generate_corpus(spec, 50, 123)
    assert all(np.array_equal(x.tokens, y.tokens) for x, y in zip(a, b))
    c = generate_corpus(spec, 50, 124)
    assert not all(np.array_equal(x.tokens, y.tokens) for x, y in zip(a, c))


@pytest.mark.parametrize("shift", [0.1, 0.3, 0.7])
def test_exclusive_rate_tracks_shift(shift):
    s = default_domain_spec(shift)
    docs = []
    n_tok = 0
    seed = 0
    while n_tok < 100_000:
        batch = generate_corpus(s, 200, seed)
        docs += batch
        n_tok += sum(d.tokens.size for d in batch)
        seed += 1
    rate = exclusive_rate(s, docs)
    assert abs(rate - shift) <= 0.1 * shift


def test_tokens_stay_in_content_range(spec):
    toks = np.concatenate([d.tokens for d in generate_corpus(spec, 200, 5)])
    assert toks.min() >= 2 and toks.max() <= spec.vocab_size - 2


def _has_repeated_span(tokens, n=5):
    grams = [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]
    return len(set(grams)) < len(grams)


def test_remention_rate_controls_repeated_spans():
    plain = default_domain_spec(0.5, repeat_rate=0.0)
    rich = default_domain_spec(0.5, repeat_rate=0.5)
    frac = {r: np.mean([_has_repeated_span(d.tokens.tolist()) for d in generate_corpus(s, 300, 4)])
            for r, s in ((0.0, plain), (0.5, rich))}
    assert frac[0.5] > 0.8 and frac[0.0] < frac[0.5] - 0.3, frac
    with pytest.raises(ValueError):
        default_domain_spec(0.5, repeat_rate=1.0)


def test_generate_corpus_errors(spec):
    with pytest.raises(ValueError):
        generate_corpus(spec, 0, 0)
    import dataclasses
    with pytest.raises(ValueError):
        generate_corpus(dataclasses.replace(spec, templates=()), 5, 0)


def test_pack_small_example():
    a, b, c, d, e = 10, 11, 12, 13, 14
    out = pack_stream([[a, b, c], [d, e], [15]], 4)
    assert [w.token_ids.tolist() for w in out] == [[a, b, c, EOS_ID], [d, e, EOS_ID, 15]]
    assert out[1].doc_starts.tolist() == [0, 3]


def test_pack_short_stream_is_empty():
    assert pack_stream([[3, 4]], 4) == []
    with pytest.raises(ValueError):
        pack_stream([[3, 4]], 1)


def test_pack_lossless_on_1000_docs(spec):
    docs = generate_corpus(spec, 1000, 9)
    stream = token_stream(docs)
    windows = pack_stream(docs, 256)
    flat = np.concatenate([w.token_ids for w in windows])
    assert flat.size == (stream.size // 256) * 256
    assert np.array_equal(flat, stream[: flat.size])
    # EOS at every boundary: each doc start (after the first) is preceded by EOS
    for w in windows:
        for s in w.doc_starts:
            if s > 0:
                assert w.token_ids[s - 1] == EOS_ID


def test_synthetic_stream_is_continuous_and_keyed(spec):
    s1 = SyntheticStream(spec, 4, 32, key=1, chunk_docs=20)
    first = s1.take(3)
    rest = s1.take(200)
    s2 = SyntheticStream(spec, 4, 32, key=1, chunk_docs=20)
    both = s2.take(203)
    assert np.array_equal(np.concatenate([first, rest]), both)
    other = SyntheticStream(spec, 4, 32, key=2, chunk_docs=20).take(3)
    assert not np.array_equal(first, other)


def test_streams_raise_when_exhausted(spec):
    s = SyntheticStream(spec, 0, 16, max_windows=5)
    s.take(5)
    with pytest.raises(StreamExhausted):
        s.take(1)
    a = ArrayStream(np.zeros((3, 8), int))
    a.take(2)
    with pytest.raises(StreamExhausted):
        a.take(2)


def test_mlm_rate_zero_and_one():
    ids = np.array([[5, 6, EOS_ID, 7, 0, 8]])
    b0 = apply_mlm_masking(ids, 0.0, 0, MASK)
    assert np.array_equal(b0.input_ids, ids) and not b0.supervision_mask.any()
    b1 = apply_mlm_masking(ids, 1.0, 0, MASK)
    assert b1.supervision_mask.tolist() == [[True, True, False, True, False, True]]
    assert np.all(b1.input_ids[b1.supervision_mask] == MASK)
    assert np.array_equal(b1.target_ids, ids)


def test_mlm_errors():
    with pytest.raises(ValueError):
        apply_mlm_masking(np.array([EOS_ID, 0]), 0.5, 0, MASK)
    with pytest.raises(ValueError):
        apply_mlm_masking(np.array([3, 4]), 1.5, 0, MASK)
    with pytest.raises(ValueError):
        apply_mlm_masking(np.array([3, 4]), 0.5, 0, None)


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_mlm_supervision_is_where_input_changed(seed, rate):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 40, (4, 32))
    b = apply_mlm_masking(ids, rate, seed, MASK)
    assert np.array_equal(b.supervision_mask, b.input_ids != ids)
    assert not b.supervision_mask[(ids == EOS_ID) | (ids == 0)].any()


def test_mlm_deterministic_in_seed():
    ids = np.arange(2, 200).reshape(2, -1)
    a = apply_mlm_masking(ids, 0.3, 11, MASK)
    b = apply_mlm_masking(ids, 0.3, 11, MASK)
    assert np.array_equal(a.input_ids, b.input_ids)


@pytest.mark.parametrize("rate", [0.15, 0.30])
def test_mlm_empirical_rate(rate):
    rng = np.random.default_rng(0)
    ids = rng.integers(2, 500, (400, 256))  # 102400 maskable positions
    counts = [apply_mlm_masking(ids, rate, s, MASK).supervision_mask.mean() for s in range(3)]
    assert all(abs(c - rate) < 0.01 for c in counts)


def test_bert_corruption_split():
    ids = np.arange(2, 500)[None].repeat(200, 0)
    b = apply_mlm_masking(ids, 1.0, 0, MASK, corruption="bert", vocab_size=512)
    frac_mask = np.mean(b.input_ids[b.supervision_mask] == MASK)
    assert abs(frac_mask - 0.8) < 0.01
    with pytest.raises(ValueError):
        apply_mlm_masking(ids, 0.1, 0, MASK, corruption="bert")


def test_clm_batch():
    a, b, c, d = 5, 6, 7, 8
    batch = make_clm_batch(np.array([a, b, c, d]))
    assert batch.input_ids.tolist() == [a, b, c, d]
    assert batch.target_ids[:3].tolist() == [b, c, d]
    assert batch.supervision_mask.tolist() == [True, True, True, False]
    ids = np.random.default_rng(0).integers(2, 100, (3, 50))
    cb = make_clm_batch(ids)
    assert cb.supervision_mask.mean() == pytest.approx(49 / 50)
    assert np.array_equal(cb.target_ids[:, :-1], cb.input_ids[:, 1:])


def test_corpus_and_vocab_files(tmp_path, spec):
    docs = generate_corpus(spec, 20, 1)
    write_corpus(tmp_path / "c.txt", docs)
    back = read_corpus(tmp_path / "c.txt")
    assert all(np.array_equal(a.tokens, b) for a, b in zip(docs, back))
    write_vocab(tmp_path / "v.tsv", spec)
    table = read_vocab(tmp_path / "v.tsv")
    assert len(table) == 512 and table[0] == "<pad>" and table[511] == "<mask>"
    assert len(set(table.values())) == 512


def test_probe_labels(spec):
    docs = generate_corpus(spec, 50, 2)
    assert set(probe_labels(docs, "specialty")) <= set(range(4))
    assert probe_labels(docs, "first_template").max() < len(spec.templates)
    with pytest.raises(ValueError):
        probe_labels(docs, "nope")


def test_pack_array_matches_pack_stream(spec):
    docs = generate_corpus(spec, 40, 3)
    arr = pack_array(docs, 64)
    assert np.array_equal(arr, np.stack([w.token_ids for w in pack_stream(docs, 64)]))
