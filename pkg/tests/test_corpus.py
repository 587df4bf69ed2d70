import numpy as np
import pytest

from ietts.corpus import (Corpus, CorpusError, CorpusSpec, Utterance,
                          generate_corpus, label_modulations, load_corpus,
                          render_features, save_corpus)


def small_spec(**kw):
    defaults = dict(counts={"train": 6, "val": 2, "test": 2}, seed=5)
    defaults.update(kw)
    return CorpusSpec(**defaults)


def centroid_features(u):
    y = u.y
    t = np.arange(len(y))
    slope = np.polyfit(t, y[:, 0], 1)[0]
    wiggle = np.abs(np.diff(y[:, 1])).mean()
    return np.concatenate([y.mean(0), y.std(0), [slope, wiggle]])


def centroid_accuracy(corpus):
    """Independent oracle: nearest-centroid on channel statistics."""
    xtr = np.array([centroid_features(u) for u in corpus.train])
    ytr = np.array([u.l for u in corpus.train])
    xte = np.array([centroid_features(u) for u in corpus.test])
    yte = np.array([u.l for u in corpus.test])
    mu, sd = xtr.mean(0), xtr.std(0) + 1e-9
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    cents = np.array([xtr[ytr == e].mean(0) for e in range(corpus.meta.emotions)])
    pred = np.argmin(((xte[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
    return (pred == yte).mean()


def test_deterministic_rendering():
    spec = small_spec(noise=0.0)
    x = np.array([3, 1, 4, 1])
    y1 = render_features(x, 2, spec)
    y2 = render_features(x, 2, spec)
    assert np.array_equal(y1, y2)


def test_channel0_slopes_differ_per_label():
    spec = small_spec(noise=0.0)
    x = np.array([5, 5, 5, 5, 5, 5])
    slope_table, _, _ = label_modulations(spec.emotions)
    t = np.arange(len(x) * spec.frames_per_symbol)
    for a in range(spec.emotions):
        for b in range(a + 1, spec.emotions):
            ya = render_features(x, a, spec)
            yb = render_features(x, b, spec)
            fitted = np.polyfit(t, ya[:, 0] - yb[:, 0], 1)[0]
            assert fitted == pytest.approx(slope_table[a] - slope_table[b], abs=1e-6)


def test_generation_is_pure_function_of_spec():
    c1 = generate_corpus(small_spec())
    c2 = generate_corpus(small_spec())
    assert c1 == c2
    c3 = generate_corpus(small_spec(seed=6))
    assert c1 != c3


def test_split_balance_and_disjointness():
    spec = small_spec()
    c = generate_corpus(spec)
    keys = set()
    for name in ("train", "val", "test"):
        items = c.split(name)
        for e in range(spec.emotions):
            assert sum(1 for u in items if u.l == e) == spec.counts[name]
        for u in items:
            key = (tuple(u.x.tolist()), u.l)
            assert key not in keys
            keys.add(key)


def test_centroid_oracle_beats_chance_default_spec():
    c = generate_corpus(CorpusSpec())
    acc = centroid_accuracy(c)
    assert acc > 0.8
    assert acc >= 3.0 / c.meta.emotions


def test_invalid_specs_rejected():
    with pytest.raises(CorpusError, match="emotion"):
        generate_corpus(small_spec(emotions=1))
    with pytest.raises(CorpusError, match="vocab"):
        generate_corpus(small_spec(vocab=1))
    with pytest.raises(CorpusError, match="noise"):
        generate_corpus(small_spec(noise=-0.1))
    with pytest.raises(CorpusError, match="count"):
        generate_corpus(small_spec(counts={"train": 0, "val": 1, "test": 1}))


def test_save_load_round_trip(tmp_path):
    c = generate_corpus(small_spec())
    p = tmp_path / "corpus.txt"
    save_corpus(c, p)
    loaded = load_corpus(p)
    assert loaded == c
    # second save is byte-identical
    p2 = tmp_path / "again.txt"
    save_corpus(loaded, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_load_truncated_file_errors(tmp_path):
    c = generate_corpus(small_spec())
    p = tmp_path / "corpus.txt"
    save_corpus(c, p)
    text = p.read_text()
    (tmp_path / "trunc.txt").write_text(text[: int(len(text) * 0.6)])
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "trunc.txt")


def test_load_channel_mismatch_names_row(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("#corpus V=4 C=3 E=2 seed=0\n"
                 "#split train\nx=1,2|l=0|y=0.1,0.2,0.3;0.1,0.2\n"
                 "#split val\nx=1|l=0|y=0.1,0.2,0.3\n"
                 "#split test\nx=1|l=1|y=0.1,0.2,0.3\n")
    with pytest.raises(CorpusError, match="frame 1 has 2 channels"):
        load_corpus(p)


def test_load_rejects_missing_header(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("x=1|l=0|y=0.1\n")
    with pytest.raises(CorpusError, match="header"):
        load_corpus(p)
