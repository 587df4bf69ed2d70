import numpy as np
import pytest

from ietts import autodiff as ad
from ietts.autodiff import ShapeError
from ietts.corpus import CorpusSpec, generate_corpus
from ietts.ser import (SerHyper, SerModel, attention_weights, classify_batch,
                       pretrain_ser, ser_forward, ser_forward_batch,
                       ser_probability)


@pytest.fixture(scope="module")
def tiny_model():
    hyper = SerHyper(channels=3, emotions=4, conv_width=4, hidden=4, att_width=4)
    return SerModel(hyper, rng=np.random.default_rng(9))


def zeroed(model):
    for _, p in model.named_parameters():
        p.data[...] = 0.0
    return model


def test_zero_parameters_give_uniform_posterior():
    hyper = SerHyper(channels=3, emotions=4, conv_width=4, hidden=4, att_width=4)
    model = zeroed(SerModel(hyper))
    probs = ser_forward(model, np.random.default_rng(0).normal(size=(7, 3)))
    assert np.allclose(probs.data, 0.25)


def test_posterior_normalized(tiny_model):
    y = np.random.default_rng(1).normal(size=(9, 3))
    probs = ser_forward(tiny_model, y).data
    assert (probs >= 0).all()
    assert probs.sum() == pytest.approx(1.0, abs=1e-9)


def test_probability_indexing_and_sum(tiny_model):
    y = np.random.default_rng(2).normal(size=(6, 3))
    ps = [ser_probability(tiny_model, y, l) for l in range(4)]
    assert sum(ps) == pytest.approx(1.0, abs=1e-9)
    assert all(0.0 <= p <= 1.0 for p in ps)
    with pytest.raises(ValueError, match="range"):
        ser_probability(tiny_model, y, 4)


def test_single_frame_attention_is_one():
    hyper = SerHyper(channels=2, emotions=3, conv_width=3, kernel=1, hidden=3, att_width=3)
    model = SerModel(hyper, rng=np.random.default_rng(3))
    alpha = attention_weights(model, np.ones((1, 2)))
    assert np.allclose(alpha, [1.0])


def test_too_short_sequence_errors(tiny_model):
    with pytest.raises(ShapeError, match="kernel"):
        ser_forward(tiny_model, np.zeros((2, 3)))


def test_channel_mismatch_errors(tiny_model):
    with pytest.raises(ShapeError, match="channels"):
        ser_forward(tiny_model, np.zeros((6, 5)))


def test_batched_forward_matches_per_sample(tiny_model):
    rng = np.random.default_rng(4)
    ys = [rng.normal(size=(t, 3)) for t in (5, 9, 7)]
    batched = ser_forward_batch(tiny_model, ys).data
    singles = np.stack([ser_forward(tiny_model, y).data for y in ys])
    assert np.allclose(batched, singles, atol=1e-12)


def test_posterior_grad_wrt_input_matches_finite_differences(tiny_model):
    rng = np.random.default_rng(5)
    y0 = rng.normal(size=(4, 3))

    def f(theta):
        y = ad.reshape(theta, (1, 4, 3))
        x = ad.relu(ad.conv1d(y, tiny_model.params["conv"]["w"],
                              tiny_model.params["conv"]["b"]))
        from ietts import nn
        hs, _ = nn.bigru_run(tiny_model.params["rnn"], x)
        ctx, _ = nn.additive_attention(tiny_model.params["att"], hs)
        logits = ctx @ tiny_model.params["out"]["w"] + tiny_model.params["out"]["b"]
        return ad.nsum(ad.log(ad.softmax(logits)[0, 1] + 1e-12))

    assert ad.finite_difference_check(f, y0.ravel()) <= 1e-4


def test_time_reversal_changes_posterior_after_training(pretrained):
    model, corpus, _ = pretrained
    changed = 0
    for u in corpus.test:
        p_fwd = ser_forward(model, u.y).data
        p_rev = ser_forward(model, u.y[::-1].copy()).data
        if not np.allclose(p_fwd, p_rev, atol=1e-6):
            changed += 1
    assert changed >= 0.9 * len(corpus.test)


@pytest.fixture(scope="session")
def pretrained():
    corpus = generate_corpus(CorpusSpec(counts={"train": 40, "val": 10, "test": 10}, seed=3))
    model, report = pretrain_ser(corpus, steps=1500, seed=1, eval_every=250,
                                 target_acc=0.99)
    return model, corpus, report


def test_pretraining_learns(pretrained):
    _, _, report = pretrained
    assert report["train_acc"] >= 0.9
    assert report["val_acc"] >= 0.8


def test_shuffled_labels_give_chance_accuracy():
    corpus = generate_corpus(CorpusSpec(counts={"train": 12, "val": 6, "test": 6}, seed=7))
    rng = np.random.default_rng(0)
    for u in corpus.train + corpus.val + corpus.test:
        u.l = int(rng.integers(0, corpus.meta.emotions))
    _, report = pretrain_ser(corpus, steps=300, seed=1, eval_every=300)
    assert abs(report["test_acc"] - 0.2) <= 0.15


def test_checksum_tracks_parameters(tiny_model):
    before = tiny_model.checksum()
    assert before == tiny_model.checksum()
    name, p = tiny_model.named_parameters()[0]
    p.data.flat[0] += 1.0
    assert tiny_model.checksum() != before
    p.data.flat[0] -= 1.0
    assert tiny_model.checksum() == before


def test_classify_batch_chunking(tiny_model):
    rng = np.random.default_rng(8)
    ys = [rng.normal(size=(6, 3)) for _ in range(7)]
    assert classify_batch(tiny_model, ys, chunk=3) == classify_batch(tiny_model, ys, chunk=7)
