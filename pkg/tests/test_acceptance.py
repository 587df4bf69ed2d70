"""Acceptance suite: eight end-to-end criteria for the package.

Each test prints a PASS line with the measured quantity so a run's log
doubles as an acceptance report. The directional-regression test
(criterion 5) trains three seeds end to end and is by far the slowest;
everything else is minutes or less.
"""

import time

import numpy as np
import pytest

from ietts import autodiff as ad
from ietts import gradcheck
from ietts.agent import (AgentHyper, AgentModel, embedding_from_weights,
                         mse_loss_batch, synthesize)
from ietts.corpus import (CorpusSpec, generate_corpus, load_corpus,
                          save_corpus)
from ietts.evaluate import (build_token_profile, compare_regimes,
                            evaluation_report, tally_confusion)
from ietts.optim import Schedule
from ietts.rl import (DiscreteToyPolicy, RewardConfig, compute_reward,
                      estimator_bias_test)
from ietts.ser import pretrain_ser, ser_forward_batch
from ietts.trainer import (IterativeState, iterative_train, load_checkpoint,
                           pretrain_agent, resume_iterative_state,
                           save_checkpoint)


def report(name, detail):
    print(f"\nACCEPTANCE PASS {name}: {detail}")


# ------------------------------------------------- 1. autodiff gradient checks

def test_criterion_1_autodiff_gradchecks():
    t0 = time.time()
    results = gradcheck.run_all(trials=100, seed=0)
    worst = max(results.values())
    assert worst <= 1e-4, results
    # assembled model loss as well
    corpus = generate_corpus(CorpusSpec(vocab=6, channels=3, emotions=3,
                                        counts={"train": 2, "val": 1, "test": 1},
                                        seed=11, min_text_len=3, max_text_len=5))
    model = AgentModel(AgentHyper(vocab=6, channels=3, emotions=3, embed=4,
                                  enc_hidden=3, style_dim=4, ref_conv=4,
                                  ref_hidden=4, dec_hidden=6, prenet=4,
                                  max_frames=24),
                       rng=np.random.default_rng(0))
    head = model.params["frame_out"]["w"]
    base = head.data.copy()

    def f(theta):
        model.params["frame_out"]["w"] = ad.reshape(theta, base.shape)
        loss, _ = mse_loss_batch(model, corpus.train)
        return loss

    try:
        err = ad.finite_difference_check(f, base.ravel())
    finally:
        model.params["frame_out"]["w"] = head
    elapsed = time.time() - t0
    assert err <= 1e-4
    assert elapsed < 120
    report("1 autodiff", f"{len(results)} ops worst rel err {worst:.2e}, "
                         f"model loss {err:.2e}, {elapsed:.1f}s")


# --------------------------------------------- 2. REINFORCE estimator unbiased

def test_criterion_2_reinforce_unbiased():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for instance in range(10):
        policy = DiscreteToyPolicy(rng.standard_normal((2, 3)))
        coeff = rng.uniform(0.0, 1.0, size=3)

        def reward(s, c=coeff):
            return float(c[s[0]] + c[s[1]] * 0.5)

        out = estimator_bias_test(policy, reward, n_samples=100_000,
                                  seed=2000 + instance)
        worst = max(worst, out["max_sigmas"])
        assert out["max_sigmas"] <= 3.0, (instance, out["max_sigmas"])
    elapsed = time.time() - t0
    assert elapsed < 120
    report("2 estimator", f"10 instances, worst deviation {worst:.2f} sigma, "
                          f"{elapsed:.1f}s")


# ------------------------------------------------------- 3. reward brute force

def test_criterion_3_reward_brute_force():
    t0 = time.time()
    rng = np.random.default_rng(1)
    for _ in range(1000):
        k = int(rng.integers(1, 40))
        lam = float(rng.uniform(0.05, 0.95))
        probs = rng.uniform(0.0, 1.0, size=k)
        if rng.random() < 0.2:
            probs[rng.integers(0, k)] = lam  # boundary: must not count
        rb = compute_reward(probs, RewardConfig(threshold=lam, samples=k))
        brute = sum(1 for p in probs if p > lam)
        assert rb.above == brute
        assert rb.reward == brute / k
    elapsed = time.time() - t0
    assert elapsed < 1.0
    report("3 reward", f"1000 vectors exact, {elapsed:.2f}s")


# -------------------------------------------------------- 4. SER pretraining

def test_criterion_4_ser_pretraining():
    t0 = time.time()
    corpus = generate_corpus(CorpusSpec())
    model, rep = pretrain_ser(corpus, steps=3000, seed=0, target_acc=0.99)
    elapsed = time.time() - t0
    assert rep["test_acc"] >= 0.90, rep
    assert elapsed < 600
    report("4 ser", f"test acc {rep['test_acc']:.3f} after {rep['steps']} steps, "
                    f"{elapsed:.0f}s")


# ----------------------------------------- 5. directional regime comparison

@pytest.fixture(scope="module")
def shared_corpus_and_ser():
    corpus = generate_corpus(CorpusSpec())
    ser_model, rep = pretrain_ser(corpus, steps=3000, seed=1, target_acc=0.99)
    assert rep["test_acc"] >= 0.90
    return corpus, ser_model


def _run_regime(corpus, ser_model, agent, seed, regime):
    schedule = Schedule(base_lr=2e-4, decay_start=10 ** 9, floor_lr=2e-4,
                        batch_size=32, pretrain_steps=2000)
    state = IterativeState(seed, start_step=schedule.pretrain_steps)
    iterative_train(agent, ser_model, corpus, RewardConfig(), schedule,
                    seed=seed, state=state, epochs=400, min_epochs=400,
                    use_baseline=True, regime=regime)
    return evaluation_report(agent, ser_model, corpus.test)


def test_criterion_5_iterative_beats_mse_only(shared_corpus_and_ser):
    corpus, ser_model = shared_corpus_and_ser
    pre_schedule = Schedule(batch_size=32, pretrain_steps=2000)
    reports = {"mse-only": [], "iterative": []}
    # three pretraining seeds spanning degenerate and healthy initializations
    for seed in (0, 1, 2):
        t0 = time.time()
        agent = AgentModel(AgentHyper(),
                           rng=np.random.default_rng(1000 + seed))
        pretrain_agent(agent, corpus, pre_schedule, seed=seed)
        pre = {n: p.data.copy() for n, p in agent.named_parameters()}
        for regime in ("mse-only", "iterative"):
            twin = AgentModel(AgentHyper())
            for n, p in twin.named_parameters():
                p.data[...] = pre[n]
            rep = _run_regime(corpus, ser_model, twin, seed, regime)
            reports[regime].append(rep)
        elapsed = time.time() - t0
        assert elapsed < 1800, f"seed {seed} exceeded the 30 min budget"
    out = compare_regimes(reports)
    assert out["median_delta"] >= 0.05, out
    report("5 regimes", f"mse-only median {out['mse_only_median']:.3f}, "
                        f"iterative median {out['iterative_median']:.3f}, "
                        f"delta {out['median_delta']:+.3f}, "
                        f"per-seed {np.round(out['per_seed_delta'], 3).tolist()}")


# ------------------------------------------------------ 6. algorithm fidelity

def test_criterion_6_one_rl_one_mse_update_per_batch():
    corpus = generate_corpus(CorpusSpec(counts={"train": 8, "val": 2, "test": 2},
                                        seed=2))
    ser_model, _ = pretrain_ser(corpus, steps=60, seed=0)
    agent = AgentModel(AgentHyper(), rng=np.random.default_rng(3))
    schedule = Schedule(batch_size=8, pretrain_steps=10)
    pretrain_agent(agent, corpus, schedule, seed=0)
    phi = ser_model.checksum()
    state = iterative_train(agent, ser_model, corpus, RewardConfig(samples=8),
                            schedule, seed=0, epochs=3, min_epochs=10 ** 6)
    batches = 3 * (len(corpus.train) // schedule.batch_size)
    assert state.rl_updates == batches
    assert state.mse_updates == batches
    assert ser_model.checksum() == phi
    report("6 fidelity", f"{batches} batches, rl={state.rl_updates}, "
                         f"mse={state.mse_updates}, phi checksum unchanged")


# ------------------------------------------- 7. determinism and persistence

def test_criterion_7_resume_and_round_trips(tmp_path):
    corpus = generate_corpus(CorpusSpec(counts={"train": 8, "val": 2, "test": 2},
                                        seed=3))
    ser_model, _ = pretrain_ser(corpus, steps=60, seed=0)
    agent = AgentModel(AgentHyper(), rng=np.random.default_rng(4))
    schedule = Schedule(batch_size=8, pretrain_steps=10)
    pretrain_agent(agent, corpus, schedule, seed=0)
    cfg = RewardConfig(samples=8)

    # uninterrupted 4-epoch run
    full = AgentModel(AgentHyper())
    for (_, a), (_, b) in zip(agent.named_parameters(), full.named_parameters()):
        b.data[...] = a.data
    full_state = iterative_train(full, ser_model, corpus, cfg, schedule,
                                 seed=5, epochs=4, min_epochs=10 ** 6)

    # interrupted at epoch 2 and resumed
    part = AgentModel(AgentHyper())
    for (_, a), (_, b) in zip(agent.named_parameters(), part.named_parameters()):
        b.data[...] = a.data
    state = IterativeState(5, start_step=schedule.pretrain_steps)
    iterative_train(part, ser_model, corpus, cfg, schedule, seed=5,
                    state=state, epochs=2, min_epochs=10 ** 6)
    ckpt = tmp_path / "mid.ckpt"
    save_checkpoint(ckpt, part, ser_model, corpus, opt_agent=state.opt,
                    opt_rl=state.opt_rl, schedule=schedule,
                    position=(state.step, state.epoch), rng=state.rng)
    loaded = load_checkpoint(ckpt, corpus=corpus)
    resumed = resume_iterative_state(loaded, seed=5)
    iterative_train(loaded["agent"], ser_model, corpus, cfg, schedule, seed=5,
                    state=resumed, epochs=4, min_epochs=10 ** 6)

    assert loaded["agent"].checksum() == full.checksum()
    assert resumed.metrics == full_state.metrics[2:]

    # checkpoint file round-trips bit-exact
    again = tmp_path / "again.ckpt"
    save_checkpoint(again, loaded["agent"], ser_model, corpus,
                    opt_agent=resumed.opt, opt_rl=resumed.opt_rl,
                    schedule=schedule, position=(resumed.step, resumed.epoch),
                    rng=resumed.rng)
    reload = load_checkpoint(again, corpus=corpus)
    third = tmp_path / "third.ckpt"
    save_checkpoint(third, reload["agent"], reload["ser"], corpus,
                    opt_agent=reload["opt_agent"], opt_rl=reload["opt_rl"],
                    schedule=reload["schedule"], position=reload["position"],
                    rng=reload["rng"])
    assert again.read_bytes() == third.read_bytes()

    # corpus file round-trips bit-exact
    p1, p2 = tmp_path / "c1.txt", tmp_path / "c2.txt"
    save_corpus(corpus, p1)
    save_corpus(load_corpus(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()
    report("7 persistence", "resumed metrics and parameters bit-exact; "
                            "checkpoint and corpus files round-trip bit-exact")


# ------------------------------------------------------------ 8. style control

def test_criterion_8_style_control():
    corpus = generate_corpus(CorpusSpec(counts={"train": 4, "val": 2, "test": 3},
                                        seed=4))
    agent = AgentModel(AgentHyper(), rng=np.random.default_rng(6))
    x = corpus.test[0].x
    onehot = np.eye(agent.hyper.emotions)[1]
    base = synthesize(agent, x, onehot)
    for key in ("ref_conv", "ref_rnn", "ref_proj"):
        for _, p in sorted(agent.params[key].items()):
            p.data += 0.5
    assert np.array_equal(base, synthesize(agent, x, onehot))
    emb = embedding_from_weights(agent, onehot)
    assert np.allclose(emb.data[0], agent.tokens.data[1], atol=1e-12)

    profile = build_token_profile(agent, corpus.test)
    assert profile.shape == (agent.hyper.emotions,) * 2
    assert (profile >= -1e-12).all()
    assert np.allclose(profile.sum(axis=1), 1.0, atol=1e-9)

    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(1, 80))
        truths = rng.integers(0, 5, size=n).tolist()
        preds = rng.integers(0, 5, size=n).tolist()
        cm = tally_confusion(truths, preds, 5)
        for t in range(5):
            for p in range(5):
                assert cm.counts[t, p] == sum(
                    1 for a, b in zip(truths, preds) if a == t and b == p)
    report("8 style", "one-hot weights ignore the reference encoder; profile "
                      "rows on the simplex; confusion tally matches brute force")
