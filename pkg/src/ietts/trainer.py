"""Training orchestration: generator MSE pretraining, the alternating
reward/MSE loop, and checkpointing.

Every run is a pure function of (corpus, config, seed): batching, rollout
noise and evaluation order all flow from one Generator whose state is
checkpointed, so a resumed run reproduces an uninterrupted one bit-exactly.
"""

import hashlib
import io
import struct

import numpy as np

from . import autodiff as ad
from . import corpus as corpus_mod
from .agent import AgentHyper, AgentModel, mse_loss_batch, policy_rollouts, synthesize
from .optim import AdamState, Schedule, adam_step, lr_at  # noqa: F401  (re-export)
from .rl import RewardConfig, compute_reward, reinforce_surrogate
from .ser import SerHyper, SerModel, ser_forward_batch


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for lo in range(0, n - batch_size + 1, batch_size):
        yield order[lo:lo + batch_size]


def pretrain_agent(agent, corpus, schedule, seed=0, steps=None, log=None):
    """Teacher-forced MSE training with self-reference; returns loss curve."""
    steps = schedule.pretrain_steps if steps is None else steps
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA6E7]))
    opt = AdamState()
    params = agent.named_parameters()
    items = corpus.train
    curve = []
    for step in range(steps):
        idx = rng.choice(len(items), size=min(schedule.batch_size, len(items)),
                         replace=False)
        loss, _ = mse_loss_batch(agent, [items[i] for i in idx])
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"generator pretraining diverged at step {step}")
        ad.zero_grad([p for _, p in params])
        ad.backward(loss)
        adam_step(params, opt, lr_at(step, schedule))
        curve.append(value)
        if log and (step + 1) % 100 == 0:
            log({"step": step + 1, "loss": value})
    return curve


def reference_weighted_accuracy(agent, ser_model, items):
    """Classifier accuracy on mean-mode decodes conditioned on each item's
    own reference features (the convergence metric)."""
    from .agent import decode_batch, encode_batch, ref_embed_batch
    correct = 0
    for lo in range(0, len(items), 16):
        chunk = items[lo:lo + 16]
        memory, mask_x = encode_batch(agent, [u.x for u in chunk])
        _, emb = ref_embed_batch(agent, [u.y for u in chunk])
        res = decode_batch(agent, memory, mask_x, emb, "mean")
        ys = [res.frames[i, :int(res.stop_frames[i])] for i in range(len(chunk))]
        probs = ser_forward_batch(ser_model, ys).data
        correct += int(np.sum(np.argmax(probs, axis=1) == [u.l for u in chunk]))
    return correct / len(items)


class IterativeState:
    """Mutable loop state; checkpointable between epochs.

    The step counter continues from the pretraining budget so the learning
    rate enters the iterative phase already decayed."""

    def __init__(self, seed, start_step=0):
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0x17E2]))
        self.opt = AdamState()
        self.opt_rl = AdamState()
        self.step = start_step
        self.epoch = 0
        self.rl_updates = 0
        self.mse_updates = 0
        self.baseline = 0.0
        self.metrics = []


def iterative_train(agent, ser_model, corpus, reward_cfg, schedule, seed=0,
                    state=None, epochs=None, min_epochs=12, use_baseline=False,
                    regime="iterative", log=None, checkpoint_fn=None):
    """Alternating loop: per batch, one REINFORCE update on K sampled
    rollouts, then one teacher-forced MSE update on the whole batch.

    With ``regime="mse-only"`` the reward update is skipped and only the
    MSE updates run, giving a matched-budget baseline regime.

    The classifier is frozen throughout (checksummed by callers). Stops
    after ``epochs``, or once at least ``min_epochs`` epochs have run and
    the validation accuracy moved less than 0.1 points over a window of 4
    consecutive epochs.
    """
    if regime not in ("iterative", "mse-only"):
        raise ValueError(f"unknown regime {regime!r}")
    if reward_cfg.samples > schedule.batch_size:
        raise ValueError(f"sample size K={reward_cfg.samples} exceeds batch size {schedule.batch_size}")
    state = state or IterativeState(seed, start_step=schedule.pretrain_steps)
    epochs = schedule.iterative_epochs if epochs is None else epochs
    params = agent.named_parameters()
    items = corpus.train
    phi_before = ser_model.checksum()

    while state.epoch < epochs:
        epoch_rewards = []
        epoch_mse = []
        for batch_idx in _batches(len(items), schedule.batch_size, state.rng):
            batch = [items[i] for i in batch_idx]
            lr = lr_at(state.step, schedule)

            if regime == "iterative":
                # reward update on K of the batch's items
                pick = state.rng.choice(len(batch), size=reward_cfg.samples, replace=False)
                rollouts = policy_rollouts(agent, [batch[i] for i in pick], state.rng)
                probs = ser_forward_batch(ser_model, [s.y for s in rollouts]).data
                p_i = np.array([probs[i, batch[j].l] for i, j in enumerate(pick)])
                rb = compute_reward(p_i, reward_cfg)
                reward = rb.reward
                if use_baseline:
                    reward = rb.reward - state.baseline
                    state.baseline = 0.9 * state.baseline + 0.1 * rb.reward
                surrogate = reinforce_surrogate(rollouts, reward)
                ad.zero_grad([p for _, p in params])
                ad.backward(surrogate)
                # the reward update keeps its own optimizer state so its
                # noisy gradients cannot inflate the MSE update's second
                # moments and stall the teacher-forced anchor
                adam_step(params, state.opt_rl, lr)
                state.rl_updates += 1
                epoch_rewards.append(rb.reward)

            # MSE update on the full batch
            loss, _ = mse_loss_batch(agent, batch)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"iterative training diverged at step {state.step}; checkpoint the previous epoch")
            ad.zero_grad([p for _, p in params])
            ad.backward(loss)
            adam_step(params, state.opt, lr)
            state.mse_updates += 1
            state.step += 1
            epoch_mse.append(value)

        state.epoch += 1
        val_acc = reference_weighted_accuracy(agent, ser_model, corpus.val)
        entry = {
            "step": state.step,
            "epoch": state.epoch,
            "reward": float(np.mean(epoch_rewards)) if epoch_rewards else None,
            "mse": float(np.mean(epoch_mse)),
            "val_ser_acc": val_acc,
            "lr": lr_at(state.step, schedule),
        }
        state.metrics.append(entry)
        if log:
            log(entry)
        if checkpoint_fn:
            checkpoint_fn(state)
        accs = [m["val_ser_acc"] for m in state.metrics]
        if (state.epoch >= min_epochs and len(accs) >= 4
                and max(accs[-4:]) - min(accs[-4:]) < 0.001):
            break

    assert ser_model.checksum() == phi_before, "classifier parameters changed during generator training"
    return state


# ---------------------------------------------------------------- checkpoints

MAGIC = b"iETTS-CKPT-1"

_AGENT_META_FIELDS = ("vocab", "channels", "emotions", "embed", "enc_hidden",
                      "style_dim", "ref_conv", "ref_hidden", "dec_hidden",
                      "prenet", "mixtures", "reduction", "kernel", "max_frames")
_SER_META_FIELDS = ("channels", "emotions", "conv_width", "kernel", "hidden",
                    "att_width")


class CheckpointError(ValueError):
    pass


def corpus_digest(corpus):
    """Four little-endian u64 words of the sha256 of the corpus serialization."""
    buf = io.StringIO()
    m = corpus.meta
    buf.write(f"{m.vocab},{m.channels},{m.emotions},{m.seed};")
    for name in ("train", "val", "test"):
        for u in corpus.split(name):
            buf.write(",".join(map(str, u.x.tolist())))
            buf.write(f"|{u.l}|")
            buf.write(";".join(",".join(format(v, ".17g") for v in f) for f in u.y))
            buf.write("\n")
    digest = hashlib.sha256(buf.getvalue().encode()).digest()
    return np.frombuffer(digest, dtype="<u8").copy()


def _flatten_params(model):
    return np.concatenate([p.data.ravel() for _, p in model.named_parameters()])


def _load_params(model, flat):
    offset = 0
    for _, p in model.named_parameters():
        n = p.data.size
        p.data[...] = flat[offset:offset + n].reshape(p.data.shape)
        offset += n
    if offset != flat.size:
        raise CheckpointError(f"parameter section holds {flat.size} values, model needs {offset}")


def _flatten_opt(opt, model):
    named = model.named_parameters()
    parts = [np.array([float(opt.step)])]
    for moments in (opt.m, opt.v):
        for key, p in named:
            parts.append(moments.get(key, np.zeros(p.data.size)).ravel())
    return np.concatenate(parts)


def _load_opt(opt, model, flat):
    opt.step = int(flat[0])
    offset = 1
    named = model.named_parameters()
    total = sum(p.data.size for _, p in named)
    if flat.size == 1:
        opt.m, opt.v = {}, {}
        return
    if flat.size != 1 + 2 * total:
        raise CheckpointError("optimizer section size mismatch")
    for target in (opt.m, opt.v):
        for name, p in named:
            n = p.data.size
            target[name] = flat[offset:offset + n].reshape(p.data.shape).copy()
            offset += n


def _rng_state_to_words(rng):
    st = rng.bit_generator.state
    s, inc = st["state"]["state"], st["state"]["inc"]
    return np.array([s & (2**64 - 1), s >> 64, inc & (2**64 - 1), inc >> 64,
                     int(st["has_uint32"]), st["uinteger"]], dtype=np.uint64)


def _rng_from_words(words):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(words[0]) | (int(words[1]) << 64),
                  "inc": int(words[2]) | (int(words[3]) << 64)},
        "has_uint32": int(words[4]),
        "uinteger": int(words[5]),
    }
    return rng


def _write_section(fh, name, array):
    data = np.ascontiguousarray(array)
    code = {"float64": 0, "uint64": 1}[str(data.dtype)]
    name_b = name.encode()
    fh.write(struct.pack("<I", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<BI", code, data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<Q", d))
    payload = data.astype("<f8" if code == 0 else "<u8").tobytes()
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _read_sections(fh):
    sections = {}
    while True:
        head = fh.read(4)
        if not head:
            return sections
        if len(head) < 4:
            raise CheckpointError("truncated checkpoint section header")
        (name_len,) = struct.unpack("<I", head)
        name = fh.read(name_len).decode()
        code, ndim = struct.unpack("<BI", fh.read(5))
        shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
        (nbytes,) = struct.unpack("<Q", fh.read(8))
        payload = fh.read(nbytes)
        if len(payload) != nbytes:
            raise CheckpointError(f"truncated payload for section {name!r}")
        dtype = "<f8" if code == 0 else "<u8"
        sections[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return sections


def save_checkpoint(path, agent, ser_model, corpus, opt_agent=None, opt_rl=None,
                    schedule=None, position=(0, 0), rng=None):
    """Serialize theta, phi, optimizer states, schedule position and RNG state."""
    schedule = schedule or Schedule()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_section(fh, "agent_meta", np.array(
            [getattr(agent.hyper, f) for f in _AGENT_META_FIELDS], dtype=np.uint64))
        _write_section(fh, "ser_meta", np.array(
            [getattr(ser_model.hyper, f) for f in _SER_META_FIELDS], dtype=np.uint64))
        _write_section(fh, "theta", _flatten_params(agent))
        _write_section(fh, "phi", _flatten_params(ser_model))
        opt_flat = (_flatten_opt(opt_agent, agent) if opt_agent is not None
                    else np.array([0.0]))
        _write_section(fh, "opt_agent", opt_flat)
        rl_flat = (_flatten_opt(opt_rl, agent) if opt_rl is not None
                   else np.array([0.0]))
        _write_section(fh, "opt_rl", rl_flat)
        _write_section(fh, "schedule", np.array([
            schedule.base_lr, float(schedule.decay_start), schedule.floor_lr,
            float(schedule.pretrain_steps), float(schedule.iterative_epochs),
            float(schedule.batch_size), float(position[0]), float(position[1])]))
        _write_section(fh, "rng", _rng_state_to_words(rng)
                       if rng is not None else np.zeros(6, dtype=np.uint64))
        _write_section(fh, "corpus_hash", corpus_digest(corpus))


def load_checkpoint(path, corpus=None):
    """Restore models and training state; verifies the corpus hash when a
    corpus is supplied. Returns a dict."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}; not a checkpoint or wrong version")
        sections = _read_sections(fh)
    for required in ("agent_meta", "ser_meta", "theta", "phi", "opt_agent",
                     "opt_rl", "schedule", "rng", "corpus_hash"):
        if required not in sections:
            raise CheckpointError(f"{path}: missing section {required!r}")
    if corpus is not None and not np.array_equal(sections["corpus_hash"],
                                                 corpus_digest(corpus)):
        raise CheckpointError(f"{path}: checkpoint was trained on a different corpus")

    agent_hyper = AgentHyper(**{f: int(v) for f, v in
                                zip(_AGENT_META_FIELDS, sections["agent_meta"])})
    ser_hyper = SerHyper(**{f: int(v) for f, v in
                            zip(_SER_META_FIELDS, sections["ser_meta"])})
    agent = AgentModel(agent_hyper)
    ser_model = SerModel(ser_hyper)
    _load_params(agent, sections["theta"])
    _load_params(ser_model, sections["phi"])
    opt = AdamState()
    _load_opt(opt, agent, sections["opt_agent"])
    opt_rl = AdamState()
    _load_opt(opt_rl, agent, sections["opt_rl"])
    sch = sections["schedule"]
    schedule = Schedule(base_lr=sch[0], decay_start=int(sch[1]), floor_lr=sch[2],
                        pretrain_steps=int(sch[3]), iterative_epochs=int(sch[4]),
                        batch_size=int(sch[5]))
    return {
        "agent": agent,
        "ser": ser_model,
        "opt_agent": opt,
        "opt_rl": opt_rl,
        "schedule": schedule,
        "position": (int(sch[6]), int(sch[7])),
        "rng": _rng_from_words(sections["rng"]),
        "corpus_hash": sections["corpus_hash"],
    }


def resume_iterative_state(loaded, seed=0):
    """Rebuild an IterativeState from a loaded checkpoint dict."""
    state = IterativeState(seed)
    state.opt = loaded["opt_agent"]
    state.opt_rl = loaded["opt_rl"]
    state.step, state.epoch = loaded["position"]
    state.rng = loaded["rng"]
    return state
