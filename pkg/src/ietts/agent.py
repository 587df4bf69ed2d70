"""The sequence generator: text encoder, style-token reference encoder and
a monotonic mixture-attention decoder with a stochastic Gaussian output head.

The decoder emits ``reduction`` frames of channel means per step. In sampled
mode each frame value is drawn from Normal(mean, sigma^2) with a single
global learnable log-sigma, and the sample's log-probability is accumulated
on the tape; sampled frames are fed back as constants (free running). In
mean mode the means themselves are emitted. MSE training is teacher-forced.

All public single-utterance operations wrap one batched code path, so
padded batches and per-sample runs agree exactly.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeError


@dataclass
class AgentHyper:
    vocab: int = 16
    channels: int = 8
    emotions: int = 5
    embed: int = 16
    enc_hidden: int = 16   # per direction
    style_dim: int = 16
    ref_conv: int = 16
    ref_hidden: int = 16
    dec_hidden: int = 32
    prenet: int = 16
    mixtures: int = 2
    reduction: int = 2
    kernel: int = 3
    max_frames: int = 192  # 4 * frames_per_symbol * max_text_len
    sigma_init: float = 0.3


@dataclass
class EmotionEmbedding:
    weights: object  # Node (E,), on the simplex
    vector: object   # Node (style_dim,)


@dataclass
class PolicySample:
    y: np.ndarray          # (T, C) generated frames
    log_prob: object       # scalar Node for mode="sampled", else None
    stop_frame: int
    mode: str              # "sampled" | "mean"
    hit_max_frames: bool = False
    kappa_history: np.ndarray = None  # (steps, mixtures) attention means


class AgentModel:
    """Generator parameters plus hyperparameters (the theta of the policy)."""

    def __init__(self, hyper, rng=None):
        self.hyper = hyper
        rng = rng if rng is not None else np.random.default_rng(0)
        h = hyper
        ctx_width = 2 * h.enc_hidden
        dec_in = h.prenet + ctx_width + h.style_dim
        self.params = {
            "embed": nn.init_parameters(nn.LayerSpec("embedding", h.vocab, h.embed), rng),
            "enc": nn.init_parameters(
                nn.LayerSpec("recurrent", h.embed, h.enc_hidden, direction="bi"), rng),
            "ref_conv": nn.init_parameters(
                nn.LayerSpec("conv1d", h.channels, h.ref_conv, kernel=h.kernel), rng),
            "ref_rnn": nn.init_parameters(
                nn.LayerSpec("recurrent", h.ref_conv, h.ref_hidden), rng),
            "ref_proj": nn.init_parameters(
                nn.LayerSpec("linear", h.ref_hidden, h.style_dim), rng),
            "tokens": {"bank": nn.glorot(rng, (h.emotions, h.style_dim),
                                         h.emotions, h.style_dim)},
            "prenet": nn.init_parameters(nn.LayerSpec("linear", h.channels, h.prenet), rng),
            "dec_rnn": nn.init_parameters(
                nn.LayerSpec("recurrent", dec_in, h.dec_hidden), rng),
            "att_proj": nn.init_parameters(
                nn.LayerSpec("linear", h.dec_hidden, 3 * h.mixtures), rng),
            "frame_out": nn.init_parameters(
                nn.LayerSpec("linear", h.dec_hidden + ctx_width,
                             h.reduction * h.channels), rng),
            "stop_out": nn.init_parameters(
                nn.LayerSpec("linear", h.dec_hidden + ctx_width, 1), rng),
            "log_sigma": {"value": ad.parameter(math.log(h.sigma_init))},
        }

    @property
    def tokens(self):
        return self.params["tokens"]["bank"]

    def named_parameters(self):
        return nn.collect(self.params)

    def checksum(self):
        digest = hashlib.sha256()
        for name, p in self.named_parameters():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()


# ------------------------------------------------------------------- encoders

def _pad_tokens(xs):
    lengths = [len(x) for x in xs]
    tmax = max(lengths)
    ids = np.zeros((len(xs), tmax), dtype=np.int64)
    mask = np.zeros((len(xs), tmax))
    for i, x in enumerate(xs):
        ids[i, :len(x)] = x
        mask[i, :len(x)] = 1.0
    return ids, mask


def encode_batch(model, xs):
    """Embed + bidirectional recurrence. Returns (memory (B,Tx,2H), mask)."""
    for x in xs:
        if len(x) == 0:
            raise ShapeError("encode_text: empty symbol sequence")
        x = np.asarray(x)
        if x.min() < 0 or x.max() >= model.hyper.vocab:
            raise ShapeError(f"encode_text: symbol id out of range for vocabulary {model.hyper.vocab}")
    ids, mask = _pad_tokens(xs)
    emb = model.params["embed"]["table"][ids]
    hs, _ = nn.bigru_run(model.params["enc"], emb, mask=mask)
    return nn.stack_time(hs), mask


def encode_text(model, x):
    """Encoder memory (T_x, 2*enc_hidden) for one symbol sequence."""
    memory, _ = encode_batch(model, [np.asarray(x, dtype=np.int64)])
    t = len(x)
    return ad.reshape(memory, (t, 2 * model.hyper.enc_hidden))


def ref_embed_batch(model, ys):
    """Style-token attention for reference features.

    Returns (weights Node (B,E), embedding Node (B,style_dim))."""
    h = model.hyper
    lengths = [y.shape[0] for y in ys]
    tmax = max(lengths)
    batch = np.zeros((len(ys), tmax, h.channels))
    mask = np.zeros((len(ys), tmax))
    for i, y in enumerate(ys):
        if y.shape[1] != h.channels:
            raise ShapeError(f"reference has {y.shape[1]} channels, agent expects {h.channels}")
        if y.shape[0] < h.kernel:
            raise ShapeError(f"reference of {y.shape[0]} frames shorter than conv kernel {h.kernel}")
        batch[i, :len(y)] = y
        mask[i, :len(y)] = 1.0
    conv = ad.relu(ad.conv1d(ad.constant(batch), model.params["ref_conv"]["w"],
                             model.params["ref_conv"]["b"]))
    _, final = nn.gru_run(model.params["ref_rnn"], conv, mask=mask)
    query = final @ model.params["ref_proj"]["w"] + model.params["ref_proj"]["b"]
    scores = query @ ad.transpose(model.tokens, (1, 0))
    weights = ad.softmax(scores)
    emb = weights @ model.tokens
    return weights, emb


def reference_to_embedding(model, y_ref):
    weights, emb = ref_embed_batch(model, [np.asarray(y_ref, dtype=np.float64)])
    e, d = model.hyper.emotions, model.hyper.style_dim
    return EmotionEmbedding(weights=ad.reshape(weights, (e,)),
                            vector=ad.reshape(emb, (d,)))


def embedding_from_weights(model, weights):
    """Manual style control: embedding = weights^T tokens, bypassing the
    reference encoder."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (model.hyper.emotions,):
        raise ValueError(f"expected {model.hyper.emotions} token weights, got shape {w.shape}")
    if (w < -1e-6).any() or abs(w.sum() - 1.0) > 1e-6:
        raise ValueError(f"token weights must lie on the simplex, got {w} (sum {w.sum()})")
    return ad.constant(w.reshape(1, -1)) @ model.tokens  # (1, style_dim)


# -------------------------------------------------------------------- decoder

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class BatchDecode:
    frames: np.ndarray        # (B, S*r, C) generated or predicted values
    mean_nodes: list          # per-step (B, r*C) Nodes (teacher/mean modes)
    stop_logits: list         # per-step (B, 1) Nodes
    log_prob: object          # Node (B,) for sampled mode, else None
    stop_frames: np.ndarray   # (B,) frames at which each sample stopped
    hit_max: np.ndarray       # (B,) bool
    kappa_history: np.ndarray  # (S, B, M)


def decode_batch(model, memory, mask_x, emb, mode, teacher=None, rng=None,
                 max_frames=None):
    """One decoder run over a batch.

    memory: Node (B, Tx, 2H); mask_x: (B, Tx) float array; emb: Node (B, D_s).
    mode "teacher" consumes ``teacher`` (list of (T_i, C) arrays) and runs
    ceil(max T_i / r) steps; modes "sampled" and "mean" run free until every
    sample's stop probability exceeds 0.5 or max_frames is reached.
    """
    h = model.hyper
    B, tx, ctx_width = memory.shape
    r, C = h.reduction, h.channels
    max_frames = max_frames or h.max_frames
    p = model.params

    if mode == "teacher":
        if teacher is None:
            raise ValueError("teacher-forced decode requires a teacher sequence")
        t_lens = np.array([t.shape[0] for t in teacher])
        steps = int(np.ceil(t_lens.max() / r))
        teach = np.zeros((B, steps * r, C))
        for i, t in enumerate(teacher):
            teach[i, :len(t)] = t
    elif mode in ("sampled", "mean"):
        steps = int(np.ceil(max_frames / r))
        if mode == "sampled" and rng is None:
            raise ValueError("sampled decode requires an rng")
    else:
        raise ValueError(f"unknown decode mode: {mode!r}")

    sigma2 = ad.exp(2.0 * p["log_sigma"]["value"])   # scalar Node
    log_norm = 2.0 * p["log_sigma"]["value"] + LOG_2PI  # log(2 pi sigma^2)

    hstate = ad.constant(np.zeros((B, h.dec_hidden)))
    ctx = ad.constant(np.zeros((B, ctx_width)))
    kappa = ad.constant(np.zeros((B, h.mixtures)))
    positions = np.arange(tx, dtype=np.float64).reshape(1, 1, tx)
    prev = np.zeros((B, C))
    alive = np.ones(B)
    stop_frames = np.full(B, -1, dtype=np.int64)
    log_prob = ad.constant(np.zeros(B)) if mode == "sampled" else None

    frames = []
    mean_nodes = []
    stop_logits = []
    kappas = []

    for s in range(steps):
        pre = ad.relu(ad.constant(prev) @ p["prenet"]["w"] + p["prenet"]["b"])
        inp = ad.concat([pre, ctx, emb], axis=-1)
        hstate = nn.gru_step(p["dec_rnn"], inp, hstate)

        a = hstate @ p["att_proj"]["w"] + p["att_proj"]["b"]
        m = h.mixtures
        w = ad.exp(a[:, :m])
        kappa = kappa + ad.softplus(a[:, m:2 * m])
        beta = ad.exp(a[:, 2 * m:]) + 1e-4
        diff = ad.reshape(kappa, (B, m, 1)) - positions
        energy = ad.nsum(ad.reshape(w, (B, m, 1))
                         * ad.exp(-ad.reshape(beta, (B, m, 1)) * diff * diff),
                         axis=1)                      # (B, Tx)
        alpha = energy * mask_x
        alpha = alpha / (ad.nsum(alpha, axis=-1, keepdims=True) + 1e-8)
        ctx = ad.nsum(ad.reshape(alpha, (B, tx, 1)) * memory, axis=1)
        kappas.append(kappa.data.copy())

        hc = ad.concat([hstate, ctx], axis=-1)
        mu = hc @ p["frame_out"]["w"] + p["frame_out"]["b"]  # (B, r*C)
        if not np.isfinite(mu.data).all():
            raise FloatingPointError(f"non-finite decoder means at step {s}")
        stop_logit = hc @ p["stop_out"]["w"] + p["stop_out"]["b"]
        mean_nodes.append(mu)
        stop_logits.append(stop_logit)

        if mode == "teacher":
            out = teach[:, s * r:(s + 1) * r, :].reshape(B, r * C)
        elif mode == "mean":
            out = mu.data.copy()
        else:
            eps = rng.standard_normal((B, r * C))
            out = mu.data + math.sqrt(float(sigma2.data)) * eps
            d = ad.constant(out) - mu
            per = -ad.nsum(d * d, axis=-1) / (2.0 * sigma2) - (r * C / 2.0) * log_norm
            log_prob = log_prob + ad.constant(alive) * per
        frames.append(out)
        prev = out.reshape(B, r, C)[:, -1, :]

        if mode in ("sampled", "mean") and (s + 1) * r >= h.kernel:
            # stop gate disabled below one conv kernel of frames, so every
            # generated sequence is classifiable
            stop_p = 1.0 / (1.0 + np.exp(-stop_logit.data[:, 0]))
            newly = (alive > 0) & (stop_p > 0.5)
            stop_frames[newly] = (s + 1) * r
            alive = alive * (~newly)
            if not alive.any():
                break

    hit_max = stop_frames < 0
    stop_frames[hit_max] = len(frames) * r
    if mode == "teacher":
        stop_frames = t_lens.copy()
        hit_max = np.zeros(B, dtype=bool)
    out_frames = np.stack(frames, axis=1).reshape(B, -1, C)
    return BatchDecode(frames=out_frames, mean_nodes=mean_nodes,
                       stop_logits=stop_logits, log_prob=log_prob,
                       stop_frames=stop_frames, hit_max=hit_max,
                       kappa_history=np.stack(kappas))


def decode(model, memory, emb, mode, teacher=None, rng=None, max_frames=None):
    """Single-utterance decode; wraps the batched path with B=1."""
    tx = memory.shape[0]
    memory_b = ad.reshape(memory, (1,) + tuple(memory.shape))
    if isinstance(emb, EmotionEmbedding):
        emb = emb.vector
    emb_b = ad.reshape(emb, (1, -1))
    res = decode_batch(model, memory_b, np.ones((1, tx)), emb_b,
                       "teacher" if mode == "teacher" else mode,
                       teacher=[np.asarray(teacher)] if teacher is not None else None,
                       rng=rng, max_frames=max_frames)
    stop = int(res.stop_frames[0])
    log_prob = None
    if mode == "sampled":
        log_prob = ad.reshape(res.log_prob, (1,))[0]
    return PolicySample(y=res.frames[0, :stop], log_prob=log_prob,
                        stop_frame=stop, mode=mode,
                        hit_max_frames=bool(res.hit_max[0]),
                        kappa_history=res.kappa_history[:, 0, :])


def gaussian_log_prob_oracle(y, means, sigma):
    """Closed-form recomputation of a sample's log-probability (numpy only)."""
    d = np.asarray(y, dtype=np.float64).ravel() - np.asarray(means).ravel()
    n = d.size
    return float(-0.5 * n * (LOG_2PI + 2.0 * math.log(sigma))
                 - (d * d).sum() / (2.0 * sigma * sigma))


def synthesize(model, x, weights, max_frames=None):
    """Mean-mode decode with manually specified style-token weights."""
    emb = embedding_from_weights(model, weights)
    memory, mask = encode_batch(model, [np.asarray(x, dtype=np.int64)])
    res = decode_batch(model, memory, mask, emb, "mean", max_frames=max_frames)
    return res.frames[0, :int(res.stop_frames[0])]


# ----------------------------------------------------------------------- loss

def _bce_with_logits(logit, target):
    # -[t*log p + (1-t)*log(1-p)] = softplus(logit) - t*logit
    return ad.softplus(logit) - target * logit


def mse_loss_batch(model, utterances, y_refs=None):
    """Teacher-forced loss over a batch: masked MSE on predicted means plus
    stop-token binary cross-entropy. y_refs defaults to each utterance's own
    features (self-reference)."""
    h = model.hyper
    r, C = h.reduction, h.channels
    xs = [u.x for u in utterances]
    ys = [u.y for u in utterances]
    refs = y_refs if y_refs is not None else ys
    B = len(utterances)

    memory, mask_x = encode_batch(model, xs)
    _, emb = ref_embed_batch(model, refs)
    res = decode_batch(model, memory, mask_x, emb, "teacher", teacher=ys)

    steps = len(res.mean_nodes)
    t_lens = np.array([y.shape[0] for y in ys])
    frame_mask = np.zeros((B, steps * r))
    stop_target = np.zeros((B, steps))
    step_mask = np.zeros((B, steps))
    teach = np.zeros((B, steps * r, C))
    for i, y in enumerate(ys):
        frame_mask[i, :len(y)] = 1.0
        last = int(np.ceil(len(y) / r)) - 1
        stop_target[i, last] = 1.0
        step_mask[i, :last + 1] = 1.0
        teach[i, :len(y)] = y

    mu = ad.concat([ad.reshape(mn, (B, r, C)) for mn in res.mean_nodes], axis=1)
    d = (mu - ad.constant(teach)) * frame_mask.reshape(B, steps * r, 1)
    mse = ad.nsum(d * d) / float(frame_mask.sum() * C)

    logits = ad.concat(res.stop_logits, axis=1)  # (B, steps)
    bce = _bce_with_logits(logits, ad.constant(stop_target)) * step_mask
    stop_loss = ad.nsum(bce) / float(step_mask.sum())
    return mse + stop_loss, {"mse": None, "frames": res.frames}


def mse_loss(model, x, y, y_ref=None):
    """Scalar training loss for one utterance."""
    from .corpus import Utterance
    u = Utterance(x=np.asarray(x, dtype=np.int64), y=np.asarray(y, dtype=np.float64), l=0)
    loss, _ = mse_loss_batch(model, [u], y_refs=[np.asarray(y_ref if y_ref is not None else y)])
    return loss


def policy_rollouts(model, utterances, rng, max_frames=None):
    """Free-running sampled decodes conditioned on each utterance's own
    reference features; returns a list of PolicySample."""
    xs = [u.x for u in utterances]
    refs = [u.y for u in utterances]
    memory, mask_x = encode_batch(model, xs)
    _, emb = ref_embed_batch(model, refs)
    res = decode_batch(model, memory, mask_x, emb, "sampled", rng=rng,
                       max_frames=max_frames)
    samples = []
    for i in range(len(utterances)):
        stop = int(res.stop_frames[i])
        samples.append(PolicySample(
            y=res.frames[i, :stop], log_prob=res.log_prob[i],
            stop_frame=stop, mode="sampled",
            hit_max_frames=bool(res.hit_max[i]),
            kappa_history=res.kappa_history[:, i, :]))
    return samples
