"""Synthetic label-conditioned sequence corpus.

Each utterance pairs a random symbol sequence with a feature trajectory
whose shape depends on the symbols and whose style depends on the label:
a label-specific slope on channel 0, a label-specific sinusoid frequency
on channel 1, and a label-specific gain on the remaining channels. The
per-label property orderings use three different coprime strides so that
no pair of labels is close in every property at once.

Feature values are rounded to 9 significant digits at generation time so
that the text serialization round-trips bit-exactly.
"""

from dataclasses import dataclass, field

import numpy as np

PHI = 2.399963229728653  # golden angle; spreads base embeddings over phases


class CorpusError(ValueError):
    pass


@dataclass
class CorpusSpec:
    vocab: int = 16
    channels: int = 8
    emotions: int = 5
    counts: dict = field(default_factory=lambda: {"train": 60, "val": 10, "test": 10})
    seed: int = 0
    noise: float = 0.1
    frames_per_symbol: int = 4
    min_text_len: int = 6
    max_text_len: int = 12


@dataclass
class Utterance:
    x: np.ndarray  # (T_x,) int64 symbol ids
    y: np.ndarray  # (T, C) float64 feature frames
    l: int         # emotion id in [0, E)

    def __eq__(self, other):
        return (np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y)
                and self.l == other.l)


@dataclass
class CorpusMeta:
    vocab: int
    channels: int
    emotions: int
    seed: int
    noise: float = float("nan")  # not stored in the file format


@dataclass
class Corpus:
    train: list
    val: list
    test: list
    meta: CorpusMeta

    def split(self, name):
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def __eq__(self, other):
        m, o = self.meta, other.meta
        return ((m.vocab, m.channels, m.emotions, m.seed)
                == (o.vocab, o.channels, o.emotions, o.seed)
                and self.train == other.train
                and self.val == other.val
                and self.test == other.test)


def _round9(a):
    """Round to 9 significant digits (the serialization precision)."""
    out = np.array([float(format(v, ".9g")) for v in a.ravel()])
    return out.reshape(a.shape)


def _stride(e, start):
    s = start
    while np.gcd(s, e) != 1:
        s += 1
    return s


def label_modulations(e_total):
    """Per-label (slope, frequency, gain) tables."""
    if e_total < 2:
        raise CorpusError(f"need at least 2 emotion categories, got {e_total}")
    idx = np.arange(e_total)
    centered = (2 * idx - (e_total - 1)) / max(e_total - 1, 1)
    s2 = _stride(e_total, 2)
    s3 = _stride(e_total, 3)
    slope = 0.12 * centered
    freq = 0.25 + 0.22 * ((s2 * idx) % e_total)
    gain = 1.0 + 0.45 * centered[(s3 * idx) % e_total]
    return slope, freq, gain


def base_trajectory(x, channels, frames_per_symbol):
    """Deterministic per-symbol embedding, linearly interpolated over time."""
    chans = np.arange(channels)
    anchors = 0.8 * np.sin(PHI * np.outer(x + 1, chans + 1))  # (T_x, C)
    t_total = len(x) * frames_per_symbol
    t = np.arange(t_total)
    centers = np.arange(len(x)) * frames_per_symbol + (frames_per_symbol - 1) / 2.0
    traj = np.empty((t_total, channels))
    for c in range(channels):
        traj[:, c] = np.interp(t, centers, anchors[:, c])
    return traj


def render_features(x, label, spec, rng=None):
    """Apply the synthesis rule for one utterance; rng adds Gaussian noise."""
    slope, freq, gain = label_modulations(spec.emotions)
    y = base_trajectory(x, spec.channels, spec.frames_per_symbol)
    t = np.arange(y.shape[0])
    y[:, 0] += slope[label] * t
    y[:, 1] += 0.7 * np.sin(freq[label] * t)
    if spec.channels > 2:
        y[:, 2:] *= gain[label]
    if rng is not None and spec.noise > 0:
        y += rng.normal(0.0, spec.noise, size=y.shape)
    return _round9(y)


def generate_corpus(spec):
    """Pure function of the spec (seed included); same spec, same corpus."""
    if spec.emotions < 2:
        raise CorpusError(f"need at least 2 emotion categories, got {spec.emotions}")
    if spec.vocab < 2:
        raise CorpusError(f"need a vocabulary of at least 2 symbols, got {spec.vocab}")
    if spec.noise < 0:
        raise CorpusError(f"noise level must be >= 0, got {spec.noise}")
    for name, n in spec.counts.items():
        if n < 1:
            raise CorpusError(f"per-emotion count for split {name!r} must be >= 1, got {n}")

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0]))
    seen = set()
    splits = {}
    for split_name in ("train", "val", "test"):
        items = []
        for label in range(spec.emotions):
            for _ in range(spec.counts[split_name]):
                while True:
                    length = rng.integers(spec.min_text_len, spec.max_text_len + 1)
                    x = rng.integers(0, spec.vocab, size=length)
                    key = (tuple(x.tolist()), label)
                    if key not in seen:
                        seen.add(key)
                        break
                y = render_features(x, label, spec, rng=rng)
                items.append(Utterance(x=x.astype(np.int64), y=y, l=label))
        splits[split_name] = items
    meta = CorpusMeta(spec.vocab, spec.channels, spec.emotions, spec.seed, spec.noise)
    return Corpus(splits["train"], splits["val"], splits["test"], meta)


# -------------------------------------------------------------- serialization

def _format_frame(frame):
    return ",".join(format(v, ".9g") for v in frame)


def save_corpus(corpus, path):
    m = corpus.meta
    lines = [f"#corpus V={m.vocab} C={m.channels} E={m.emotions} seed={m.seed}"]
    for split_name in ("train", "val", "test"):
        lines.append(f"#split {split_name}")
        for u in corpus.split(split_name):
            x = ",".join(str(int(v)) for v in u.x)
            y = ";".join(_format_frame(f) for f in u.y)
            lines.append(f"x={x}|l={u.l}|y={y}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_corpus(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#corpus "):
        raise CorpusError(f"{path}: line 1: missing '#corpus' header")
    header = {}
    for tok in lines[0].split()[1:]:
        key, _, val = tok.partition("=")
        header[key] = val
    try:
        vocab = int(header["V"])
        channels = int(header["C"])
        emotions = int(header["E"])
        seed = int(header["seed"])
    except (KeyError, ValueError):
        raise CorpusError(f"{path}: line 1: malformed header fields in {lines[0]!r}")

    splits = {"train": [], "val": [], "test": []}
    current = None
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#split "):
            name = line[len("#split "):].strip()
            if name not in splits:
                raise CorpusError(f"{path}: line {ln}: unknown split {name!r}")
            current = name
            continue
        if current is None:
            raise CorpusError(f"{path}: line {ln}: record before any '#split' marker")
        try:
            xs, ls, ys = line.split("|")
            if not (xs.startswith("x=") and ls.startswith("l=") and ys.startswith("y=")):
                raise ValueError
            x = np.array([int(v) for v in xs[2:].split(",")], dtype=np.int64)
            label = int(ls[2:])
            frames = [[float(v) for v in frame.split(",")] for frame in ys[2:].split(";")]
        except ValueError:
            raise CorpusError(f"{path}: line {ln}: malformed record")
        for row, frame in enumerate(frames):
            if len(frame) != channels:
                raise CorpusError(
                    f"{path}: line {ln}: frame {row} has {len(frame)} channels, header says C={channels}")
        if x.size and (x.min() < 0 or x.max() >= vocab):
            raise CorpusError(f"{path}: line {ln}: symbol id out of range for V={vocab}")
        if not 0 <= label < emotions:
            raise CorpusError(f"{path}: line {ln}: label {label} out of range for E={emotions}")
        splits[current].append(Utterance(x=x, y=np.array(frames), l=label))
    for name, items in splits.items():
        if not items:
            raise CorpusError(f"{path}: split {name!r} missing or empty (truncated file?)")
    meta = CorpusMeta(vocab, channels, emotions, seed)
    return Corpus(splits["train"], splits["val"], splits["test"], meta)
