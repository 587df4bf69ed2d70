"""Reward computation and the policy-gradient estimator.

The batch reward is the fraction of sampled sequences whose target-emotion
probability strictly exceeds the threshold. The surrogate loss is
-R * mean(log_prob); descending it ascends the sampled policy-gradient
estimate, with R entering as a constant (no gradient flows into the
classifier).

A tiny enumerable categorical policy certifies the estimator: the expected
reward and its gradient are computed exactly by enumeration, and the mean
of many single-sample REINFORCE draws must match within sampling error.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class RewardConfig:
    threshold: float = 0.5  # lambda
    samples: int = 20       # K

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.samples < 1:
            raise ValueError(f"sample count must be >= 1, got {self.samples}")


@dataclass
class RewardBatch:
    probs: np.ndarray  # (K,) per-sample target-emotion probabilities
    above: int         # N, strict-inequality count
    reward: float      # R = N / K


def compute_reward(probs, cfg):
    """Count p_i > threshold (strictly) over exactly cfg.samples values."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (cfg.samples,):
        raise ValueError(f"expected {cfg.samples} probabilities, got shape {probs.shape}")
    if (probs < 0).any() or (probs > 1).any():
        bad = probs[(probs < 0) | (probs > 1)][0]
        raise ValueError(f"probability {bad} outside [0, 1]")
    above = int(np.sum(probs > cfg.threshold))
    return RewardBatch(probs=probs, above=above, reward=above / cfg.samples)


def reinforce_surrogate(samples, reward):
    """Surrogate loss -R * mean(log_prob) over sampled rollouts.

    ``reward`` is a plain float; it multiplies the tape as a constant, so
    backward() populates generator gradients only through the log-probs.
    """
    if not samples:
        raise ValueError("need at least one policy sample")
    for s in samples:
        if s.mode != "sampled" or s.log_prob is None:
            raise ValueError("reinforce_surrogate requires sampled-mode rollouts with live log_prob")
    total = samples[0].log_prob
    for s in samples[1:]:
        total = total + s.log_prob
    return -float(reward) * total * (1.0 / len(samples))


# -------------------------------------------------------------- oracle policy

class DiscreteToyPolicy:
    """Per-position categorical policy over a small codebook; enumerable."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)  # (L, A)
        self.length, self.alphabet = self.logits.shape
        if self.length * self.alphabet > 64:
            raise ValueError("toy policy too large to enumerate")

    def probs(self):
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def sample(self, rng, n=1):
        p = self.probs()
        return np.stack([rng.choice(self.alphabet, size=n, p=p[i])
                         for i in range(self.length)], axis=1)  # (n, L)

    def log_prob(self, seq):
        p = self.probs()
        return float(np.sum(np.log(p[np.arange(self.length), seq])))

    def grad_log_prob(self, seq):
        """d log P / d logits: one-hot minus probabilities, per position."""
        p = self.probs()
        g = -p.copy()
        g[np.arange(self.length), seq] += 1.0
        return g


def exact_expected_reward(policy, reward_fn, h=1e-6):
    """Enumerate the outcome space; returns (value, gradient).

    The gradient is taken by central finite differences over the logits so
    it stays independent of the analytic score function it certifies.
    """
    if policy.alphabet ** policy.length > 4096:
        raise ValueError("outcome space too large to enumerate")

    def value_of(logits):
        pol = DiscreteToyPolicy(logits)
        p = pol.probs()
        total = 0.0
        for seq in itertools.product(range(pol.alphabet), repeat=pol.length):
            seq = np.array(seq)
            prob = float(np.prod(p[np.arange(pol.length), seq]))
            total += prob * reward_fn(seq)
        return total

    base = policy.logits
    value = value_of(base)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        lp, lm = base.copy(), base.copy()
        lp[idx] += h
        lm[idx] -= h
        grad[idx] = (value_of(lp) - value_of(lm)) / (2.0 * h)
    return value, grad


def estimator_bias_test(policy, reward_fn, n_samples, seed=0):
    """Average n_samples single-sample REINFORCE gradients and compare with
    the exact enumerated gradient, coordinate by coordinate."""
    rng = np.random.default_rng(seed)
    value, exact_grad = exact_expected_reward(policy, reward_fn)
    seqs = policy.sample(rng, n=n_samples)
    rewards = np.array([reward_fn(s) for s in seqs])
    draws = np.stack([r * policy.grad_log_prob(s) for r, s in zip(rewards, seqs)])
    mean = draws.mean(axis=0)
    stderr = draws.std(axis=0, ddof=1) / np.sqrt(n_samples)
    deviation = mean - exact_grad
    with np.errstate(divide="ignore", invalid="ignore"):
        sigmas = np.abs(deviation) / np.where(stderr > 0, stderr, np.inf)
    return {
        "value": value,
        "exact_grad": exact_grad,
        "estimate": mean,
        "stderr": stderr,
        "deviation": deviation,
        "max_sigmas": float(np.nanmax(sigmas)),
        "mean_reward": float(rewards.mean()),
    }
