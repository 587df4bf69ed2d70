"""Command-line entry point.

Subcommands chain through files in the output directory: ``gen-data``
writes the corpus, ``pretrain-ser`` the frozen classifier checkpoint,
``pretrain-agent`` the MSE-pretrained generator, ``train`` the final
generator for one regime, ``eval`` the evaluation report. ``synth``
renders one utterance and ``oracle-check`` runs the standalone
verification suites.

Every run writes a resolved-config snapshot next to its outputs so any
artifact can be reproduced from the snapshot alone.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .agent import AgentHyper, AgentModel, synthesize
from .corpus import (CorpusSpec, generate_corpus, load_corpus, save_corpus,
                     _round9)
from .evaluate import evaluation_report, save_report
from .optim import AdamState, Schedule
from .rl import RewardConfig, DiscreteToyPolicy, estimator_bias_test
from .ser import SerHyper, SerModel, pretrain_ser
from .trainer import (IterativeState, iterative_train, load_checkpoint,
                      pretrain_agent, save_checkpoint)

log = logging.getLogger("ietts")


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    agent: AgentHyper = field(default_factory=AgentHyper)
    ser: SerHyper = field(default_factory=SerHyper)
    reward: RewardConfig = field(default_factory=RewardConfig)
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0
    regime: str = "iterative"
    baseline: bool = False  # moving-average reward baseline for the RL update
    out: str = "runs"


# config keys map dotted paths onto dataclass fields; "reward.lambda" is
# accepted as an alias for the threshold since "lambda" reads better in a
# config file than in Python
_ALIASES = {"reward.lambda": "reward.threshold"}
_SECTIONS = ("corpus", "agent", "ser", "reward", "schedule")


def _coerce(text, current):
    if isinstance(current, bool):
        return text.strip().lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text.strip()


class ConfigError(ValueError):
    pass


def parse_config(path):
    """Flat ``key = value`` lines with dotted section prefixes."""
    cfg = RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    for ln, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got {raw.rstrip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = _ALIASES.get(key, key)
        try:
            cfg = _assign(cfg, key, value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{path}:{ln}: bad value for {key!r}: {exc}") from exc
        except KeyError as exc:
            raise ConfigError(f"{path}:{ln}: unknown key {key!r}") from exc
    return cfg


def _assign(cfg, key, value):
    if key in ("seed", "regime", "baseline", "out"):
        current = getattr(cfg, key)
        return replace(cfg, **{key: _coerce(value, current)})
    parts = key.split(".")
    if parts[0] not in _SECTIONS:
        raise KeyError(key)
    section = getattr(cfg, parts[0])
    if parts[0] == "corpus" and parts[1] == "counts":
        if len(parts) != 3 or parts[2] not in section.counts:
            raise KeyError(key)
        counts = dict(section.counts)
        counts[parts[2]] = int(value)
        return replace(cfg, corpus=replace(section, counts=counts))
    if len(parts) != 2 or parts[1] not in {f.name for f in fields(section)}:
        raise KeyError(key)
    current = getattr(section, parts[1])
    return replace(cfg, **{parts[0]: replace(section, **{parts[1]: _coerce(value, current)})})


def resolved_lines(cfg):
    out = [f"seed = {cfg.seed}", f"regime = {cfg.regime}",
           f"baseline = {str(cfg.baseline).lower()}", f"out = {cfg.out}"]
    for name in _SECTIONS:
        section = getattr(cfg, name)
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, dict):
                for k in sorted(value):
                    out.append(f"{name}.{f.name}.{k} = {value[k]}")
            else:
                out.append(f"{name}.{f.name} = {value}")
    return out


def write_snapshot(cfg, out_dir, command):
    path = os.path.join(out_dir, f"{command}.resolved.cfg")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(resolved_lines(cfg)) + "\n")
    return path


def _resolve(args, command):
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "regime", None):
        cfg = replace(cfg, regime=args.regime)
    if args.out:
        cfg = replace(cfg, out=args.out)
    # the single run seed drives every substream, including corpus noise
    cfg = replace(cfg, corpus=replace(cfg.corpus, seed=cfg.seed))
    os.makedirs(cfg.out, exist_ok=True)
    write_snapshot(cfg, cfg.out, command)
    return cfg


def _corpus_path(cfg):
    return os.path.join(cfg.out, "corpus.txt")


def _metrics_writer(path):
    fh = open(path, "w", encoding="utf-8")

    def write(entry):
        fh.write(json.dumps(entry) + "\n")
        fh.flush()
        log.info("%s", entry)
    return write, fh


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args):
    cfg = _resolve(args, "gen-data")
    corpus = generate_corpus(cfg.corpus)
    save_corpus(corpus, _corpus_path(cfg))
    log.info("wrote %s (%d train / %d val / %d test)", _corpus_path(cfg),
             len(corpus.train), len(corpus.val), len(corpus.test))
    return 0


def cmd_pretrain_ser(args):
    cfg = _resolve(args, "pretrain-ser")
    corpus = load_corpus(_corpus_path(cfg))
    write, fh = _metrics_writer(os.path.join(cfg.out, "ser_metrics.jsonl"))
    with fh:
        ser_model, report = pretrain_ser(corpus, hyper=cfg.ser,
                                         schedule=cfg.schedule, seed=cfg.seed,
                                         log=write)
    # the classifier ships with an untrained generator so one checkpoint
    # format serves the whole pipeline
    agent = AgentModel(cfg.agent, rng=np.random.default_rng(
        np.random.SeedSequence([cfg.seed, 0xA9E])))
    save_checkpoint(os.path.join(cfg.out, "ser.ckpt"), agent, ser_model,
                    corpus, schedule=cfg.schedule)
    with open(os.path.join(cfg.out, "ser_report.json"), "w", encoding="utf-8") as rf:
        json.dump(report, rf, indent=2)
        rf.write("\n")
    log.info("classifier test accuracy %.3f", report["test_acc"])
    return 0


def cmd_pretrain_agent(args):
    cfg = _resolve(args, "pretrain-agent")
    corpus = load_corpus(_corpus_path(cfg))
    ckpt = args.ckpt or os.path.join(cfg.out, "ser.ckpt")
    loaded = load_checkpoint(ckpt, corpus=corpus)
    agent, ser_model = loaded["agent"], loaded["ser"]
    write, fh = _metrics_writer(os.path.join(cfg.out, "pretrain_metrics.jsonl"))
    with fh:
        pretrain_agent(agent, corpus, cfg.schedule, seed=cfg.seed, log=write)
    save_checkpoint(os.path.join(cfg.out, "pretrained.ckpt"), agent, ser_model,
                    corpus, schedule=cfg.schedule,
                    position=(cfg.schedule.pretrain_steps, 0))
    log.info("wrote %s", os.path.join(cfg.out, "pretrained.ckpt"))
    return 0


def cmd_train(args):
    cfg = _resolve(args, "train")
    corpus = load_corpus(_corpus_path(cfg))
    ckpt = args.ckpt or os.path.join(cfg.out, "pretrained.ckpt")
    loaded = load_checkpoint(ckpt, corpus=corpus)
    agent, ser_model = loaded["agent"], loaded["ser"]
    state = IterativeState(cfg.seed, start_step=cfg.schedule.pretrain_steps)
    out_ckpt = os.path.join(cfg.out, f"trained_{cfg.regime}.ckpt")

    def checkpoint_fn(st):
        save_checkpoint(out_ckpt, agent, ser_model, corpus, opt_agent=st.opt,
                        opt_rl=st.opt_rl, schedule=cfg.schedule,
                        position=(st.step, st.epoch), rng=st.rng)

    write, fh = _metrics_writer(os.path.join(cfg.out, f"train_{cfg.regime}_metrics.jsonl"))
    with fh:
        iterative_train(agent, ser_model, corpus, cfg.reward, cfg.schedule,
                        seed=cfg.seed, state=state, regime=cfg.regime,
                        use_baseline=cfg.baseline, log=write,
                        checkpoint_fn=checkpoint_fn)
    checkpoint_fn(state)
    log.info("wrote %s after %d epochs", out_ckpt, state.epoch)
    return 0


def cmd_eval(args):
    cfg = _resolve(args, "eval")
    corpus = load_corpus(_corpus_path(cfg))
    ckpt = args.ckpt or os.path.join(cfg.out, f"trained_{cfg.regime}.ckpt")
    loaded = load_checkpoint(ckpt, corpus=corpus)
    report = evaluation_report(loaded["agent"], loaded["ser"], corpus.test)
    stem = os.path.splitext(os.path.basename(ckpt))[0]
    path = os.path.join(cfg.out, f"eval_{stem}.json")
    save_report(report, path, csv_path=os.path.join(cfg.out, f"eval_{stem}_confusion.csv"))
    log.info("average accuracy %.3f -> %s", report["average_accuracy"], path)
    return 0


def cmd_synth(args):
    cfg = _resolve(args, "synth")
    if args.ckpt is None:
        raise ConfigError("synth requires --ckpt")
    loaded = load_checkpoint(args.ckpt)
    agent = loaded["agent"]
    try:
        x = np.array([int(t) for t in args.text.split(",")], dtype=np.int64)
    except ValueError as exc:
        raise ConfigError(f"--text must be comma-separated ints: {exc}") from exc
    if not len(x) or x.min() < 0 or x.max() >= agent.hyper.vocab:
        raise ConfigError(f"--text symbols must lie in [0, {agent.hyper.vocab})")
    e_total = agent.hyper.emotions
    if not 0 <= args.emotion < e_total:
        raise ConfigError(f"--emotion must lie in [0, {e_total})")
    y = _round9(synthesize(agent, x, np.eye(e_total)[args.emotion]))
    # emit a one-utterance file in the corpus format so the load routines
    # round-trip it
    from .corpus import Corpus, CorpusMeta, Utterance
    u = Utterance(x=x, y=y, l=args.emotion)
    # the loader requires every split, so the utterance fills all three
    single = Corpus(train=[u], val=[u], test=[u],
                    meta=CorpusMeta(vocab=agent.hyper.vocab,
                                    channels=agent.hyper.channels,
                                    emotions=e_total, seed=cfg.seed))
    path = os.path.join(cfg.out, "synth.txt")
    save_corpus(single, path)
    log.info("wrote %d frames to %s", len(y), path)
    return 0


def cmd_oracle_check(args):
    cfg = _resolve(args, "oracle-check")
    from . import gradcheck
    failures = []
    results = gradcheck.run_all(trials=20, seed=cfg.seed)
    for name, worst in sorted(results.items()):
        status = "ok" if worst <= 1e-4 else "FAIL"
        print(f"gradcheck {name:24s} {worst:.3e} {status}")
        if worst > 1e-4:
            failures.append(f"gradcheck:{name}")
    rng = np.random.default_rng(cfg.seed)
    for trial in range(3):
        policy = DiscreteToyPolicy(rng.standard_normal((2, 3)))
        report = estimator_bias_test(policy, lambda s: float(s.sum()),
                                     n_samples=100_000, seed=cfg.seed + trial)
        status = "ok" if report["max_sigmas"] <= 3.0 else "FAIL"
        print(f"estimator bias trial {trial}: max sigmas {report['max_sigmas']:.2f} {status}")
        if report["max_sigmas"] > 3.0:
            failures.append(f"bias:{trial}")
    if failures:
        print("failed:", ", ".join(failures))
        return 1
    print("all oracle checks passed")
    return 0


# ------------------------------------------------------------------- dispatch

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-ser": cmd_pretrain_ser,
    "pretrain-agent": cmd_pretrain_agent,
    "train": cmd_train,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "oracle-check": cmd_oracle_check,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ietts")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--ckpt", default=None)
        if name == "train" or name == "eval":
            p.add_argument("--regime", choices=("mse-only", "iterative"),
                           default=None)
        if name == "synth":
            p.add_argument("--emotion", type=int, required=True)
            p.add_argument("--text", required=True)
    return parser


def _setup_logging():
    level = {"quiet": logging.WARNING, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("IETTS_LOG", "info"))
    if level is None:
        level = logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")


def command_dispatch(argv):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(command_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
