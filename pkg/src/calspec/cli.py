"""Command-line entry point: ``calspec <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 I/O or parse error, 3 internal
invariant violation.  Every command accepts ``--config FILE`` with
``key = value`` lines (keys are option names, ``-`` or ``_``); flags given on
the command line win.  The effective configuration is echoed to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .analysis import LogFormatError, analyze_log, write_report
from .calibration import CalibrationConfig, calibrate
from .core import EngineInvariantError, Vocabulary
from .csd import CorrectionMemory, MemoryFormatError
from .harness import (DEFAULT_C_DRAFT, POLICY_NAMES, CostModel, compare_policies, format_rows,
                      make_policy, run_policy)
from .models import ModelFormatError, PerturbedDraft, load_model, read_corpus, train_ngram

EXIT_USAGE, EXIT_IO, EXIT_INVARIANT = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _tau(text):
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"tau must lie in (0, 1], got {text}")
    return v


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="calspec", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"calspec {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="key=value file; command-line flags take precedence")
        return sp

    sp = command("train", "train an additive-smoothed n-gram model")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--order", type=_positive_int, required=True)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--out", required=True)

    sp = command("perturb", "build a draft by swapping logit pairs of a base model")
    sp.add_argument("--base", required=True)
    sp.add_argument("--pairs", required=True,
                    help="comma-separated a:b pairs (symbols with --vocab, else ids)")
    sp.add_argument("--vocab")
    sp.add_argument("--strength", type=float, default=1.0)
    sp.add_argument("--sigma", type=_nonneg_float, default=0.0)
    sp.add_argument("--noise-seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    def model_args(sp, prompts_flag):
        sp.add_argument("--draft", required=True)
        sp.add_argument("--target", required=True)
        sp.add_argument("--vocab", required=True)
        sp.add_argument(prompts_flag, required=True)
        sp.add_argument("--gamma", type=_positive_int, default=6)
        sp.add_argument("--lam", type=_positive_int, default=6)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--max-tokens", type=_positive_int, default=64)
        sp.add_argument("--eos", help="symbol that ends generation")

    sp = command("calibrate", "populate a correction memory with standard speculative decoding")
    model_args(sp, "--corpus")
    sp.add_argument("--temperature", type=_nonneg_float, default=0.6)
    sp.add_argument("--capacity", type=_positive_int)
    sp.add_argument("--prompt-len", type=_positive_int,
                    help="truncate each corpus line to this many tokens (default: whole line)")
    sp.add_argument("--workers", type=_positive_int, default=1)
    sp.add_argument("--quiet", type=_bool, nargs="?", const=True, default=False)
    sp.add_argument("--out", required=True)

    sp = command("run", "generate from one prompt")
    model_args(sp, "--prompt")
    sp.add_argument("--mode", choices=POLICY_NAMES, default="csd")
    sp.add_argument("--temperature", type=_nonneg_float, default=0.0)
    sp.add_argument("--tau", type=_tau, help="gate threshold (default 0.01; 0.6 for lossy)")
    sp.add_argument("--memory", help="correction memory TSV (default: empty)")
    sp.add_argument("--save-memory", help="write the memory after online updates")
    sp.add_argument("--log", help="JSON-lines round log")
    sp.add_argument("--c-draft", type=float, default=DEFAULT_C_DRAFT)

    sp = command("bench", "compare decoding policies on a prompt set")
    model_args(sp, "--prompts")
    sp.add_argument("--policies", default="sd,csd")
    sp.add_argument("--seeds", type=_int_list, default=[0])
    sp.add_argument("--temperature", type=_nonneg_float, default=0.0)
    sp.add_argument("--tau", type=_tau)
    sp.add_argument("--memory")
    sp.add_argument("--prompt-len", type=_positive_int)
    sp.add_argument("--c-draft", type=float, default=DEFAULT_C_DRAFT)
    sp.add_argument("--workers", type=_positive_int, default=1)
    sp.add_argument("--format", choices=("tsv", "json"), default="tsv")
    sp.add_argument("--log-dir", help="write one JSON-lines log per policy and seed")
    sp.add_argument("--out", help="metrics table path (default: stdout)")

    sp = command("analyze", "rejection-pattern report from a round log")
    sp.add_argument("--log", required=True)
    sp.add_argument("--vocab")
    sp.add_argument("--head-fraction", type=float, default=0.2)
    sp.add_argument("--bins", type=_float_list, default=[-10, -8, -6, -4, -2, 0])
    sp.add_argument("--top", type=_positive_int, default=10)
    sp.add_argument("--out", required=True, help="output directory")

    sp = command("synth", "write the synthetic synonym-swap fixture files")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--vocab-size", type=_positive_int, default=200)
    sp.add_argument("--pairs", type=_positive_int, default=5)
    sp.add_argument("--train-docs", type=_positive_int, default=600)
    sp.add_argument("--calibration-prompts", type=_positive_int, default=200)
    sp.add_argument("--eval-prompts", type=_positive_int, default=100)
    sp.add_argument("--prompt-len", type=_positive_int, default=8)
    return p


def _read_config(path) -> dict[str, str]:
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


def _subparsers(parser):
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices


def _subparser(parser, name) -> argparse.ArgumentParser | None:
    return _subparsers(parser).get(name)


def parse_args(argv):
    parser = build_parser()
    # The config file must be applied before required flags are checked.
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    sub = _subparser(parser, command) if known.config and command else None
    if sub is not None:
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        try:
            cfg = _read_config(known.config)
        except OSError as exc:
            raise OSError(f"cannot read config {known.config}: {exc.strerror}") from None
        for key, text in cfg.items():
            act = actions.get(key)
            if act is None or key in ("config", "help"):
                raise UsageError(f"{known.config}: unknown option {key!r} for '{command}'")
            try:
                if act.choices is not None and text not in act.choices:
                    raise ValueError(f"choose from {', '.join(act.choices)}")
                defaults[key] = act.type(text) if act.type else text
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{known.config}: bad value for {key}: {exc}") from None
        for act in sub._actions:
            if act.required and act.dest in defaults:
                act.required = False
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    effective = {k: v for k, v in sorted(vars(args).items()) if k != "config"}
    print("calspec: effective config " + json.dumps(effective, default=str), file=sys.stderr)
    return args


def _models(args):
    vocab = Vocabulary.load(args.vocab)
    draft, target = load_model(args.draft), load_model(args.target)
    for name, m in (("draft", draft), ("target", target)):
        if m.vocab_size != vocab.size:
            raise UsageError(f"{name} model has vocab_size {m.vocab_size}, vocabulary has {vocab.size}")
    eos = vocab.id_of(args.eos) if args.eos else None
    return vocab, draft, target, eos


def _prompts(path, vocab, prompt_len):
    docs = read_corpus(path, vocab)
    return [d[:prompt_len] if prompt_len else d for d in docs]


def cmd_train(args):
    vocab = Vocabulary.load(args.vocab)
    model = train_ngram(read_corpus(args.corpus, vocab), args.order, args.alpha, vocab.size)
    model.save(args.out)
    print(f"wrote {args.out}: order {model.order}, {len(model.counts)} contexts", file=sys.stderr)


def cmd_perturb(args):
    base = load_model(args.base)
    vocab = Vocabulary.load(args.vocab) if args.vocab else None
    pairs = []
    for item in args.pairs.split(","):
        a, sep, b = item.strip().partition(":")
        if not sep:
            raise UsageError(f"bad pair {item!r}; expected a:b")
        pairs.append((vocab.id_of(a), vocab.id_of(b)) if vocab else (int(a), int(b)))
    out = Path(args.out)
    rel = os.path.relpath(Path(args.base).resolve(), out.parent.resolve())
    draft = PerturbedDraft(base, pairs, args.strength, args.sigma, args.noise_seed, base_path=rel)
    draft.save(out)


def cmd_calibrate(args):
    vocab, draft, target, eos = _models(args)
    prompts = _prompts(args.corpus, vocab, args.prompt_len)
    if not prompts:
        raise UsageError(f"calibration corpus {args.corpus} has no prompts")
    cfg = CalibrationConfig(args.gamma, args.temperature, args.max_tokens, args.seed, args.lam,
                            args.capacity, eos)
    memory = calibrate(draft, target, prompts, cfg, workers=args.workers, progress=not args.quiet)
    memory.save(args.out)
    print(f"calibrate: {len(prompts)} prompts, {memory.total} rejections, "
          f"{len(memory)} pairs -> {args.out}", file=sys.stderr)


def cmd_run(args):
    vocab, draft, target, eos = _models(args)
    prompt = vocab.encode(args.prompt.split())
    policy = make_policy(args.mode, args.tau)
    memory = CorrectionMemory.load(args.memory) if args.memory else CorrectionMemory(args.lam)
    if memory.lam != args.lam:
        memory = memory.copy(lam=args.lam)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        res = run_policy(draft, target, [prompt], policy, args.gamma, args.temperature,
                         args.seed, args.max_tokens, memory, args.lam, eos, log_fh=log_fh)
    finally:
        if log_fh:
            log_fh.close()
    row = res.row(CostModel(args.c_draft, args.gamma))
    print(" ".join(vocab.decode(res.outputs[0])))
    for key in ("policy", "drafted", "accepted", "rescued", "rejections", "target_calls",
                "emitted_tokens", "acceptance_rate", "mean_accepted_len", "speedup"):
        v = row[key]
        print(f"# {key}\t{'n/a' if v is None else (f'{v:.6f}' if isinstance(v, float) else v)}")
    print(f"calspec: wall time {res.metrics.wall_time_s:.3f}s (non-normative)", file=sys.stderr)
    if args.save_memory and res.memory is not None:
        res.memory.save(args.save_memory)


def cmd_bench(args):
    vocab, draft, target, eos = _models(args)
    names = [n.strip() for n in args.policies.split(",") if n.strip()]
    bad = [n for n in names if n not in POLICY_NAMES]
    if bad or not names:
        raise UsageError(f"unknown policy {', '.join(bad) or '(none)'}; "
                         f"valid names: {', '.join(POLICY_NAMES)}")
    policies = [make_policy(n, args.tau) for n in names]
    prompts = _prompts(args.prompts, vocab, args.prompt_len)
    memory = CorrectionMemory.load(args.memory) if args.memory else CorrectionMemory(args.lam)
    if memory.lam != args.lam:
        memory = memory.copy(lam=args.lam)
    cost = CostModel(args.c_draft, args.gamma)
    if args.log_dir:
        Path(args.log_dir).mkdir(parents=True, exist_ok=True)
        results = []
        for seed in args.seeds:
            for pol in policies:
                with open(Path(args.log_dir) / f"{pol.name}.seed{seed}.jsonl", "w",
                          encoding="utf-8") as fh:
                    results.append(run_policy(draft, target, prompts, pol, args.gamma,
                                              args.temperature, seed, args.max_tokens, memory,
                                              args.lam, eos, log_fh=fh))
    else:
        results = compare_policies(draft, target, prompts, policies, args.gamma,
                                   args.temperature, args.seeds, args.max_tokens, memory,
                                   args.lam, eos, workers=args.workers)
    rows = [r.row(cost) for r in results]
    text = (format_rows(rows) if args.format == "tsv"
            else json.dumps(rows, indent=2) + "\n")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    for r in results:
        print(f"calspec: {r.policy} seed {r.seed}: wall time {r.metrics.wall_time_s:.3f}s "
              "(non-normative)", file=sys.stderr)


def cmd_analyze(args):
    stats = analyze_log(args.log)
    vocab = Vocabulary.load(args.vocab) if args.vocab else None
    if not 0 < args.head_fraction <= 1:
        raise UsageError("--head-fraction must lie in (0, 1]")
    if stats.total == 0:
        print(f"calspec: warning: {args.log} contains no rejection events", file=sys.stderr)
    paths = write_report(stats, args.out, args.head_fraction, args.bins, args.top, vocab)
    print(f"analyze: {stats.total} rejections, {stats.n_patterns} patterns -> "
          + ", ".join(map(str, paths)), file=sys.stderr)


def cmd_synth(args):
    from .synthetic import divergence_fixture
    fx = divergence_fixture(args.calibration_prompts, args.eval_prompts, args.prompt_len,
                            vocab_size=args.vocab_size, n_pairs=args.pairs,
                            n_train_docs=args.train_docs, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = fx.corpus.vocab
    vocab.save(out / "vocab.txt")

    def write(name, docs):
        (out / name).write_text("".join(" ".join(vocab.decode(d)) + "\n" for d in docs),
                                encoding="utf-8")

    write("train.txt", fx.corpus.docs[:args.train_docs])
    write("calib.txt", fx.calibration_prompts)
    write("eval.txt", fx.eval_prompts)
    (out / "pairs.txt").write_text(
        ",".join(f"{vocab.symbol(a)}:{vocab.symbol(b)}" for a, b in fx.corpus.pairs) + "\n",
        encoding="utf-8")
    print(f"synth: wrote fixture to {out}", file=sys.stderr)


COMMANDS = {"train": cmd_train, "perturb": cmd_perturb, "calibrate": cmd_calibrate,
            "run": cmd_run, "bench": cmd_bench, "analyze": cmd_analyze, "synth": cmd_synth}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        COMMANDS[args.command](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"calspec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EngineInvariantError as exc:
        print(f"calspec: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (OSError, ModelFormatError, MemoryFormatError, LogFormatError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        if isinstance(exc, OSError) and exc.filename:
            msg = f"{exc.strerror}: {exc.filename}"
        print(f"calspec: error: {msg}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"calspec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
