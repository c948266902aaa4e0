"""Command-line front end: ``python -m treespec <subcommand>``.

Subcommands: ``gen-corpus``, ``train``, ``decode``, ``bench``, ``check``.
``--config FILE`` (JSON) overrides any flag given on the command line.
Exit codes: 0 ok, 1 failure (bad checkpoint, failing suite, aborted
training), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bench import MODES, run_bench
from .checkpoint import CheckpointError, load_speculator, load_target, save_speculator, save_target
from .corpus import ByteTokenizer, gen_corpus, read_corpus, write_corpus
from .speculator import Speculator, SpeculatorConfig
from .target import TargetConfig, TargetModel, vanilla_decode
from .train import TrainConfig, train, train_target
from .verify import OracleDrafter, spec_decode_loop

log = logging.getLogger("treespec")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    temperature: float = 0.0
    tree: tuple = (4, 2, 2, 1, 1)
    max_new: int = 64
    seed: int = 0

    def validate(self, num_heads: int | None = None) -> None:
        if not (self.temperature == 0 or 0 < self.temperature <= 2):
            raise UsageError(f"--temp must be 0 or in (0, 2], got {self.temperature}")
        if any(k < 1 for k in self.tree):
            raise UsageError("--tree branching factors must be >= 1")
        if num_heads is not None and len(self.tree) > num_heads:
            raise UsageError(f"--tree depth {len(self.tree)} exceeds the speculator's {num_heads} heads")
        if self.max_new < 0:
            raise UsageError("--max-new must be >= 0")


def parse_tree(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(k) for k in text)
    text = str(text).strip()
    if not text:
        return ()
    try:
        return tuple(int(k) for k in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"tree shape must look like 4,2,2,1,1: {text!r}") from exc


def parse_ids(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treespec", description="Tree speculative decoding on a toy target model.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file whose keys override flags")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output path (default: stdout where applicable)")

    def decoding(sp):
        sp.add_argument("--target", help="target checkpoint")
        sp.add_argument("--spec", help="speculator checkpoint")
        sp.add_argument("--mode", choices=MODES, default="spec")
        sp.add_argument("--tree", type=parse_tree, default=(4, 2, 2, 1, 1), help="branching per depth, e.g. 4,2,2,1,1")
        sp.add_argument("--temp", type=float, default=0.0)
        sp.add_argument("--max-new", type=int, default=64)
        sp.add_argument("--compressed-mask", action="store_true", help="verify with the interval mask encoding")

    g = sub.add_parser("gen-corpus", help="write a synthetic Markov or byte-level corpus")
    common(g)
    g.add_argument("--kind", choices=("markov", "text"), default="markov")
    g.add_argument("--vocab", type=int, default=64)
    g.add_argument("--length", type=int, default=100_000)
    g.add_argument("--support", type=int, default=4)
    g.add_argument("--concentration", type=float, default=0.5)
    g.add_argument("--input", nargs="*", default=[], help="text files for --kind text")

    t = sub.add_parser("train", help="pretrain a target or distill a speculator")
    common(t)
    t.add_argument("--model", choices=("speculator", "target"), default="speculator")
    t.add_argument("--target", help="target checkpoint (input for speculator training)")
    t.add_argument("--corpus", help="corpus file (ids or raw bytes)")
    t.add_argument("--steps", type=int, default=TrainConfig.steps)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--seq-len", type=int, default=TrainConfig.seq_len)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--warmup", type=int, default=None)
    t.add_argument("--w-reg", type=float, default=TrainConfig.w_reg)
    t.add_argument("--decay", type=float, default=TrainConfig.decay)
    t.add_argument("--heads", type=int, default=SpeculatorConfig.num_heads)
    t.add_argument("--augment-layers", type=int, default=SpeculatorConfig.augment_layers)
    t.add_argument("--sample-top-k", type=int, default=None)
    t.add_argument("--sample-top-p", type=float, default=None)
    t.add_argument("--vocab", type=int, default=None, help="target vocab (default: from the corpus)")
    t.add_argument("--hidden", type=int, default=128)
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--attn-heads", type=int, default=4)
    t.add_argument("--max-seq-len", type=int, default=1024)
    t.add_argument("--log-every", type=int, default=100)

    d = sub.add_parser("decode", help="generate a continuation")
    common(d)
    decoding(d)
    d.add_argument("--prompt", help="whitespace-separated token ids")
    d.add_argument("--prompt-text", help="text prompt, byte-level tokenized")
    d.add_argument("--text", action="store_true", help="print output as bytes-decoded text")

    b = sub.add_parser("bench", help="tokens/step and tokens/second over a prompt set")
    common(b)
    decoding(b)
    b.add_argument("--corpus", help="draw prompts from this corpus")
    b.add_argument("--prompts", help="file with one whitespace-separated id prompt per line")
    b.add_argument("--num-prompts", type=int, default=8)
    b.add_argument("--prompt-len", type=int, default=16)

    c = sub.add_parser("check", help="run the invariant suites")
    common(c)
    c.add_argument("--suite", type=int, nargs="*", help="criterion ids (default: all)")
    c.add_argument("--quick", action="store_true", help="reduced sizes; suites 8-9 check direction only")
    c.add_argument("--list", action="store_true", help="list suite ids and exit")
    c.add_argument("--target", help="also verify this checkpoint loads")
    c.add_argument("--spec", help="also verify this speculator checkpoint loads (needs --target)")
    return p


def apply_config(args: argparse.Namespace) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest == "temperature":
            dest = "temp"
        if not hasattr(args, dest):
            raise UsageError(f"unknown config key {key!r}")
        setattr(args, dest, parse_tree(value) if dest == "tree" else value)
    return args


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_corpus(path: str | None) -> np.ndarray:
    if not path:
        raise UsageError("--corpus is required")
    if not Path(path).is_file():
        raise UsageError(f"corpus not found: {path}")
    return read_corpus(path)


def _load_models(args, need_spec: bool):
    if not args.target:
        raise UsageError("--target is required")
    target = load_target(args.target)
    spec = None
    if need_spec:
        if not args.spec:
            raise UsageError("--spec is required for --mode spec")
        spec = load_speculator(args.spec, target)
    return target, spec


def cmd_gen_corpus(args) -> int:
    if args.kind == "text":
        if not args.input:
            raise UsageError("--kind text needs --input files")
        missing = [p for p in args.input if not Path(p).is_file()]
        if missing:
            raise UsageError(f"input not found: {missing[0]}")
        ids, _ = gen_corpus("text", paths=args.input)
    else:
        ids, _ = gen_corpus("markov", args.seed, vocab_size=args.vocab, length=args.length,
                            support=args.support, concentration=args.concentration)
    if args.out:
        write_corpus(args.out, ids)
    else:
        sys.stdout.write(" ".join(str(int(i)) for i in ids) + "\n")
    log.info("wrote %d tokens", len(ids))
    return 0


def cmd_train(args) -> int:
    corpus = _load_corpus(args.corpus)
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    extra = {k: v for k, v in (("lr", args.lr), ("warmup", args.warmup)) if v is not None}
    cfg = TrainConfig(w_reg=args.w_reg, decay=args.decay, num_heads=args.heads, steps=args.steps,
                      batch_size=args.batch_size, seq_len=args.seq_len, sample_top_k=args.sample_top_k,
                      sample_top_p=args.sample_top_p, seed=args.seed, log_every=args.log_every, **extra)
    if args.model == "target":
        vocab = args.vocab or int(corpus.max()) + 1
        if corpus.max() >= vocab:
            raise UsageError(f"corpus ids reach {int(corpus.max())} but --vocab is {vocab}")
        tcfg = TargetConfig(vocab_size=vocab, hidden_size=args.hidden, num_heads=args.attn_heads,
                            num_layers=args.layers, max_seq_len=args.max_seq_len)
        model = TargetModel.random(tcfg, args.seed)
        curve = train_target(model, corpus, cfg) if cfg.steps else []
        save_target(out, model)
        dump = {"model": "target", "train": cfg.to_dict(), "target": tcfg.to_dict()}
    else:
        if not args.target:
            raise UsageError("--target is required to train a speculator")
        target = load_target(args.target)
        if corpus.max() >= target.config.vocab_size:
            raise UsageError("corpus ids exceed the target vocabulary")
        scfg = SpeculatorConfig(num_heads=args.heads, augment_layers=args.augment_layers)
        spec = Speculator.create(target, scfg, args.seed)
        curve = train(spec, corpus, cfg)
        save_speculator(out, spec)
        dump = {"model": "speculator", "train": cfg.to_dict(), "speculator": scfg.to_dict()}
    Path(str(out) + ".config.json").write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
    Path(str(out) + ".loss.jsonl").write_text("".join(r.to_json() + "\n" for r in curve))
    print(json.dumps({"checkpoint": str(out), "steps": cfg.steps,
                      "final_loss": curve[-1].loss if curve else None}))
    return 0


def _run_config(args, num_heads=None) -> RunConfig:
    rc = RunConfig(temperature=args.temp, tree=tuple(args.tree), max_new=args.max_new, seed=args.seed)
    rc.validate(num_heads)
    return rc


def cmd_decode(args) -> int:
    target, spec = _load_models(args, args.mode == "spec")
    rc = _run_config(args, spec.config.num_heads if spec else None)
    if args.prompt_text is not None:
        prompt = ByteTokenizer().encode(args.prompt_text)
    elif args.prompt:
        prompt = parse_ids(args.prompt)
    else:
        raise UsageError("give --prompt or --prompt-text")
    if not prompt or max(prompt) >= target.config.vocab_size or min(prompt) < 0:
        raise UsageError("prompt ids must be non-empty and inside the target vocabulary")
    rng = np.random.default_rng(rc.seed)
    if args.mode == "vanilla":
        out = vanilla_decode(target, prompt, rc.max_new, rc.temperature, rng=rng)
    else:
        drafter = spec if args.mode == "spec" else OracleDrafter(target)
        out, _ = spec_decode_loop(target, drafter, prompt, rc.max_new, rc.temperature, rc.tree, rng,
                                  args.compressed_mask)
    if args.text:
        text = ByteTokenizer().decode(out).decode("utf-8", errors="replace") + "\n"
    else:
        text = " ".join(str(t) for t in out) + "\n"
    _emit(text, args.out)
    return 0


def _bench_prompts(args, vocab: int) -> list[list[int]]:
    if args.prompts:
        if not Path(args.prompts).is_file():
            raise UsageError(f"prompt file not found: {args.prompts}")
        prompts = [parse_ids(line) for line in Path(args.prompts).read_text().splitlines() if line.strip()]
    elif args.corpus:
        corpus = _load_corpus(args.corpus)
        rng = np.random.default_rng(args.seed)
        if len(corpus) < args.prompt_len:
            raise UsageError("corpus shorter than --prompt-len")
        starts = rng.integers(0, len(corpus) - args.prompt_len + 1, size=args.num_prompts)
        prompts = [corpus[s:s + args.prompt_len].tolist() for s in starts]
    else:
        rng = np.random.default_rng(args.seed)
        prompts = [rng.integers(0, vocab, size=args.prompt_len).tolist() for _ in range(args.num_prompts)]
    if any(not p or max(p) >= vocab for p in prompts):
        raise UsageError("prompts must be non-empty and inside the target vocabulary")
    return prompts


def cmd_bench(args) -> int:
    target, spec = _load_models(args, args.mode == "spec")
    rc = _run_config(args, spec.config.num_heads if spec else None)
    prompts = _bench_prompts(args, target.config.vocab_size)
    report = run_bench(target, prompts, args.mode, spec, rc.max_new, rc.tree, rc.temperature, rc.seed,
                       args.compressed_mask)
    if args.out:
        Path(args.out).write_text(report.to_jsonl())
    print(report.table())
    return 0


def cmd_check(args) -> int:
    from .checks import SUITES, run_suite

    if args.list:
        for cid, (name, _) in sorted(SUITES.items()):
            print(f"{cid} {name}")
        return 0
    status = 0
    if args.target:
        try:
            target = load_target(args.target)
            if args.spec:
                load_speculator(args.spec, target)
            print(f"[PASS] checkpoints load: {args.target}" + (f", {args.spec}" if args.spec else ""))
        except (CheckpointError, OSError) as exc:
            print(f"[FAIL] checkpoint load: {exc}")
            return 1
    ids = args.suite or sorted(SUITES)
    unknown = [i for i in ids if i not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite ids {unknown}; valid: {sorted(SUITES)}")
    results = []
    for cid in ids:
        res = run_suite(cid, args.quick)
        print(res.line(), flush=True)
        results.append(res)
        if not res.passed:
            status = 1
    if args.out:
        Path(args.out).write_text("".join(
            json.dumps({"id": r.id, "name": r.name, "passed": r.passed, "detail": r.detail,
                        "seconds": r.seconds}) + "\n" for r in results))
    print(f"{sum(r.passed for r in results)}/{len(results)} suites passed")
    return status


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "decode": cmd_decode,
    "bench": cmd_bench,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        apply_config(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"treespec {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"treespec {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"treespec {args.command}: aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
