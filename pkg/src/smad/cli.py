"""``smad`` command line: generate, train, decode, ablate, describe, schema.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from .attention import dump_alignment
from .config import ConfigFileError, config_schema, dump_config, load_config
from .data import UsageError, collate
from .experiments import ablate, build_corpus, model_config_for, read_corpus, summarize, write_corpus
from .losses import DataError
from .metrics import corpus_cer
from .model import ModelConfig, SpeechTransformer
from .nn import ConfigError, load_checkpoint
from .train import NumericalError, decode_utterances, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
HYPS_HEADER = "# smad-hyps v1"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run config; every field has a default")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk", help="starting point before --config (default desk)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config field; repeatable; values are parsed as YAML")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smad", description="Self-and-mixed attention speech transformer on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write the synthetic corpus (manifest, features, stats)")
    _common(p)

    p = sub.add_parser("train", help="train one model into output.run_dir")
    _common(p)

    p = sub.add_parser("decode", help="decode a split with a trained checkpoint and report CER")
    _common(p)
    p.add_argument("--checkpoint", help="best, last, or a checkpoint path (default: decode.checkpoint)")
    p.add_argument("--split", help="train, dev or test (default: decode.split)")
    p.add_argument("--beam", type=int, help="beam width; 0 means greedy (default: decode.beam_width)")

    p = sub.add_parser("ablate", help="train every variant on one corpus and tabulate CER")
    _common(p)
    p.add_argument("--jobs", type=int, help="parallel training processes (default: ablate.jobs)")

    p = sub.add_parser("describe", help="print the model's parameter table")
    _common(p)
    p.add_argument("--variant", help="describe this variant instead of model.variant")

    p = sub.add_parser("schema", help="print the JSON schema of the config file")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _fresh_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CliError(f"{path} already exists and is not empty; pass --force to overwrite", EXIT_USAGE)
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _say(*parts) -> None:
    print(*parts, flush=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg, args) -> int:
    out = Path(cfg.output.corpus_dir)
    _fresh_dir(out, args.force)
    raw, _, stats = build_corpus(cfg)
    write_corpus(out, raw, stats)
    counts = {k: len(v) for k, v in raw.splits.items()}
    _say(f"wrote {len(raw.utterances)} utterances to {out} (splits {counts})")
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    corpus = read_corpus(cfg.output.corpus_dir)
    run_dir = Path(cfg.output.run_dir)
    _fresh_dir(run_dir, args.force)
    mc = model_config_for(cfg, corpus)
    cfg.model = mc
    (run_dir / "resolved_config.yaml").write_text(dump_config(cfg))
    model = SpeechTransformer(mc)
    _say(f"training {mc.variant} ({model.num_parameters()} parameters) for up to {cfg.train.max_steps} steps")
    result = train(model, corpus, cfg.train, run_dir=run_dir)
    last = result.records[-1] if result.records else {}
    _say(f"done: {len(result.records)} steps, last mol {last.get('mol', float('nan')):.4f}, "
         f"best dev att loss {result.best_dev_loss:.4f} at step {result.best_step}")
    return EXIT_OK


def _load_model(run_dir: Path, which: str) -> SpeechTransformer:
    path = run_dir / "checkpoints" / f"{which}.ckpt" if which in ("best", "last") else Path(which)
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}", EXIT_DATA)
    state, meta = load_checkpoint(path)
    model = SpeechTransformer(ModelConfig(**json.loads(meta)))
    model.load_state_dict(state)
    return model


def cmd_decode(cfg, args) -> int:
    split = args.split or cfg.decode.split
    which = args.checkpoint or cfg.decode.checkpoint
    beam = cfg.decode.beam_width if args.beam is None else args.beam
    if beam < 0:
        raise CliError("--beam must be >= 0", EXIT_USAGE)
    corpus = read_corpus(cfg.output.corpus_dir)
    if split not in corpus.splits:
        raise CliError(f"split {split!r} not in corpus (has {sorted(corpus.splits)})", EXIT_USAGE)
    run_dir = Path(cfg.output.run_dir)
    model = _load_model(run_dir, which)
    utts = corpus.split(split)
    mode = "greedy" if beam == 0 else f"beam{beam}"
    tag = which if which in ("best", "last") else Path(which).stem
    hyps_dir = run_dir / "hyps"
    hyps_dir.mkdir(parents=True, exist_ok=True)
    out = hyps_dir / f"{split}-{tag}-{mode}.txt"
    if out.exists() and not args.force:
        raise CliError(f"{out} exists; pass --force to overwrite", EXIT_USAGE)
    hyps = decode_utterances(model, utts, corpus.vocab, beam, cfg.decode.max_len, cfg.decode.length_penalty)
    lines = [HYPS_HEADER] + [f"{u.id}\t{' '.join(map(str, h))}" for u, h in zip(utts, hyps)]
    out.write_text("\n".join(lines) + "\n")
    report = corpus_cer((list(u.tokens), h) for u, h in zip(utts, hyps))
    summary = {
        "split": split, "checkpoint": which, "mode": mode, "utterances": len(utts),
        "substitutions": report.substitutions, "deletions": report.deletions, "insertions": report.insertions,
        "ref_len": report.ref_len, "cer": report.cer,
    }
    out.with_suffix(".summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    if cfg.decode.dump_alignment and utts:
        model.eval()
        with ag.no_grad():
            enc = model.encode(collate([utts[0]], corpus.vocab.pad).features)
            ys = np.array([[corpus.vocab.sos, *hyps[0]]])
            dec = model.decode_training(enc, ys, keep_streams=True)
        for k, (_, _, w) in enumerate(dec.streams):
            dump_alignment(w, hyps_dir / f"{utts[0].id}-layer{k}.align.txt")
    _say(f"{split} {mode} CER {report.cer:.2f}% (S={report.substitutions} D={report.deletions} "
         f"I={report.insertions} N={report.ref_len}) -> {out}")
    return EXIT_OK


def cmd_ablate(cfg, args) -> int:
    corpus = read_corpus(cfg.output.corpus_dir)
    out = Path(cfg.output.run_dir)
    _fresh_dir(out, args.force)
    jobs = args.jobs if args.jobs is not None else cfg.ablate.jobs
    if jobs < 1:
        raise CliError("--jobs must be >= 1", EXIT_USAGE)
    _say("\t".join(("variant", "seed", "params", "dev_cer", "test_cer", "best_step", "seconds")))
    rows = ablate(cfg, corpus, out, jobs=jobs, log=_say)
    _say("")
    _say(f"{'variant':<22}{'params':>10}{'dev CER':>10}{'test CER':>10}")
    for v, s in summarize(rows).items():
        _say(f"{v:<22}{s['params']:>10}{s['dev_cer']:>10.2f}{s['test_cer']:>10.2f}")
    return EXIT_OK


def cmd_describe(cfg, args) -> int:
    mc = cfg.model
    if args.variant:
        mc = mc.for_variant(args.variant)
    _say(SpeechTransformer(mc).describe())
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "decode": cmd_decode,
    "ablate": cmd_ablate,
    "describe": cmd_describe,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        _say(json.dumps(config_schema(), indent=1))
        return EXIT_OK
    try:
        cfg = load_config(args.config, args.overrides, args.preset)
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"smad {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigFileError, ConfigError, UsageError) as exc:
        print(f"smad {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"smad {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"smad {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
