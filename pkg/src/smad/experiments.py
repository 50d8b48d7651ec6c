"""Shared corpus/model/run plumbing for the command line and the ablation sweep."""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, dump_config
from .data import Corpus, NormStats, UsageError, apply_stats, generate_corpus, load_corpus, normalize, save_corpus
from .model import ModelConfig, SpeechTransformer
from .train import TrainConfig, evaluate_cer, train

ABLATION_COLUMNS = ("variant", "seed", "params", "dev_cer", "test_cer", "best_step", "seconds")


def build_corpus(cfg: RunConfig) -> tuple[Corpus, Corpus, NormStats]:
    """Raw corpus, normalised corpus, and the train-split stats."""
    d = cfg.data
    raw = generate_corpus(d.seed, d.n_utterances, d.vocab_size, tuple(d.length_range), feat_dim=d.feat_dim, noise=d.noise)
    norm, stats = normalize(raw, d.scale_variance)
    return raw, norm, stats


def write_corpus(directory, raw: Corpus, stats: NormStats) -> None:
    save_corpus(directory, raw)
    stats.save(Path(directory) / "stats.json")


def read_corpus(directory) -> Corpus:
    """Load a stored corpus and normalise it with its stored training stats."""
    directory = Path(directory)
    if not (directory / "manifest.tsv").exists():
        raise FileNotFoundError(f"no corpus at {directory} (run `smad generate` first)")
    raw = load_corpus(directory)
    stats_path = directory / "stats.json"
    if not stats_path.exists():
        raise UsageError(f"{stats_path} is missing; normalisation stats come from `smad generate`")
    return Corpus(raw.vocab, apply_stats(raw.utterances, NormStats.load(stats_path)), raw.splits)


def model_config_for(cfg: RunConfig, corpus: Corpus, variant: str | None = None, seed: int | None = None) -> ModelConfig:
    """The run's model section with vocab and feature sizes taken from the corpus."""
    mc = replace(cfg.model, vocab_size=corpus.vocab.size, feat_dim=corpus.feat_dim)
    if seed is not None:
        mc = replace(mc, seed=seed)
    if variant is not None and variant != mc.variant:
        mc = mc.for_variant(variant)
    mc.validate()
    return mc


def run_variant(cfg: RunConfig, corpus: Corpus, variant: str, seed: int, run_dir=None) -> dict:
    """Train one variant and report dev/test CER of its best-dev checkpoint."""
    mc = model_config_for(cfg, corpus, variant, seed)
    tcfg: TrainConfig = replace(cfg.train, seed=seed)
    model = SpeechTransformer(mc)
    start = time.perf_counter()
    result = train(model, corpus, tcfg, run_dir=run_dir)
    model.load_state_dict(result.best_state)
    dev = evaluate_cer(model, corpus.split("dev"), corpus.vocab, cfg.decode.beam_width)
    test = evaluate_cer(model, corpus.split("test"), corpus.vocab, cfg.decode.beam_width)
    return {
        "variant": variant,
        "seed": seed,
        "params": model.num_parameters(),
        "dev_cer": dev.cer,
        "test_cer": test.cer,
        "best_step": result.best_step,
        "seconds": time.perf_counter() - start,
    }


def _run_job(args):
    cfg, corpus, variant, seed, run_dir = args
    return run_variant(cfg, corpus, variant, seed, run_dir)


def format_row(row: dict) -> str:
    return "\t".join(
        f"{row[c]:.2f}" if c in ("dev_cer", "test_cer") else f"{row[c]:.1f}" if c == "seconds" else str(row[c])
        for c in ABLATION_COLUMNS
    )


def ablate(cfg: RunConfig, corpus: Corpus, out_dir, jobs: int = 1, log=print) -> list[dict]:
    """Train every configured variant for every seed with the same budget.

    Rows are appended to ``ablation.tsv`` as soon as each run finishes, so
    a failure part-way keeps the finished rows.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "ablation.tsv"
    with open(table, "w") as fh:
        fh.write("# smad-ablation v1\n" + "\t".join(ABLATION_COLUMNS) + "\n")
    (out_dir / "resolved_config.yaml").write_text(dump_config(cfg))
    work = [
        (cfg, corpus, v, s, out_dir / "variants" / f"{v}-s{s}")
        for v in cfg.ablate.variants
        for s in cfg.ablate.seeds
    ]
    rows = []

    def record(row):
        rows.append(row)
        with open(table, "a") as fh:
            fh.write(format_row(row) + "\n")
        log(format_row(row))

    if jobs <= 1:
        for job in work:
            record(_run_job(job))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for row in pool.map(_run_job, work):
                record(row)
    summary = summarize(rows)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return rows


def summarize(rows: list[dict]) -> dict:
    """Mean dev/test CER per variant across seeds."""
    out: dict[str, dict] = {}
    for r in rows:
        s = out.setdefault(r["variant"], {"params": r["params"], "dev": [], "test": []})
        s["dev"].append(r["dev_cer"])
        s["test"].append(r["test_cer"])
    return {
        v: {"params": s["params"], "dev_cer": sum(s["dev"]) / len(s["dev"]), "test_cer": sum(s["test"]) / len(s["test"]),
            "seeds": len(s["dev"])}
        for v, s in out.items()
    }
