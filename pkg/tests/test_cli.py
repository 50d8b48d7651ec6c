import json
import subprocess
import sys

import pytest
import yaml

from smad import cli
from smad.config import from_dict, load_config
from smad.data import load_corpus
from smad.metrics import corpus_cer
from smad.model import SpeechTransformer
from smad.train import NumericalError

TINY = [
    "--set", "data.n_utterances=30",
    "--set", "data.vocab_size=5",
    "--set", "model.d_model=16",
    "--set", "model.d_ff=32",
    "--set", "model.n_heads=2",
    "--set", "model.n_enc_layers=1",
    "--set", "model.n_dec_layers=1",
    "--set", "train.max_steps=6",
    "--set", "train.eval_every=3",
    "--set", "train.batch_size=6",
]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def trained(workdir):
    assert cli.main(["generate", *TINY]) == 0
    assert cli.main(["train", *TINY]) == 0
    return workdir


def test_generate_writes_corpus(workdir):
    assert cli.main(["generate", *TINY]) == 0
    files = sorted(p.name for p in (workdir / "corpus").iterdir())
    assert files == ["features.bin", "manifest.tsv", "stats.json"]
    rows = [line for line in (workdir / "corpus/manifest.tsv").read_text().splitlines() if not line.startswith("#")]
    assert len(rows) == 30


def test_generate_defaults(workdir):
    assert cli.main(["generate"]) == 0
    assert len(load_corpus(workdir / "corpus").utterances) == 250


def test_generate_refuses_overwrite(workdir, capsys):
    assert cli.main(["generate", *TINY]) == 0
    before = {p.name: p.read_bytes() for p in (workdir / "corpus").iterdir()}
    assert cli.main(["generate", *TINY, "--set", "data.seed=9"]) == 1
    assert "--force" in capsys.readouterr().err
    assert {p.name: p.read_bytes() for p in (workdir / "corpus").iterdir()} == before
    assert cli.main(["generate", *TINY, "--set", "data.seed=9", "--force"]) == 0


def test_train_layout_and_resolved_config(trained):
    run = trained / "run"
    assert (run / "checkpoints/best.ckpt").exists() and (run / "checkpoints/last.ckpt").exists()
    assert (run / "logs/metrics.jsonl").exists()
    resolved = run / "resolved_config.yaml"
    again = load_config(resolved)
    assert again.to_dict() == from_dict(yaml.safe_load(resolved.read_text())).to_dict()
    assert again.model.d_model == 16 and again.model.vocab_size == 9


def test_train_refuses_existing_run(trained):
    assert cli.main(["train", *TINY]) == 1


def test_train_without_corpus_is_data_error(workdir, capsys):
    assert cli.main(["train", *TINY]) == 2
    assert "generate" in capsys.readouterr().err


def test_decode_greedy_equals_beam_one_and_summary_recomputes(trained):
    assert cli.main(["decode", *TINY]) == 0
    assert cli.main(["decode", *TINY, "--beam", "1"]) == 0
    hyps = trained / "run/hyps"
    greedy = (hyps / "dev-best-greedy.txt").read_bytes()
    assert greedy == (hyps / "dev-best-beam1.txt").read_bytes()
    corpus = load_corpus(trained / "corpus")
    refs = {u.id: list(u.tokens) for u in corpus.utterances}
    pairs = []
    for line in greedy.decode().splitlines()[1:]:
        uid, _, toks = line.partition("\t")
        pairs.append((refs[uid], [int(t) for t in toks.split()]))
    summary = json.loads((hyps / "dev-best-greedy.summary.json").read_text())
    assert summary["cer"] == pytest.approx(corpus_cer(pairs).cer, abs=1e-12)
    assert summary["utterances"] == len(corpus.splits["dev"])


def test_decode_refuses_existing_hyps(trained):
    assert cli.main(["decode", *TINY]) == 0
    assert cli.main(["decode", *TINY]) == 1
    assert cli.main(["decode", *TINY, "--force"]) == 0


def test_decode_missing_checkpoint(trained, capsys):
    assert cli.main(["decode", *TINY, "--checkpoint", "nowhere.ckpt"]) == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_decode_alignment_dump(trained):
    assert cli.main(["decode", *TINY, "--split", "test", "--set", "decode.dump_alignment=true"]) == 0
    assert list((trained / "run/hyps").glob("*.align.txt"))


def test_missing_stats_is_usage_error(trained):
    (trained / "corpus/stats.json").unlink()
    assert cli.main(["decode", *TINY]) == 1


def test_corrupt_archive_is_data_error(trained):
    path = trained / "corpus/features.bin"
    path.write_bytes(b"garbage!" + path.read_bytes()[8:])
    assert cli.main(["decode", *TINY]) == 2


def test_numerical_failure_exit_code(workdir, monkeypatch):
    assert cli.main(["generate", *TINY]) == 0

    def boom(*a, **k):
        raise NumericalError("non-finite loss nan at step 4")

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", *TINY]) == 3


def test_bad_config_reports_location(workdir, capsys):
    (workdir / "bad.yaml").write_text("model:\n  d_model: 64\n  n_layers: 3\n")
    assert cli.main(["describe", "--config", "bad.yaml"]) == 1
    err = capsys.readouterr().err
    assert "bad.yaml:3: model.n_layers" in err


def test_usage_errors_exit_one():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--no-such-flag"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 1
    assert cli.main(["describe", "--set", "nonsense"]) == 1


@pytest.mark.parametrize("command", ["generate", "train", "decode", "ablate", "describe", "schema"])
def test_help_documents_flags(command):
    out = subprocess.run([sys.executable, "-m", "smad", command, "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    if command != "schema":
        for flag in ("--config", "--set", "--force", "--preset"):
            assert flag in out.stdout


def test_describe_matches_model(capsys):
    assert cli.main(["describe", *TINY]) == 0
    total = int(capsys.readouterr().out.strip().splitlines()[-1].split()[-1])
    cfg = load_config(None, TINY[1::2])
    assert total == SpeechTransformer(cfg.model).num_parameters()


def test_schema_validates_default_config(capsys):
    jsonschema = pytest.importorskip("jsonschema")
    assert cli.main(["schema"]) == 0
    schema = json.loads(capsys.readouterr().out)
    jsonschema.validate(load_config().to_dict(), schema)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({"model": {"d_model": "wide"}}, schema)


def test_ablate_table(workdir):
    assert cli.main(["generate", *TINY]) == 0
    assert cli.main(["ablate", *TINY, "--set", "ablate.seeds=[0]"]) == 0
    lines = (workdir / "run/ablation.tsv").read_text().splitlines()
    header, rows = lines[1].split("\t"), [line.split("\t") for line in lines[2:]]
    assert header[:5] == ["variant", "seed", "params", "dev_cer", "test_cer"]
    assert len(rows) == 6
    base = load_config(None, TINY[1::2])
    corpus = load_corpus(workdir / "corpus")
    for row in rows:
        cfg = base.model.__class__(**{**base.model.to_dict(), "vocab_size": corpus.vocab.size}).for_variant(row[0])
        assert int(row[2]) == SpeechTransformer(cfg).num_parameters()
    summary = json.loads((workdir / "run/summary.json").read_text())
    assert set(summary) == set(base.ablate.variants)
