import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from seqdn.cli import main
from seqdn.config import ConfigError, RunConfig, from_dict, load_config, write_config
from seqdn.denoiser import read_mask_dump, write_mask_dump
from seqdn.evaluation import read_noise_labels
from seqdn.semantic import load_semantic_table

TINY_RUN = {
    "model": {"d_emb": 6, "d_hidden": 5, "n_layers": 1},
    "train": {"lr": 0.01, "batch_size": 8, "max_epochs": 2, "patience": 2},
}


# -- config ----------------------------------------------------------------


def test_config_roundtrip_and_hash(tmp_path):
    cfg = from_dict(TINY_RUN)
    write_config(tmp_path / "c.json", cfg)
    again = load_config(tmp_path / "c.json", env={})
    assert again == cfg and again.hash() == cfg.hash()
    assert cfg.hash() != RunConfig().hash()
    assert cfg.train_config().model.d_hidden == 5


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="lrr"):
        from_dict({"train": {"lrr": 1}})
    with pytest.raises(ConfigError, match="extra"):
        from_dict({"extra": {}})
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_seed_from_environment(tmp_path):
    assert load_config(env={"SEQDN_SEED": "7"}).train.seed == 7
    (tmp_path / "c.json").write_text(json.dumps({"train": {"seed": 3}}))
    assert load_config(tmp_path / "c.json", env={"SEQDN_SEED": "7"}).train.seed == 3
    with pytest.raises(ConfigError):
        load_config(env={"SEQDN_SEED": "x"})


# -- parser ----------------------------------------------------------------


def test_help_shows_defaults():
    out = subprocess.run([sys.executable, "-m", "seqdn", "train", "--help"], capture_output=True, text=True, check=True).stdout
    assert "--theta" in out and "--dump-masks" in out
    prep = subprocess.run([sys.executable, "-m", "seqdn", "prepare", "--help"], capture_output=True, text=True, check=True).stdout
    assert "default: 5" in prep


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "seqdn" in capsys.readouterr().out


# -- pipeline --------------------------------------------------------------


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--n-users", "24", "--n-items", "30", "--n-clusters", "3",
                 "--min-len", "8", "--max-len", "12", "--sem-dim", "6", "--seed", "3", "--out", str(d)]) == 0
    assert main(["prepare", "--input", str(d / "interactions.tsv"), "--out", str(d), "--k-core", "2", "--max-len", "10"]) == 0
    (d / "run.json").write_text(json.dumps(TINY_RUN))
    return d


@pytest.fixture(scope="module")
def trained(synth_dir):
    out = synth_dir / "run"
    code = main(["train", "--config", str(synth_dir / "run.json"), "--split", str(synth_dir / "split.jsonl"),
                 "--semantic", str(synth_dir / "semantic.semb"), "--theta", "-1.0", "--out-dir", str(out), "--dump-masks"])
    assert code == 0
    return out


def test_prepare_is_deterministic(synth_dir, tmp_path):
    assert main(["prepare", "--input", str(synth_dir / "interactions.tsv"), "--out", str(tmp_path),
                 "--k-core", "2", "--max-len", "10"]) == 0
    assert (tmp_path / "split.jsonl").read_bytes() == (synth_dir / "split.jsonl").read_bytes()
    assert "users: 24" in (tmp_path / "stats.txt").read_text()


def test_prepare_empty_input_exits_2(tmp_path, capsys):
    (tmp_path / "empty.tsv").write_text("")
    assert main(["prepare", "--input", str(tmp_path / "empty.tsv"), "--out", str(tmp_path / "o")]) == 2
    assert "no interactions" in capsys.readouterr().err


def test_synth_without_noise(tmp_path):
    assert main(["synth", "--n-users", "10", "--noise-rate", "0", "--out", str(tmp_path)]) == 0
    labels = read_noise_labels(tmp_path / "noise_labels.tsv")
    assert len(labels) == 10 and all(sum(v) == 0 for v in labels.values())


def test_embed_pseudo_is_reproducible(synth_dir, tmp_path):
    for name in ("a.semb", "b.semb"):
        assert main(["embed", "--catalog", str(synth_dir / "split.jsonl"), "--dim", "8", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.semb").read_bytes() == (tmp_path / "b.semb").read_bytes()


def test_embed_import_converts_to_binary(synth_dir, tmp_path):
    out = tmp_path / "s.bin"
    assert main(["embed", "--catalog", str(synth_dir / "split.jsonl"), "--mode", "import",
                 "--input", str(synth_dir / "semantic.semb"), "--binary", "--out", str(out)]) == 0
    a = load_semantic_table(synth_dir / "semantic.semb")
    b = load_semantic_table(out)
    assert a.ids == b.ids and np.array_equal(a.vectors, b.vectors)


def test_train_writes_artifacts(trained):
    for name in ("model.ckpt", "history.csv", "masks.txt", "train_masks.txt"):
        assert (trained / name).exists(), name
    with open(trained / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert {"L_CE", "L_long", "L_short", "L_recon", "L_total", "valid_NDCG@10", "denoise_ratio"} <= set(rows[0])


def test_eval_reports_all_metrics(trained, capsys):
    assert main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--out", str(trained)]) == 0
    text = (trained / "metrics.txt").read_text()
    for key in ("HR@5", "HR@10", "HR@20", "NDCG@5", "NDCG@10", "NDCG@20", "bucket1_NDCG@5", "denoise_ratio"):
        assert f"\n{key}: " in "\n" + text, key
    assert capsys.readouterr().out == text
    assert (trained / "metrics.csv").read_text().startswith("metric,value\n")


def test_eval_missing_checkpoint_exits_2(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt")]) == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_report_tables(trained, synth_dir):
    out = trained / "report"
    assert main(["report", "--history", str(trained / "history.csv"), "--metrics", str(trained / "metrics.txt"),
                 "--masks", str(trained / "train_masks.txt"), "--labels", str(synth_dir / "noise_labels.tsv"),
                 "--out", str(out)]) == 0
    assert (out / "history_summary.csv").read_text().startswith("metric,value\nepochs,2\n")
    buckets = (out / "buckets.csv").read_text().splitlines()
    assert buckets[0] == "bucket,NDCG@5" and len([l for l in buckets if not l.startswith("#")]) == 6
    header, row = (out / "noise_recovery.csv").read_text().splitlines()
    assert header == "flagged,noise,hits,precision,recall,F1"


def test_report_oracle_masks_score_perfectly(synth_dir, tmp_path):
    labels = read_noise_labels(synth_dir / "noise_labels.tsv")
    write_mask_dump(tmp_path / "m.txt", [(u, 0, 1 - np.array(v)) for u, v in labels.items()])
    assert main(["report", "--masks", str(tmp_path / "m.txt"), "--labels", str(synth_dir / "noise_labels.tsv"),
                 "--out", str(tmp_path)]) == 0
    row = (tmp_path / "noise_recovery.csv").read_text().splitlines()[1].split(",")
    assert row[3:] == ["1.0", "1.0", "1.0"]


def test_report_window_masks_align_to_train_window(trained, synth_dir, tmp_path):
    labels = read_noise_labels(synth_dir / "noise_labels.tsv")
    dump = read_mask_dump(trained / "train_masks.txt")
    oracle = []
    for uid, epoch, m in dump:
        lab = labels[uid]
        oracle.append((uid, epoch, 1 - np.array(lab[len(lab) - 2 - len(m) : len(lab) - 2])))
    write_mask_dump(tmp_path / "m.txt", oracle)
    assert main(["report", "--masks", str(tmp_path / "m.txt"), "--labels", str(synth_dir / "noise_labels.tsv"),
                 "--out", str(tmp_path)]) == 0
    row = (tmp_path / "noise_recovery.csv").read_text().splitlines()[1].split(",")
    assert row[5] == "1.0"


def test_report_without_inputs_exits_2(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_sweep_writes_one_row_per_theta(synth_dir, tmp_path):
    out = tmp_path / "sweep.csv"
    code = main(["sweep", "--config", str(synth_dir / "run.json"), "--split", str(synth_dir / "split.jsonl"),
                 "--semantic", str(synth_dir / "semantic.semb"), "--max-epochs", "1",
                 "--thetas", "-0.9", "0.9", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("theta,") and len(lines) == 3


def test_train_without_split_exits_2(tmp_path, capsys):
    assert main(["train", "--out-dir", str(tmp_path)]) == 2
    assert "split" in capsys.readouterr().err
