import hashlib
import json

import numpy as np
import pytest

from spam_metric import datagen, stats
from spam_metric.cli import main
from spam_metric.config import ConfigError, config_from_dict, load_config
from spam_metric.domain import read_manifest
from spam_metric.scorer import Scorer, filter_negatives, proxy_mos
from spam_metric.training import load_checkpoint

SMALL = {"model": {"h": 16, "heads": 4, "layers": 1}, "train": {"batch_size": 8, "dev_batches": 2, "warmup_steps": 2}}


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.json").write_text(json.dumps(SMALL))
    assert main(["gen-data", "--out", str(root / "data"), "--n", "40", "--seed", "7"]) == 0
    code = main([
        "--config", str(root / "small.json"), "train", "--manifest", str(root / "data/manifest.jsonl"),
        "--checkpoint", str(root / "run/model.ckpt"), "--max-steps", "3", "--eval-every", "1", "--deterministic",
    ])
    assert code == 0
    return root


class TestGenData:
    def test_counts_and_variants(self, workspace, capsys):
        manifest = read_manifest(workspace / "data/manifest.jsonl")
        assert len(manifest) == 40
        variants = datagen.read_variants(workspace / "data/variants.jsonl")
        assert [v.item_id for v in variants] == [r.item_id for r in manifest.split("test")]
        spec = json.loads((workspace / "data/generation_spec.json").read_text())
        assert spec["seed"] == 7 and spec["n_items"] == 40

    def test_rerun_byte_identical(self, workspace, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "again"), "--n", "40", "--seed", "7"]) == 0
        assert tree_digest(tmp_path / "again") == tree_digest(workspace / "data")

    def test_zero_items(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--n", "0"]) == 0
        assert len(read_manifest(tmp_path / "manifest.jsonl")) == 0
        assert (tmp_path / "variants.jsonl").read_text() == ""

    def test_seed_flag_after_subcommand_equals_before(self, tmp_path):
        assert main(["--seed", "2", "gen-data", "--out", str(tmp_path / "a"), "--n", "3"]) == 0
        assert main(["gen-data", "--seed", "2", "--out", str(tmp_path / "b"), "--n", "3"]) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_negative_n_is_usage_error(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--n", "-1"]) == 1


class TestTrain:
    def test_outputs(self, workspace):
        ckpt = load_checkpoint(workspace / "run/model.ckpt")
        assert ckpt.config["model"]["h"] == 16
        metrics = [json.loads(l) for l in (workspace / "run/model.ckpt.metrics.jsonl").read_text().splitlines()]
        assert metrics[0] == {"step": 0, "dev_L_con": metrics[0]["dev_L_con"]}
        assert (workspace / "run/model.ckpt.config.json").is_file()

    def test_deterministic_twice(self, workspace, tmp_path):
        args = ["--config", str(workspace / "small.json"), "train", "--manifest", str(workspace / "data/manifest.jsonl"),
                "--max-steps", "2", "--deterministic"]
        assert main(args + ["--checkpoint", str(tmp_path / "a.ckpt")]) == 0
        assert main(args + ["--checkpoint", str(tmp_path / "b.ckpt")]) == 0
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_missing_manifest(self, tmp_path, capsys):
        code = main(["train", "--manifest", str(tmp_path / "none.jsonl"), "--checkpoint", str(tmp_path / "x.ckpt")])
        assert code == 2
        assert not list(tmp_path.iterdir())
        assert "manifest not found" in capsys.readouterr().err

    def test_unknown_config_key(self, workspace, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"train": {"learning_rate": 1.0}}))
        assert main(["--config", str(tmp_path / "bad.json"), "train", "--manifest", str(workspace / "data/manifest.jsonl")]) == 2


class TestScore:
    def test_single_pair_deterministic(self, workspace, capsys):
        manifest = read_manifest(workspace / "data/manifest.jsonl")
        rec = manifest.records[0]
        args = ["score", "--checkpoint", str(workspace / "run/model.ckpt"), "--audio", str(manifest.audio_file(rec)),
                "--transcript", rec.transcript, "--prompt", rec.prompt]
        assert main(args) == 0
        first = capsys.readouterr().out
        assert main(args) == 0
        assert capsys.readouterr().out == first
        assert -1.0 <= float(first) <= 1.0

    def test_batch_mode(self, workspace):
        out = workspace / "scores.csv"
        assert main(["score", "--checkpoint", str(workspace / "run/model.ckpt"),
                     "--manifest", str(workspace / "data/manifest.jsonl"),
                     "--variants", str(workspace / "data/variants.jsonl"), "--out", str(out)]) == 0
        table = stats.ScoreTable.read_csv(out)
        n_items = len(datagen.read_variants(workspace / "data/variants.jsonl"))
        assert len(table) == 21 * n_items
        assert all(-1.0 <= r.score <= 1.0 for r in table.rows)
        table.validate_complete()

    def test_batch_matches_in_process(self, workspace, tmp_path):
        assert main(["score", "--checkpoint", str(workspace / "run/model.ckpt"),
                     "--manifest", str(workspace / "data/manifest.jsonl"),
                     "--variants", str(workspace / "data/variants.jsonl"), "--out", str(tmp_path / "s.csv")]) == 0
        manifest = read_manifest(workspace / "data/manifest.jsonl")
        variants = datagen.read_variants(workspace / "data/variants.jsonl")
        table = Scorer.from_checkpoint(workspace / "run/model.ckpt").score_variants(manifest, variants)
        assert stats.ScoreTable.read_csv(tmp_path / "s.csv").rows == table.rows

    def test_mixed_modes_rejected(self, workspace):
        assert main(["score", "--audio", "x.wav", "--manifest", "m.jsonl"]) == 1
        assert main(["score", "--audio", "x.wav"]) == 1

    def test_unreadable_audio(self, workspace, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"not audio")
        code = main(["score", "--checkpoint", str(workspace / "run/model.ckpt"), "--audio", str(tmp_path / "bad.wav"),
                     "--transcript", "a", "--prompt", "a man"])
        assert code == 2

    def test_checkpoint_version_mismatch(self, workspace, tmp_path):
        data = bytearray((workspace / "run/model.ckpt").read_bytes())
        data[8] = 9
        (tmp_path / "v9.ckpt").write_bytes(bytes(data))
        code = main(["score", "--checkpoint", str(tmp_path / "v9.ckpt"), "--audio", "x.wav",
                     "--transcript", "a", "--prompt", "a man"])
        assert code == 2


def separable_csv(path, n_items=20):
    rng = np.random.default_rng(0)
    rows = []
    for i in range(n_items):
        s0 = float(rng.uniform(0.4, 0.9))
        rows.append(stats.ScoreRow(f"i{i}", "original", 0, s0))
        rows += [stats.ScoreRow(f"i{i}", "positive", k, s0 + float(rng.normal(0, 0.01))) for k in range(10)]
        rows += [stats.ScoreRow(f"i{i}", "negative", k, s0 - 0.4 + float(rng.normal(0, 0.01))) for k in range(10)]
    stats.ScoreTable(rows).write_csv(path)


class TestEval:
    def test_faithfulness_separable(self, tmp_path, capsys):
        separable_csv(tmp_path / "s.csv")
        assert main(["eval", "faithfulness", "--scores", str(tmp_path / "s.csv"), "--out-dir", str(tmp_path / "r")]) == 0
        out = capsys.readouterr().out
        assert "| 1.000 |" in out
        report = json.loads((tmp_path / "r/faithfulness.json").read_text())
        assert report["ar"] == 1.0 and report["t2"]["accepted_h2"]
        assert (tmp_path / "r/faithfulness.txt").read_text().strip() == out.strip()

    def test_plausibility_identity(self, tmp_path, capsys):
        rows = [stats.ScoreRow(f"p{i}", "original", 0, 1.0 + 0.4 * i) for i in range(8)]
        stats.ScoreTable(rows).write_csv(tmp_path / "s.csv")
        # score-table keys are item:variant:idx; build a MOS file with those keys
        keyed = stats.MosTable({f"p{i}:original:0": 1.0 + 0.4 * i for i in range(8)})
        keyed.write_csv(tmp_path / "mos_keyed.csv")
        assert main(["eval", "plausibility", "--scores", str(tmp_path / "s.csv"), "--mos", str(tmp_path / "mos_keyed.csv"),
                     "--out-dir", str(tmp_path / "r")]) == 0
        assert json.loads((tmp_path / "r/plausibility.json").read_text())["lcc"] == pytest.approx(1.0)
        assert "1.000" in capsys.readouterr().out

    def test_malformed_header(self, tmp_path, capsys):
        (tmp_path / "s.csv").write_text("item_id,kind,variant_idx,score\na,original,0,0.1\n")
        assert main(["eval", "faithfulness", "--scores", str(tmp_path / "s.csv"), "--out-dir", str(tmp_path)]) == 2
        assert "'variant'" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert main(["eval", "speed"]) == 1
        assert main([]) == 1


class TestProxyMos:
    def test_proxy_values(self, workspace, tmp_path):
        assert main(["proxy-mos", "--variants", str(workspace / "data/variants.jsonl"), "--out", str(tmp_path / "m.csv")]) == 0
        mos = stats.MosTable.read_csv(tmp_path / "m.csv")
        variants = datagen.read_variants(workspace / "data/variants.jsonl")
        assert len(mos) == 21 * len(variants)
        assert set(mos.mos.values()) <= {3.0, 4.0, 5.0}
        assert mos.mos == proxy_mos(variants).mos

    def test_filter_negatives(self, workspace):
        variants = datagen.read_variants(workspace / "data/variants.jsonl")
        manifest = read_manifest(workspace / "data/manifest.jsonl")
        table = Scorer.from_checkpoint(workspace / "run/model.ckpt").score_variants(manifest, variants)
        kept = filter_negatives(table, variants, "pitch")
        flips = {v.item_id: v.negative_flips for v in variants}
        negs = [r for r in kept.rows if r.variant == "negative"]
        assert negs and all("pitch" in flips[r.item_id][r.variant_idx] for r in negs)


class TestConfig:
    def test_defaults(self):
        config = load_config(None)
        assert config.train.batch_size == 32 and config.loss.temperature == 0.07 and config.model.h == 64

    def test_seed_propagates(self):
        assert config_from_dict({"seed": 5}).train.seed == 5

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="bogus"):
            config_from_dict({"bogus": 1})
        with pytest.raises(ConfigError, match="alpha2"):
            config_from_dict({"eval": {"alpha2": 0.1}})
