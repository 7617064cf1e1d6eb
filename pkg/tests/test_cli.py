import json

import numpy as np
import pytest

from cerd import cli
from cerd.data_io import load
from cerd.train import VARIANTS, Checkpoint

TINY = ["hidden=8", "tokens=2", "experts=4", "top_k=2", "heads=2", "warmup_epochs=0"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def sets(*items):
    out = []
    for item in items:
        out += ["--set", item]
    return out


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    assert run("synth", "--out", out, *sets("n_subjects=120", "seed=3")) == 0
    return out / "manifest.json"


@pytest.fixture(scope="module")
def trained(bundle, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--data", bundle, "--out", out, *sets(*TINY, "epochs=1")) == 0
    return out


class TestSynth:
    def test_file_inventory(self, tmp_path):
        assert run("synth", "--out", tmp_path) == 0
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["A.csv", "B.csv", "C.csv", "D.csv", "config.json", "importance.json", "labels.csv", "manifest.json"]
        importance = json.loads((tmp_path / "importance.json").read_text())
        assert set(importance) == {"shared", "A", "B", "C", "D"}
        assert json.loads((tmp_path / "config.json").read_text())["synth"]["n_subjects"] == 1200

    def test_rerun_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("synth", "--out", tmp_path / name, *sets("n_subjects=60")) == 0
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name

    def test_spec_file(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"n_subjects": 40, "modality_names": ["X", "Y"], "modality_dims": [3, 5],
                                    "missing_rates": [0.2, 0.2], "private_signal": [0.3, 0.3]}))
        assert run("synth", "--spec", spec, "--out", tmp_path / "o", "--write-mask") == 0
        ds = load(tmp_path / "o" / "manifest.json")
        assert ds.modalities == ("X", "Y") and ds.dims == (3, 5) and len(ds) == 40
        assert (tmp_path / "o" / "mask.csv").exists()

    def test_all_missing_is_configuration_error(self, tmp_path, capsys):
        assert run("synth", "--out", tmp_path, *sets("missing_rates=[0.99,0.99,0.99,0.99]")) == 1
        err = json.loads(capsys.readouterr().err.removeprefix("cerd: "))
        assert err["error"] == "ConfigurationError" and err["exit_code"] == 1

    def test_output_root_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
        assert run("synth", *sets("n_subjects=30")) == 0
        assert (tmp_path / "synth" / "manifest.json").exists()


class TestConfig:
    def test_unknown_top_level_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"trian": {}}))
        with pytest.raises(cli.ConfigurationError, match="trian"):
            cli.load_config(cfg)

    def test_unknown_train_key(self, bundle, tmp_path):
        assert run("train", "--data", bundle, "--out", tmp_path, *sets("learning_rate=0.1")) == 1

    def test_overrides_beat_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"lr": 0.5, "epochs": 3}, "synth": {"seed": 2}}))
        doc = cli.load_config(cfg, ["lr=0.25", "synth.seed=9"])
        tc = cli.train_config(doc)
        assert tc.lr == 0.25 and tc.epochs == 3 and tc.hidden == 16
        assert cli.synth_spec(doc).seed == 9

    def test_paper_preset(self):
        tc = cli.train_config(cli.load_config(None, ["preset=paper"]))
        assert (tc.hidden, tc.tokens, tc.experts, tc.top_k) == (128, 16, 16, 4)

    def test_bad_override_syntax(self):
        with pytest.raises(cli.UsageError):
            cli.load_config(None, ["lr"])

    def test_usage_errors_exit_one(self):
        assert run("frobnicate") == 1
        assert run("train", "--bogus") == 1
        assert run("train") == 1  # no data given

    def test_missing_manifest_is_data_error(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope.json", "--out", tmp_path) == 2


class TestTrain:
    def test_artifacts(self, trained):
        names = {p.name for p in trained.iterdir()}
        assert {"checkpoint.json", "metrics.jsonl", "final_metrics.csv", "config.json"} <= names
        lines = (trained / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1 and json.loads(lines[0])["epoch"] == 1
        rows = (trained / "final_metrics.csv").read_text().splitlines()
        assert rows[0] == "split,acc,f1,auc" and [r.split(",")[0] for r in rows[1:]] == ["val", "test"]
        config = json.loads((trained / "config.json").read_text())
        assert config["train"]["hidden"] == 8 and config["train"]["epochs"] == 1

    def test_rerun_identical(self, bundle, trained, tmp_path):
        assert run("train", "--data", bundle, "--out", tmp_path, *sets(*TINY, "epochs=1")) == 0
        for name in ("final_metrics.csv", "metrics.jsonl", "checkpoint.json"):
            assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()

    def test_static_fill_has_no_generators(self, bundle, tmp_path):
        assert run("train", "--data", bundle, "--out", tmp_path, *sets(*TINY, "epochs=1", "completion=static_fill")) == 0
        state = Checkpoint.load(tmp_path / "checkpoint.json").state
        assert not any(k.startswith("generators") for k in state)
        assert any(k.startswith("static_fill") for k in state)


class TestEval:
    def test_prints_and_writes(self, bundle, trained, tmp_path, capsys):
        for name in ("a", "b"):
            assert run("eval", "--checkpoint", trained / "checkpoint.json", "--data", bundle, "--out", tmp_path / name) == 0
        printed = capsys.readouterr().out.splitlines()
        assert printed[0] == printed[1] and printed[0].startswith("acc=")
        assert (tmp_path / "a" / "eval_test.csv").read_bytes() == (tmp_path / "b" / "eval_test.csv").read_bytes()

    def test_catalog_mismatch(self, trained, tmp_path):
        assert run("synth", "--out", tmp_path / "d", *sets("n_subjects=40", "modality_names=[\"A\",\"B\",\"C\"]",
                                                           "modality_dims=[24,40,18]", "missing_rates=[0.1,0.1,0.1]",
                                                           "private_signal=[0.2,0.2,0.2]")) == 0
        code = run("eval", "--checkpoint", trained / "checkpoint.json", "--data", tmp_path / "d" / "manifest.json",
                   "--out", tmp_path / "e")
        assert code == 2

    def test_memorized_toy_set(self, tmp_path):
        assert run("synth", "--out", tmp_path / "d", *sets("n_subjects=20", "seed=1")) == 0
        manifest = tmp_path / "d" / "manifest.json"
        overrides = sets(*TINY, "epochs=60", "lr=0.01", "dropout=0.0", "batch_size=4")
        assert run("train", "--data", manifest, "--out", tmp_path / "t", *overrides) == 0
        run("eval", "--checkpoint", tmp_path / "t" / "checkpoint.json", "--data", manifest, "--split", "train",
            "--out", tmp_path / "e")
        acc = float((tmp_path / "e" / "eval_train.csv").read_text().splitlines()[1].split(",")[1])
        assert acc >= 0.9


class TestAttribute:
    def test_reports(self, bundle, trained, tmp_path):
        assert run("attribute", "--checkpoint", trained / "checkpoint.json", "--data", bundle, "--out", tmp_path) == 0
        lines = (tmp_path / "reports.jsonl").read_text().splitlines()
        assert len(lines) == len(load(bundle).rows("test"))
        for line in lines:
            r = json.loads(line)
            total = np.asarray(r["shared"]) + sum(np.asarray(c) for c in r["contributions"].values())
            assert np.abs(np.asarray(r["logits"]) - total).max() < 1e-9
        summary = (tmp_path / "importance_summary.csv").read_text().splitlines()
        weights = [float(row.split(",")[1]) for row in summary[1:]]
        assert abs(sum(weights) - 1.0) < 1e-9
        assert json.loads((tmp_path / "importance_summary.json").read_text())["count"] == len(lines)

    def test_plain_head_has_no_attribution(self, bundle, tmp_path):
        assert run("train", "--data", bundle, "--out", tmp_path / "t", *sets(*TINY, "epochs=1", "head=plain_linear")) == 0
        assert run("attribute", "--checkpoint", tmp_path / "t" / "checkpoint.json", "--data", bundle,
                   "--out", tmp_path / "a") == 2


class TestAblate:
    def test_single_seed_medians(self, bundle, tmp_path):
        assert run("ablate", "--data", bundle, "--out", tmp_path, "--seeds", 1, *sets(*TINY, "epochs=1")) == 0
        rows = [line.split(",") for line in (tmp_path / "ablation.csv").read_text().splitlines()]
        header = rows[0]
        assert header == ["variant", "n_params", "seed0_acc", "seed0_f1", "seed0_auc",
                          "median_acc", "median_f1", "median_auc"]
        assert [r[0] for r in rows[1:]] == list(VARIANTS)
        for r in rows[1:]:
            assert r[2:5] == r[5:8]
            run_csv = (tmp_path / "runs" / r[0] / "seed0" / "final_metrics.csv").read_text().splitlines()[1]
            assert run_csv.split(",")[1:] == r[2:5]

    def test_unknown_variant(self, bundle, tmp_path):
        assert run("ablate", "--data", bundle, "--out", tmp_path, "--variants", "full,bogus") == 1

    def test_medians_over_seeds(self):
        runs = {("full", s): {"acc": a, "f1": a, "auc": a} for s, a in zip(range(3), (0.2, 0.9, 0.5))}
        text = cli.ablation_csv(["full"], [0, 1, 2], {"full": 10}, runs)
        assert text.splitlines()[1].split(",")[-3:] == ["0.5", "0.5", "0.5"]


class TestGradcheck:
    def test_unsupported_scale(self):
        assert run("gradcheck", "--scale", "huge") == 1

    def test_failure_exits_three(self, monkeypatch, capsys):
        monkeypatch.setattr(cli, "tiny_gradcheck", lambda seed: {"head.private": 3e-4, "backbone.router": 1e-9})
        assert run("gradcheck") == 3
        out = capsys.readouterr().out
        assert "head.private" in out and "FAIL" in out

    def test_module_names(self):
        assert cli._module_name("generators.2.blocks.0.attn.q_proj.weight") == "generators.blocks"
        assert cli._module_name("tokenizers.1.proj") == "tokenizers.proj"
