"""End-to-end command-line tests: artifacts, determinism, exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from refgraph import cli
from refgraph.checkpoint import load_checkpoint
from refgraph.data import load_dataset
from refgraph.harness import evaluate, prepare_scenes

pytestmark = pytest.mark.filterwarnings(
    "ignore:overflow:RuntimeWarning",
    "ignore:invalid value:RuntimeWarning",
)


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def last_json_line(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small dataset + trained checkpoint shared across read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "train.jsonl"
    ckpt = root / "model.ckpt"
    assert cli.main(["gen-data", "--out", str(data), "--scenes", "12",
                     "--seed", "3", "--expressions-per-scene", "2"]) == 0
    assert cli.main(["train", "--data", str(data), "--out", str(ckpt),
                     "--dim", "8", "--k", "2", "--normalization", "none",
                     "--dropout", "0", "--iterations", "6",
                     "--batch-scenes", "4", "--eval-every", "3",
                     "--validation-fraction", "0"]) == 0
    return {"root": root, "data": data, "ckpt": ckpt}


class TestGenData:
    def test_same_seed_twice_is_byte_identical(self, tmp_path, capsys):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            assert run_cli("gen-data", "--out", out, "--scenes", "10",
                           "--seed", "7") == 0
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.jsonl.config.json").read_bytes() == \
               (tmp_path / "b.jsonl.config.json").read_bytes()

    def test_summary_and_config_sidecar(self, tmp_path, capsys):
        out = tmp_path / "d.jsonl"
        assert run_cli("gen-data", "--out", out, "--scenes", "5",
                       "--seed", "1", "--relational-fraction", "0.5") == 0
        summary = last_json_line(capsys)
        assert summary["scenes"] == 5
        assert summary["samples"] == 10
        config = json.loads((tmp_path / "d.jsonl.config.json").read_text())
        assert config["expressions"]["relational_fraction"] == 0.5
        assert config["scene"]["seed"] == 1
        assert len(load_dataset(out)) == 5

    def test_sidecar_features_mode(self, tmp_path, capsys):
        out = tmp_path / "d.jsonl"
        assert run_cli("gen-data", "--out", out, "--scenes", "3",
                       "--seed", "2", "--features", "sidecar") == 0
        side = tmp_path / "d.jsonl.features.json"
        assert side.exists()
        with_side = load_dataset(out, features_path=side)
        assert with_side[0].scene.regions[0].appearance.shape == (64,)

    def test_data_dir_env_resolves_bare_paths(self, tmp_path, monkeypatch,
                                              capsys):
        store = tmp_path / "store"
        monkeypatch.setenv(cli.DATA_DIR_ENV, str(store))
        monkeypatch.chdir(tmp_path)
        assert run_cli("gen-data", "--out", "bare.jsonl", "--scenes", "2",
                       "--seed", "0") == 0
        assert (store / "bare.jsonl").exists()
        assert run_cli("gen-data", "--out", "./local.jsonl", "--scenes", "2",
                       "--seed", "0") == 0
        assert (tmp_path / "local.jsonl").exists()

    def test_impossible_spec_exits_generation_code(self, tmp_path, capsys):
        code = run_cli("gen-data", "--out", tmp_path / "x.jsonl",
                       "--scenes", "2", "--width", "200", "--height", "150",
                       "--regions-min", "8", "--regions-max", "8",
                       "--max-iou", "0.0", "--seed", "5")
        assert code == cli.EXIT_CODES["generation"]
        err = capsys.readouterr().err
        assert err.startswith("error: GenerationError:")
        assert len(err.strip().splitlines()) == 1


class TestTrainEval:
    def test_train_writes_checkpoint_and_metrics(self, tmp_path, capsys):
        data = tmp_path / "d.jsonl"
        run_cli("gen-data", "--out", data, "--scenes", "8", "--seed", "4")
        code = run_cli("train", "--data", data, "--out", tmp_path / "m.ckpt",
                       "--metrics", tmp_path / "m.jsonl", "--dim", "8",
                       "--k", "2", "--normalization", "none", "--dropout",
                       "0", "--iterations", "4", "--batch-scenes", "4",
                       "--validation-fraction", "0.2", "--eval-every", "2")
        assert code == 0
        summary = last_json_line(capsys)
        assert summary["iterations"] == 4
        assert summary["final_loss"] > 0
        assert summary["val_accuracy"] is not None
        entries = [json.loads(line) for line in
                   (tmp_path / "m.jsonl").read_text().splitlines()]
        assert entries[0]["type"] == "config"
        assert any(e["type"] == "loss" for e in entries)
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        assert loaded.iteration == 4

    def test_report_dir_gets_loss_curve(self, tmp_path, capsys):
        data = tmp_path / "d.jsonl"
        run_cli("gen-data", "--out", data, "--scenes", "6", "--seed", "4")
        code = run_cli("train", "--data", data, "--out", tmp_path / "m.ckpt",
                       "--report", tmp_path / "rpt", "--dim", "8", "--k", "2",
                       "--normalization", "none", "--dropout", "0",
                       "--iterations", "3", "--batch-scenes", "3")
        assert code == 0
        assert (tmp_path / "rpt" / "loss.png").stat().st_size > 1000
        assert (tmp_path / "rpt" / "metrics.jsonl").exists()
        report = json.loads((tmp_path / "rpt" / "train.json").read_text())
        assert report["model"]["dim"] == 8
        assert report["train"]["iterations"] == 3

    def test_config_file_precedence(self, tmp_path, capsys):
        data = tmp_path / "d.jsonl"
        run_cli("gen-data", "--out", data, "--scenes", "6", "--seed", "4")
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "model": {"dim": 8, "k": 2, "normalization": "none",
                      "dropout": 0.0},
            "train": {"iterations": 3, "batch_scenes": 3},
        }))
        # file beats defaults
        run_cli("train", "--data", data, "--out", tmp_path / "a.ckpt",
                "--config", cfg)
        assert last_json_line(capsys)["iterations"] == 3
        # flags beat file
        run_cli("train", "--data", data, "--out", tmp_path / "b.ckpt",
                "--config", cfg, "--iterations", "2")
        assert last_json_line(capsys)["iterations"] == 2
        assert load_checkpoint(tmp_path / "b.ckpt").model.config.dim == 8

    def test_eval_matches_in_memory_evaluation(self, workspace, capsys):
        code = run_cli("eval", "--data", workspace["data"], "--checkpoint",
                       workspace["ckpt"])
        assert code == 0
        summary = last_json_line(capsys)
        records = load_dataset(workspace["data"])
        direct = evaluate(records, model=load_checkpoint(
            workspace["ckpt"]).model)
        assert summary["accuracy"] == direct.accuracy
        assert summary["correct"] == direct.correct
        assert summary["relational_accuracy"] == direct.relational_accuracy

    def test_eval_report_file(self, workspace, tmp_path, capsys):
        code = run_cli("eval", "--data", workspace["data"], "--checkpoint",
                       workspace["ckpt"], "--report", tmp_path / "rpt")
        assert code == 0
        payload = json.loads((tmp_path / "rpt" / "eval.json").read_text())
        assert payload["total"] == 24
        assert len(payload["per_sample"]) == 24
        assert payload["config"]["dim"] == 8

    def test_divergent_training_exits_numeric_code(self, tmp_path, capsys):
        data = tmp_path / "d.jsonl"
        run_cli("gen-data", "--out", data, "--scenes", "4", "--seed", "4")
        code = run_cli("train", "--data", data, "--out", tmp_path / "m.ckpt",
                       "--dim", "8", "--k", "2", "--normalization", "none",
                       "--dropout", "0", "--iterations", "40",
                       "--batch-scenes", "4", "--base-lr", "1e200")
        assert code == cli.EXIT_CODES["numeric"]
        assert "error: TrainingDivergedError:" in capsys.readouterr().err


class TestExplain:
    def test_dump_values_match_in_memory_exactly(self, workspace, tmp_path,
                                                 capsys):
        code = run_cli("explain", "--data", workspace["data"], "--checkpoint",
                       workspace["ckpt"], "--scene", "1", "--sample", "1",
                       "--out-dir", tmp_path)
        assert code == 0
        dump = json.loads((tmp_path / "explain-1-1.json").read_text())
        loaded = load_checkpoint(workspace["ckpt"])
        records = load_dataset(workspace["data"])
        record = next(r for r in records if r.scene_id == 1)
        fresh = cli.attention_dump(loaded.model, record, 1)
        assert dump == json.loads(json.dumps(fresh))
        # exact float round-trip, not approximate
        probs = np.array(dump["probabilities"])
        prep = prepare_scenes([record], loaded.model.vocab,
                              loaded.model.config.k)[0]
        item = loaded.model.predict(prep.graph, prep.items[1][0])
        assert probs.tolist() == item.probabilities.data.reshape(-1).tolist()

    def test_dump_distributions_normalized(self, workspace, tmp_path,
                                           capsys):
        run_cli("explain", "--data", workspace["data"], "--checkpoint",
                workspace["ckpt"], "--out-dir", tmp_path)
        dump = json.loads((tmp_path / "explain-0-0.json").read_text())
        for name, row in dump["token_attention"].items():
            assert abs(sum(row) - 1.0) < 1e-9, name
        assert abs(sum(dump["component_weights"].values()) - 1.0) < 1e-9
        assert abs(sum(dump["node_attention"]) - 1.0) < 1e-9
        assert abs(sum(dump["probabilities"]) - 1.0) < 1e-9
        for kind in ("intra_edges", "inter_edges"):
            by_source = {}
            for edge in dump[kind]:
                by_source.setdefault(edge["i"], []).append(edge["value"])
            for source, values in by_source.items():
                assert abs(sum(values) - 1.0) < 1e-9, (kind, source)

    def test_svg_and_dump_deterministic(self, workspace, tmp_path, capsys):
        for sub in ("x", "y"):
            run_cli("explain", "--data", workspace["data"], "--checkpoint",
                    workspace["ckpt"], "--out-dir", tmp_path / sub)
        for name in ("explain-0-0.json", "explain-0-0.svg"):
            assert (tmp_path / "x" / name).read_bytes() == \
                   (tmp_path / "y" / name).read_bytes()

    def test_single_category_scene_has_empty_inter_edges(self, tmp_path,
                                                         capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "scene": {"categories": ["cat"], "regions_range": [4, 5],
                      "seed": 11},
            "expressions": {"expressions_per_scene": 1},
        }))
        data = tmp_path / "onecat.jsonl"
        assert run_cli("gen-data", "--out", data, "--scenes", "6",
                       "--config", cfg) == 0
        ckpt = tmp_path / "m.ckpt"
        assert run_cli("train", "--data", data, "--out", ckpt, "--dim", "8",
                       "--k", "2", "--normalization", "none", "--dropout",
                       "0", "--iterations", "2", "--batch-scenes", "3") == 0
        assert run_cli("explain", "--data", data, "--checkpoint", ckpt,
                       "--out-dir", tmp_path / "exp") == 0
        dump = json.loads(
            (tmp_path / "exp" / "explain-0-0.json").read_text())
        assert dump["inter_edges"] == []
        assert all(not ns for ns in dump["graph"]["inter_neighbors"])
        svg = (tmp_path / "exp" / "explain-0-0.svg").read_text()
        assert 'marker-end="url(#arrow-inter)"' not in svg

    def test_missing_scene_and_sample_exit_data_code(self, workspace,
                                                     tmp_path, capsys):
        code = run_cli("explain", "--data", workspace["data"], "--checkpoint",
                       workspace["ckpt"], "--scene", "999",
                       "--out-dir", tmp_path)
        assert code == cli.EXIT_CODES["data"]
        assert "not present" in capsys.readouterr().err
        code = run_cli("explain", "--data", workspace["data"], "--checkpoint",
                       workspace["ckpt"], "--sample", "9",
                       "--out-dir", tmp_path)
        assert code == cli.EXIT_CODES["data"]
        assert "out of range" in capsys.readouterr().err


class TestAblate:
    def test_two_variant_run_writes_artifacts(self, tmp_path, capsys):
        train_p, test_p = tmp_path / "tr.jsonl", tmp_path / "te.jsonl"
        run_cli("gen-data", "--out", train_p, "--scenes", "6", "--seed", "1")
        run_cli("gen-data", "--out", test_p, "--scenes", "3", "--seed", "2")
        out = tmp_path / "ablation"
        code = run_cli("ablate", "--train-data", train_p, "--test-data",
                       test_p, "--out-dir", out, "--variants",
                       "NodeRep,LGRANs", "--dim", "8", "--k", "2",
                       "--normalization", "none", "--dropout", "0",
                       "--iterations", "2", "--batch-scenes", "3")
        assert code == 0
        table = capsys.readouterr().out
        assert "NodeRep" in table and "LGRANs" in table
        csv_text = (out / "ablation.csv").read_text()
        assert csv_text.splitlines()[0].startswith("variant,")
        assert len(csv_text.strip().splitlines()) == 3
        assert (out / "ablation.png").stat().st_size > 1000
        assert (out / "checkpoints" / "LGRANs.ckpt").exists()
        assert (out / "metrics" / "NodeRep-metrics.jsonl").exists()
        config = json.loads((out / "config.json").read_text())
        assert config["variants"] == ["NodeRep", "LGRANs"]

    def test_unknown_variant_exits_data_code(self, tmp_path, capsys):
        code = run_cli("ablate", "--train-data", "x", "--test-data", "y",
                       "--out-dir", tmp_path, "--variants", "Bogus")
        assert code == cli.EXIT_CODES["data"]


class TestGradcheckCommand:
    def test_pass_exit_zero(self, capsys):
        code = run_cli("gradcheck", "--regions", "4", "--dim", "6",
                       "--max-elements", "2")
        assert code == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "OVERALL" in out

    def test_unreachable_tolerance_exits_numeric(self, capsys):
        code = run_cli("gradcheck", "--regions", "4", "--dim", "6",
                       "--max-elements", "1", "--tolerance", "1e-30")
        assert code == cli.EXIT_CODES["numeric"]
        assert "FAIL" in capsys.readouterr().out


class TestErrorPaths:
    def test_usage_errors_exit_two(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["no-such-command"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--nope"])
        assert exc.value.code == 2

    def test_malformed_dataset_exits_data_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        region = {"id": 0, "category": "cat", "box": [0, 0, 10, 10],
                  "attrs": {}, "feature": [0.0]}
        bad.write_text(json.dumps({
            "format_version": 1, "scene_id": 0, "image": [640, 480],
            "regions": [region, region],
            "expressions": [{"tokens": ["the", "cat"], "referent_id": 0,
                             "ast": None, "tag": "attribute-only"}],
        }) + "\n")
        code = run_cli("eval", "--data", bad, "--checkpoint", "none.ckpt")
        assert code == cli.EXIT_CODES["data"]
        err = capsys.readouterr().err
        assert err.startswith("error: DataFormatError:")
        assert "line 1" in err

    def test_future_dataset_version_exits_compat_code(self, tmp_path,
                                                      capsys):
        bad = tmp_path / "v99.jsonl"
        bad.write_text(json.dumps({
            "format_version": 99, "scene_id": 0, "image": [640, 480],
            "regions": [{"id": 0, "category": "cat",
                         "box": [0, 0, 10, 10], "attrs": {},
                         "feature": [0.0]}],
            "expressions": [{"tokens": ["the", "cat"], "referent_id": 0,
                             "ast": None, "tag": "attribute-only"}],
        }) + "\n")
        code = run_cli("eval", "--data", bad, "--checkpoint", "none.ckpt")
        assert code == cli.EXIT_CODES["compat"]
        assert "DatasetVersionError" in capsys.readouterr().err

    def test_corrupt_checkpoint_exits_compat_code(self, workspace, tmp_path,
                                                  capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOT-A-CHECKPOINT\n" +
                        workspace["ckpt"].read_bytes()[22:])
        code = run_cli("eval", "--data", workspace["data"],
                       "--checkpoint", bad)
        assert code == cli.EXIT_CODES["compat"]
        assert capsys.readouterr().err.startswith("error: Checkpoint")

    def test_unknown_config_section_and_key(self, tmp_path, capsys):
        cfg = tmp_path / "c1.json"
        cfg.write_text('{"bogus": {}}')
        code = run_cli("gen-data", "--out", tmp_path / "d.jsonl",
                       "--scenes", "1", "--config", cfg)
        assert code == cli.EXIT_CODES["data"]
        cfg2 = tmp_path / "c2.json"
        cfg2.write_text('{"scene": {"nope": 1}}')
        code = run_cli("gen-data", "--out", tmp_path / "d.jsonl",
                       "--scenes", "1", "--config", cfg2)
        assert code == cli.EXIT_CODES["data"]
        assert "unknown key 'nope'" in capsys.readouterr().err

    def test_missing_file_exits_unexpected(self, capsys):
        code = run_cli("eval", "--data", "missing.jsonl",
                       "--checkpoint", "missing.ckpt")
        assert code == cli.EXIT_CODES["unexpected"]
        assert "FileNotFoundError" in capsys.readouterr().err


def test_module_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "refgraph", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("gen-data", "train", "eval", "ablate", "explain",
                 "gradcheck"):
        assert name in proc.stdout
