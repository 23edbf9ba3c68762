import json

import numpy as np
import pytest

from synvqa.cli import main
from synvqa.pipeline import load_dataset, read_features, write_features

PHRASE = (
    "1\tgirl\t_\t_\t_\t_\t0\t_\t_\t_\n"
    "2\tin\t_\t_\t_\t_\t1\t_\t_\t_\n"
    "3\tgreen\t_\t_\t_\t_\t2\t_\t_\t_\n"
    "4\tsitting\t_\t_\t_\t_\t1\t_\t_\t_\n"
    "5\ton\t_\t_\t_\t_\t4\t_\t_\t_\n\n"
)


@pytest.fixture()
def dataset_dir(tmp_path):
    out = tmp_path / "ds"
    code = main(
        ["synth", "--out", str(out), "--seed", "3",
         "--n-train", "10", "--n-test", "4"]
    )
    assert code == 0
    return out


class TestSynth:
    def test_writes_loadable_manifests(self, dataset_dir, capsys):
        train = load_dataset(dataset_dir / "train.jsonl")
        test = load_dataset(dataset_dir / "test.jsonl")
        assert len(train) == 10
        assert len(test) == 4
        ex = train[0]
        assert ex.Q.shape[1] == 16
        assert ex.F.shape == (8, 16)

    def test_same_seed_same_bytes(self, tmp_path):
        for sub in ("a", "b"):
            assert main(
                ["synth", "--out", str(tmp_path / sub), "--seed", "5",
                 "--n-train", "4", "--n-test", "2"]
            ) == 0
        a = (tmp_path / "a" / "train.jsonl").read_bytes()
        b = (tmp_path / "b" / "train.jsonl").read_bytes()
        assert a == b
        fa = (tmp_path / "a" / "examples" / "train-00000.frames.bin").read_bytes()
        fb = (tmp_path / "b" / "examples" / "train-00000.frames.bin").read_bytes()
        assert fa == fb

    def test_env_seed_wins(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SCAN_SEED", "42")
        assert main(
            ["synth", "--out", str(tmp_path / "ds"), "--seed", "1",
             "--n-train", "2", "--n-test", "1"]
        ) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["seed"] == 42

    def test_infeasible_spec_is_data_error(self, tmp_path, capsys):
        code = main(
            ["synth", "--out", str(tmp_path / "ds"), "--vocab-size", "3"]
        )
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_multiple_choice_dataset(self, tmp_path):
        out = tmp_path / "mc"
        assert main(
            ["synth", "--out", str(out), "--task", "multiple_choice",
             "--n-train", "4", "--n-test", "2"]
        ) == 0
        (ex, *_) = load_dataset(out / "train.jsonl")
        assert len(ex.candidates) == 4


class TestBuildHypergraph:
    def test_exports_json_and_csv(self, tmp_path, capsys):
        conllu = tmp_path / "q.conllu"
        conllu.write_text(PHRASE)
        out = tmp_path / "h.json"
        csv = tmp_path / "h.csv"
        code = main(
            ["build-hypergraph", "--conllu", str(conllu),
             "--out", str(out), "--csv", str(csv)]
        )
        assert code == 0
        assert json.loads(capsys.readouterr().out) == {"nodes": 5, "edges": 7}
        payload = json.loads(out.read_text())
        assert payload["n_nodes"] == 5
        assert [1, 2, 3] in payload["edges"]
        assert [1, 4, 5] in payload["edges"]
        assert payload["forms"] == ["girl", "in", "green", "sitting", "on"]
        header, *rows = csv.read_text().strip().splitlines()
        assert header.startswith("node,")
        assert len(rows) == 5

    def test_missing_file_exits_1(self, tmp_path, capsys):
        code = main(
            ["build-hypergraph", "--conllu", str(tmp_path / "no.conllu"),
             "--out", str(tmp_path / "h.json")]
        )
        assert code == 1

    def test_multi_sentence_rejected(self, tmp_path):
        conllu = tmp_path / "two.conllu"
        conllu.write_text(PHRASE + PHRASE)
        assert main(
            ["build-hypergraph", "--conllu", str(conllu),
             "--out", str(tmp_path / "h.json")]
        ) == 1


class TestAlign:
    def test_plan_mass_and_shape(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        write_features(tmp_path / "x.bin", rng.normal(size=(4, 6)))
        write_features(tmp_path / "f.bin", rng.normal(size=(7, 6)))
        out_csv = tmp_path / "g.csv"
        out_json = tmp_path / "g.json"
        code = main(
            ["align", "--text", str(tmp_path / "x.bin"),
             "--frames", str(tmp_path / "f.bin"),
             "--out-csv", str(out_csv), "--out-json", str(out_json)]
        )
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["rows"] == 4 and summary["cols"] == 7
        grid = np.array(
            [[float(v) for v in line.split(",")]
             for line in out_csv.read_text().strip().splitlines()]
        )
        assert grid.shape == (4, 7)
        assert abs(grid.sum() - 1.0) <= 1e-6
        assert np.all(grid >= 0)
        plan = np.array(json.loads(out_json.read_text())["plan"])
        assert np.allclose(plan, grid, atol=1e-15)

    def test_width_mismatch_exits_1(self, tmp_path, capsys):
        write_features(tmp_path / "x.bin", np.ones((2, 3)))
        write_features(tmp_path / "f.bin", np.ones((2, 4)))
        code = main(
            ["align", "--text", str(tmp_path / "x.bin"),
             "--frames", str(tmp_path / "f.bin"),
             "--out-csv", str(tmp_path / "g.csv")]
        )
        assert code == 1
        assert "width mismatch" in capsys.readouterr().err


class TestTrainEvalCli:
    def test_train_then_eval(self, dataset_dir, tmp_path, capsys):
        model_path = tmp_path / "model.npz"
        code = main(
            ["train", "--manifest", str(dataset_dir / "train.jsonl"),
             "--eval-manifest", str(dataset_dir / "test.jsonl"),
             "--out", str(model_path),
             "--d-w", "16", "--d-v", "16", "--d", "8", "--d-o", "8",
             "--epochs", "2", "--optimizer", "adam", "--ot-iters", "5"]
        )
        assert code == 0
        log_lines = capsys.readouterr().out.strip().splitlines()
        assert len(log_lines) == 2
        assert log_lines[0].startswith("epoch=0 loss=")
        assert "accuracy=" in log_lines[0]
        assert model_path.exists()

        code = main(
            ["eval", "--model", str(model_path),
             "--manifest", str(dataset_dir / "test.jsonl")]
        )
        assert code == 0
        metrics = json.loads(capsys.readouterr().out)
        assert 0.0 <= metrics["accuracy"] <= 1.0

    def test_config_file_plus_flag_override(self, dataset_dir, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "d_w=16\nd_v=16\nd=8\nd_o=8\nepochs=5\noptimizer=adam\not_iters=5\n"
        )
        code = main(
            ["train", "--manifest", str(dataset_dir / "train.jsonl"),
             "--config", str(cfg), "--epochs", "1"]
        )
        assert code == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 1

    def test_byte_identical_logs(self, dataset_dir, capsys):
        args = [
            "train", "--manifest", str(dataset_dir / "train.jsonl"),
            "--d-w", "16", "--d-v", "16", "--d", "8", "--d-o", "8",
            "--epochs", "2", "--seed", "11", "--optimizer", "adam",
            "--ot-iters", "5",
        ]
        assert main(args) == 0
        first = capsys.readouterr().out
        assert main(args) == 0
        assert capsys.readouterr().out == first

    def test_dim_mismatch_exits_1(self, dataset_dir, capsys):
        code = main(
            ["train", "--manifest", str(dataset_dir / "train.jsonl"),
             "--d-w", "9", "--d-v", "16"]
        )
        assert code == 1
        assert "d_w" in capsys.readouterr().err

    def test_eval_on_junk_model_exits_1(self, dataset_dir, tmp_path, capsys):
        junk = tmp_path / "junk.npz"
        np.savez(junk, a=np.ones(2))
        code = main(
            ["eval", "--model", str(junk),
             "--manifest", str(dataset_dir / "test.jsonl")]
        )
        assert code == 1


class TestGradcheck:
    def test_passes_at_small_dims(self, capsys):
        code = main(["gradcheck", "--dims", "3", "--seed", "7"])
        report = json.loads(capsys.readouterr().out)
        assert code == 0
        assert report["ok"] is True
        assert report["max_rel_err"] <= 1e-4

    def test_impossible_tolerance_exits_1(self, capsys):
        code = main(["gradcheck", "--dims", "3", "--seed", "7", "--tol", "0"])
        report = json.loads(capsys.readouterr().out)
        assert code == 1
        assert report["ok"] is False


class TestInspect:
    def test_inspect_each_artifact_kind(self, dataset_dir, tmp_path, capsys):
        frames = dataset_dir / "examples" / "train-00000.frames.bin"
        assert main(["inspect", str(frames)]) == 0
        assert json.loads(capsys.readouterr().out)["kind"] == "features"

        assert main(["inspect", str(dataset_dir / "train.jsonl")]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["kind"] == "manifest"
        assert payload["examples"] == 10

        conllu = dataset_dir / "examples" / "train-00000.conllu"
        assert main(["inspect", str(conllu)]) == 0
        assert json.loads(capsys.readouterr().out)["kind"] == "parses"

        assert main(["inspect", str(dataset_dir / "embeddings.txt")]) == 0
        assert json.loads(capsys.readouterr().out)["kind"] == "embeddings"

    def test_inspect_model(self, dataset_dir, tmp_path, capsys):
        model_path = tmp_path / "model.npz"
        main(
            ["train", "--manifest", str(dataset_dir / "train.jsonl"),
             "--out", str(model_path),
             "--d-w", "16", "--d-v", "16", "--d", "8", "--d-o", "8",
             "--epochs", "1", "--ot-iters", "5"]
        )
        capsys.readouterr()
        assert main(["inspect", str(model_path)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["kind"] == "model"
        assert payload["config"]["d"] == 8

    def test_inspect_missing_file(self, tmp_path, capsys):
        assert main(["inspect", str(tmp_path / "ghost.bin")]) == 1


class TestUsageErrors:
    def test_unknown_command_exits_2(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["transmogrify"])
        assert err.value.code == 2

    def test_missing_required_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["build-hypergraph", "--out", "x.json"])
        assert err.value.code == 2

    def test_bad_bool_flag_exits_2(self, dataset_dir, capsys):
        with pytest.raises(SystemExit) as err:
            main(
                ["train", "--manifest", str(dataset_dir / "train.jsonl"),
                 "--use-frames", "perhaps"]
            )
        assert err.value.code == 2
