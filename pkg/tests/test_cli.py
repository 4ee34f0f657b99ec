import hashlib
import json
from pathlib import Path

import jsonschema
import pytest

from gmml.cli import main

SCHEMA_DIR = Path(__file__).resolve().parents[1] / "src" / "gmml" / "schemas"


def schema(name):
    return json.loads((SCHEMA_DIR / name).read_text())


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


GEN_FLAGS = [
    "gen-data", "--classes", "12", "--modes-per-class", "2", "--dim", "4",
    "--samples-per-class", "20", "--seed", "3",
]
FAST_TRAIN = [
    "--epochs", "2", "--batch-size", "16", "--lr", "0.003",
    "--warmup-epochs", "1", "--decay-epoch", "2",
    "--hidden-dims", "8", "--head-dim", "4", "--seed", "0",
]


@pytest.fixture()
def dataset(tmp_path):
    path = tmp_path / "data.gmds"
    assert main(GEN_FLAGS + ["-o", str(path)]) == 0
    return path


@pytest.fixture()
def checkpoint(tmp_path, dataset):
    path = tmp_path / "enc.gmml"
    assert main(["train", "--loss", "gm", "--data", str(dataset)] + FAST_TRAIN + ["-o", str(path)]) == 0
    return path


class TestGenData:
    def test_writes_dataset_and_manifest(self, tmp_path, dataset, capsys):
        assert dataset.exists()
        manifest = json.loads((str(dataset) + ".manifest.json" and Path(str(dataset) + ".manifest.json")).read_text())
        jsonschema.validate(manifest, schema("manifest.schema.json"))
        assert manifest["subcommand"] == "gen-data"

    def test_deterministic_bytes(self, tmp_path):
        p1, p2 = tmp_path / "a.gmds", tmp_path / "b.gmds"
        assert main(GEN_FLAGS + ["-o", str(p1)]) == 0
        assert main(GEN_FLAGS + ["-o", str(p2)]) == 0
        assert sha256(p1) == sha256(p2)

    def test_preset(self, tmp_path, capsys):
        out = tmp_path / "p.gmds"
        assert main(["gen-data", "--preset", "noise-50", "--samples-per-class", "4",
                     "--seed", "0", "-o", str(out)]) == 0
        assert "classes train/val/test = 32/8/10" in capsys.readouterr().out

    def test_missing_output_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--seed", "0"])
        assert exc.value.code == 2


class TestTrain:
    def test_artifacts(self, tmp_path, dataset, checkpoint):
        assert checkpoint.exists()
        history = Path(str(checkpoint) + ".history.csv")
        assert history.read_text().splitlines()[0] == "epoch,mean_loss,lr,wall_time"
        assert len(history.read_text().splitlines()) == 3
        assert history.with_suffix(".png").stat().st_size > 0
        manifest = json.loads(Path(str(checkpoint) + ".manifest.json").read_text())
        jsonschema.validate(manifest, schema("manifest.schema.json"))

    def test_unknown_loss_is_usage_error(self, dataset, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--loss", "triplet", "--data", str(dataset), "-o", "x"])
        assert exc.value.code == 2

    def test_missing_data_file_is_runtime_error(self, tmp_path, capsys):
        rc = main(["train", "--loss", "gm", "--data", str(tmp_path / "nope.gmds")]
                  + FAST_TRAIN + ["-o", str(tmp_path / "x.gmml")])
        assert rc == 1
        assert "error" in capsys.readouterr().err


class TestEval:
    def run_eval(self, tmp_path, dataset, checkpoint, seed="0", extra=()):
        out = tmp_path / f"report{seed}.json"
        rc = main(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset),
                   "--n", "2", "--k", "1", "--q", "5", "--trials", "20",
                   "--seed", seed, *extra, "-o", str(out)])
        return rc, out

    def test_report_schema_and_manifest(self, tmp_path, dataset, checkpoint):
        rc, out = self.run_eval(tmp_path, dataset, checkpoint)
        assert rc == 0
        report = json.loads(out.read_text())
        jsonschema.validate(report, schema("eval_report.schema.json"))
        manifest = json.loads(Path(str(out) + ".manifest.json").read_text())
        jsonschema.validate(manifest, schema("manifest.schema.json"))

    def test_csv_sidecar(self, tmp_path, dataset, checkpoint):
        csv_path = tmp_path / "row.csv"
        rc, _ = self.run_eval(tmp_path, dataset, checkpoint, extra=("--csv", str(csv_path)))
        assert rc == 0
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("mean_accuracy,ci_halfwidth")
        assert len(lines) == 2

    def test_env_seed_fallback(self, tmp_path, dataset, checkpoint, monkeypatch):
        out_env = tmp_path / "env.json"
        monkeypatch.setenv("GMML_SEED", "77")
        rc = main(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset),
                   "--n", "2", "--q", "5", "--trials", "10", "-o", str(out_env)])
        assert rc == 0
        assert json.loads(out_env.read_text())["seed"] == 77

    def test_corrupt_checkpoint_is_runtime_error(self, tmp_path, dataset, capsys):
        bad = tmp_path / "bad.gmml"
        bad.write_bytes(b"GMML" + b"\x00" * 10)
        rc = main(["eval", "--checkpoint", str(bad), "--data", str(dataset),
                   "-o", str(tmp_path / "r.json")])
        assert rc == 1


class TestCompare:
    def test_table_figure_and_schema(self, tmp_path, dataset, capsys):
        prefix = tmp_path / "cmp"
        rc = main(["compare", "--losses", "gm,pn", "--data", str(dataset)] + FAST_TRAIN
                  + ["--n", "2", "--k", "1", "--q", "4", "--trials", "10", "-o", str(prefix)])
        assert rc == 0
        table = json.loads(Path(str(prefix) + ".json").read_text())
        jsonschema.validate(table, schema("compare_table.schema.json"))
        assert {r["loss"] for r in table["rows"]} == {"gm", "pn"}
        csv_lines = Path(str(prefix) + ".csv").read_text().splitlines()
        assert csv_lines[0] == "loss,n_way,k_shot,mean,ci"
        assert len(csv_lines) == 3
        assert Path(str(prefix) + ".png").stat().st_size > 0

    def test_unknown_loss_lists_choices(self, dataset, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["compare", "--losses", "gm,contrastive", "--data", str(dataset),
                  "-o", str(tmp_path / "c")])
        assert exc.value.code == 2
        err = capsys.readouterr().err
        assert "pn, nca, gm, bce, asl" in err

    def test_partial_failure_markers(self, tmp_path, dataset, capsys, monkeypatch):
        # sabotage one loss to exercise the partial-table path
        import gmml.cli as cli_mod
        import gmml.encoder as enc_mod

        real_train = enc_mod.train

        def flaky(X, y, params, config, loss_kwargs=None):
            if config.loss_kind == "pn":
                raise RuntimeError("synthetic failure")
            return real_train(X, y, params, config, loss_kwargs)

        monkeypatch.setattr(cli_mod, "train", flaky)
        prefix = tmp_path / "cmp"
        rc = main(["compare", "--losses", "gm,pn", "--data", str(dataset)] + FAST_TRAIN
                  + ["--n", "2", "--k", "1", "--q", "4", "--trials", "10", "-o", str(prefix)])
        assert rc == 1
        rows = json.loads(Path(str(prefix) + ".json").read_text())["rows"]
        by_loss = {r["loss"]: r for r in rows}
        assert by_loss["pn"]["status"] == "failed" and by_loss["pn"]["mean"] is None
        assert by_loss["gm"]["status"] == "ok"
        assert "FAILED" in Path(str(prefix) + ".csv").read_text()


class TestVerify:
    def test_passes_and_prints_lines(self, tmp_path, capsys):
        out = tmp_path / "verify.json"
        rc = main(["verify", "--trials", "20", "--seed", "0", "-o", str(out)])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert all(l.startswith("PASS") for l in lines)
        report = json.loads(out.read_text())
        jsonschema.validate(report, schema("verify_report.schema.json"))
        assert report["all_passed"] is True

    def test_injected_fault_fails_named_check(self, capsys):
        rc = main(["verify", "--trials", "10", "--seed", "0",
                   "--inject-fault", "gradient-fd-mismatch"])
        assert rc == 1
        captured = capsys.readouterr()
        assert "FAIL  gradient-fd-mismatch" in captured.out


class TestRerun:
    def test_eval_rerun_bitwise(self, tmp_path, dataset, checkpoint):
        out = tmp_path / "r.json"
        assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset),
                     "--n", "2", "--q", "5", "--trials", "20", "--seed", "1",
                     "-o", str(out)]) == 0
        redo = tmp_path / "redo"
        assert main(["rerun", str(out) + ".manifest.json", "--out-dir", str(redo)]) == 0
        assert sha256(out) == sha256(redo / "r.json")

    def test_train_rerun_bitwise(self, tmp_path, dataset, checkpoint):
        redo = tmp_path / "redo"
        assert main(["rerun", str(checkpoint) + ".manifest.json", "--out-dir", str(redo)]) == 0
        assert sha256(checkpoint) == sha256(redo / checkpoint.name)

    def test_missing_manifest_is_runtime_error(self, tmp_path, capsys):
        assert main(["rerun", str(tmp_path / "none.manifest.json")]) == 1


class TestTopLevel:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert capsys.readouterr().out.startswith("gmml ")

    def test_no_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
