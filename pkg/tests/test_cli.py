import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from aftcil.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE, main
from aftcil.data import (
    DEFAULT_RECIPES,
    SIMILAR_PAIR,
    DataError,
    SyntheticSpec,
    ingest,
    read_manifest,
    recipe_difference,
    synth_generate,
)


def _digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus") / "syn"
    synth_generate(SyntheticSpec(n_classes=7, clips_per_class=16, seconds=1.0), root)
    return root


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("base_classes: 5\nepochs: 5\nbatch_size: 16\n")
    return path


class TestSynth:
    def test_full_size_corpus(self, tmp_path):
        manifest = synth_generate(SyntheticSpec(), tmp_path / "s")
        assert len(manifest.entries) == 400
        assert len(list((tmp_path / "s").rglob("*.wav"))) == 400
        assert len(read_manifest(tmp_path / "s" / "manifest.csv").entries) == 400

    def test_bit_identical_per_seed(self, tmp_path):
        spec = SyntheticSpec(n_classes=7, clips_per_class=2, seconds=0.5)
        synth_generate(spec, tmp_path / "a")
        synth_generate(spec, tmp_path / "b")
        wavs = lambda d: {k: v for k, v in _digest(d).items() if k.endswith(".wav")}
        assert wavs(tmp_path / "a") == wavs(tmp_path / "b")

    def test_similar_pair_differs_only_in_modulation(self):
        a, b = (DEFAULT_RECIPES[i] for i in SIMILAR_PAIR)
        assert recipe_difference(a, b) == ["am_rate"]

    def test_recipes_pairwise_distinct(self):
        for i, a in enumerate(DEFAULT_RECIPES):
            for b in DEFAULT_RECIPES[i + 1:]:
                assert recipe_difference(a, b)

    def test_cli(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "s"), "--classes", "7", "--clips", "2",
                     "--seconds", "0.5"]) == 0
        assert "14 clips" in capsys.readouterr().out


class TestIngest:
    def test_summary(self, corpus, capsys):
        assert main(["ingest", "--dataset", str(corpus)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["classes"] == 7 and summary["clips"] == 112
        assert summary["feature_shape"] == [40, 298]

    def test_idempotent(self, corpus):
        ingest(corpus)
        cache = Path(ingest(corpus)[2]["cache"])
        before = cache.read_bytes()
        _, _, summary = ingest(corpus)
        assert summary["extracted"] == 0 and summary["cache_hits"] == 112
        assert cache.read_bytes() == before

    def test_missing_file_is_itemized(self, tmp_path, capsys):
        root = tmp_path / "s"
        synth_generate(SyntheticSpec(n_classes=7, clips_per_class=2, seconds=0.5), root)
        victim = sorted(root.rglob("*.wav"))[3]
        victim.unlink()
        with pytest.raises(DataError, match=victim.stem):
            ingest(root)
        assert main(["ingest", "--dataset", str(root)]) == EXIT_DATA
        assert victim.stem in capsys.readouterr().err

    def test_generic_folder_layout(self, tmp_path):
        root = tmp_path / "s"
        synth_generate(SyntheticSpec(n_classes=7, clips_per_class=2, seconds=0.5), root)
        (root / "manifest.csv").unlink()
        _, data, summary = ingest(root)
        assert summary["classes"] == 7 and len(data.labels) == 14


class TestTrainAndReport:
    def test_finetune_forgets(self, corpus, config, tmp_path, capsys):
        run = tmp_path / "ft"
        assert main(["train", "--config", str(config), "--dataset", str(corpus), "--method", "Finetune",
                     "--out", str(run)]) == 0
        metrics = json.loads((run / "metrics.json").read_text())
        assert metrics["bwt"] < 0
        for name in ("config.yaml", "accuracy_matrix.csv", "loss_log.csv", "prototypes.csv", "model.ckpt",
                     "confusion_task1.csv"):
            assert (run / name).is_file()

        before = _digest(run)
        capsys.readouterr()
        assert main(["report", str(run), "--out", str(tmp_path / "rep")]) == 0
        assert _digest(run) == before  # report only reads
        row = (tmp_path / "rep" / "summary.csv").read_text().splitlines()[1].split(",")
        assert float(row[-2]) == metrics["acc"] and float(row[-1]) == metrics["bwt"]
        svg = (tmp_path / "rep" / "accuracy_curve.svg").read_text()
        assert svg.lstrip().startswith("<?xml") and "<svg" in svg

        capsys.readouterr()
        assert main(["eval", str(run)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["matches_stored"] and out["per_task"] == metrics["per_task"]

    def test_rerun_from_snapshot_is_identical(self, corpus, config, tmp_path):
        args = ["train", "--config", str(config), "--dataset", str(corpus), "--method", "AFT", "--epochs", "2"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(["train", "--config", str(tmp_path / "a" / "config.yaml"), "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "accuracy_matrix.csv").read_bytes() == \
            (tmp_path / "b" / "accuracy_matrix.csv").read_bytes()

    def test_flags_override_config(self, corpus, config, tmp_path):
        run = tmp_path / "r"
        assert main(["train", "--config", str(config), "--dataset", str(corpus), "--method", "Base+AFT",
                     "--alpha", "0.1", "--selective", "on", "--epochs", "1", "--batch", "32",
                     "--out", str(run)]) == 0
        text = (run / "config.yaml").read_text()
        assert "alpha: 0.1" in text and "selective: true" in text and "batch_size: 32" in text

    def test_run_dir_is_append_only(self, corpus, config, tmp_path):
        run = tmp_path / "r"
        args = ["train", "--config", str(config), "--dataset", str(corpus), "--epochs", "1", "--out", str(run)]
        assert main(args) == 0
        assert main(args) == EXIT_DATA

    def test_grid(self, corpus, config, tmp_path, capsys):
        out = tmp_path / "grid"
        assert main(["grid", "--config", str(config), "--dataset", str(corpus), "--epochs", "1",
                     "--alphas", "0.1,1", "--betas", "1,5", "--gammas", "1,5", "--out", str(out)]) == 0
        cells = [p for p in out.iterdir() if p.is_dir()]
        assert len(cells) == 8
        lines = (out / "grid_ranking.csv").read_text().splitlines()
        assert len(lines) == 9
        accs = [float(ln.split(",")[6]) for ln in lines[1:]]
        assert accs == sorted(accs, reverse=True)


class TestExitCodes:
    @pytest.mark.parametrize("argv", [[], ["fly"], ["train", "--bogus"], ["train", "--selective", "maybe"]])
    def test_usage(self, argv):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == EXIT_USAGE

    def test_missing_dataset_flag(self):
        assert main(["train", "--method", "AFT"]) == EXIT_USAGE

    def test_unknown_config_key(self, corpus, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("learning_rat: 0.1\n")
        assert main(["train", "--config", str(path), "--dataset", str(corpus)]) == EXIT_USAGE

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--dataset", str(tmp_path / "none")]) == EXIT_DATA

    def test_numeric_failure(self, corpus, tmp_path, capsys):
        path = tmp_path / "c.yaml"
        path.write_text("learning_rate: 1.0e+200\nepochs: 2\nbase_classes: 5\n")
        with np.errstate(all="ignore"):
            code = main(["train", "--config", str(path), "--dataset", str(corpus), "--method", "Finetune"])
        assert code == EXIT_NUMERIC
        assert "nan" in capsys.readouterr().err
