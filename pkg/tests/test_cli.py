import json
import shutil

import pytest

from palliscreen.cli import (CONFIG_KEYS, PipelineConfig, PipelineError, format_config,
                             load_config, main)
from palliscreen.model import DESK_HIDDEN_DIMS

SMALL = """# small but complete pipeline
synth.n_patients = 1500
synth.target_prevalence = 0.15
features.min_patient_count = 5
model.hidden_dims = 16,16
train.snapshot_every = 50
train.max_iterations = 200
explain.top_k = 2
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    out = root / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.n_patients == 20_000 and cfg.target_prevalence == 0.07
        assert cfg.hidden_dims == DESK_HIDDEN_DIMS and cfg.min_patient_count == 100
        assert cfg.lead_min == 90 and cfg.lead_max == 365

    def test_round_trip(self, tmp_path):
        cfg = PipelineConfig(seed=3, hidden_dims=(8, 4), split_ratios=(0.7, 0.2, 0.1), lr=5e-4)
        (tmp_path / "c.cfg").write_text(format_config(cfg))
        again = load_config(tmp_path / "c.cfg")
        assert format_config(again) == format_config(cfg)
        assert again.hidden_dims == (8, 4) and again.lr == 5e-4

    def test_every_key_printed(self):
        text = format_config(PipelineConfig())
        assert [line.split(" = ")[0] for line in text.splitlines()] == list(CONFIG_KEYS)

    @pytest.mark.parametrize("body", ["nope = 1\n", "train.batch_size 12\n", "train.batch_size = x\n"])
    def test_bad_entries(self, tmp_path, body):
        (tmp_path / "c.cfg").write_text(body)
        with pytest.raises(PipelineError) as err:
            load_config(tmp_path / "c.cfg")
        assert err.value.category == "config" and err.value.exit_code == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(PipelineError) as err:
            load_config(tmp_path / "absent.cfg")
        assert err.value.exit_code == 3


def test_config_command(capsys):
    assert main(["config", "--seed", "9"]) == 0
    assert "seed = 9" in capsys.readouterr().out


def test_synth_reports_prevalence_and_reacts_to_seed(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("synth.n_patients = 400\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert "prevalence=" in capsys.readouterr().out
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "1"]) == 0
    assert (tmp_path / "a/events.tsv").read_bytes() != (tmp_path / "b/events.tsv").read_bytes()
    manifest = json.loads((tmp_path / "b/synth.manifest.json").read_text())
    assert manifest["seed"] == 1 and set(manifest["outputs"]) == {"patients.tsv", "events.tsv"}


def test_bad_synth_config(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("synth.target_prevalence = 1.5\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert capsys.readouterr().err.startswith("error[config]:")


def test_stage_order(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 5
    assert "error[stage-order]" in capsys.readouterr().err


def test_malformed_snapshot(tmp_path, capsys):
    (tmp_path / "patients.tsv").write_text("patient_id\tbirth_date\n")
    (tmp_path / "events.tsv").write_text("patient_id\tdate\tcategory\tcode\n")
    assert main(["cohort", "--out", str(tmp_path)]) == 4
    assert "error[data]" in capsys.readouterr().err


class TestPipeline:
    def test_artifacts(self, run_dir):
        _, out = run_dir
        for name in ("patients.tsv", "events.tsv", "cohort.tsv", "cohort_stats.txt", "km_positive.tsv",
                     "vocab.tsv", "features.tsv", "model.ckpt", "train_log.tsv", "report.txt",
                     "overall_pr.tsv", "overall_roc.tsv", "overall_reliability.tsv"):
            assert (out / name).exists(), name
        for stage in ("synth", "cohort", "featurize", "train", "eval", "explain"):
            assert (out / f"{stage}.manifest.json").exists()
        assert len(list((out / "explanations").glob("*.txt"))) == 2

    def test_report_content(self, run_dir):
        report = dict(line.split("\t") for line in (run_dir[1] / "report.txt").read_text().splitlines()
                      if not line.startswith("#"))
        assert float(report["overall.auroc"]) > 0.5
        assert int(report["overall.n"]) > 0

    def test_explain_named_patient(self, run_dir, capsys):
        cfg, out = run_dir
        pid = next(iter((out / "cohort.tsv").read_text().splitlines()[1:])).split("\t")[0]
        assert main(["explain", "--config", str(cfg), "--out", str(out), "--patient", pid]) == 0
        text = (out / "explanations" / f"{pid}.txt").read_text()
        assert text.startswith(f"patient_id\t{pid}\n")

    def test_unknown_patient(self, run_dir, capsys):
        cfg, out = run_dir
        assert main(["explain", "--config", str(cfg), "--out", str(out), "--patient", "NOPE"]) == 7
        assert "error[unknown-patient]" in capsys.readouterr().err

    def test_stages_are_deterministic(self, run_dir, tmp_path):
        cfg, _ = run_dir
        out, again = tmp_path / "first", tmp_path / "again"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["run", "--config", str(cfg), "--out", str(again)]) == 0
        assert sorted(p.name for p in again.rglob("*")) == sorted(p.name for p in out.rglob("*"))
        for f in sorted(p for p in out.rglob("*") if p.is_file()):
            assert (again / f.relative_to(out)).read_bytes() == f.read_bytes(), f.name

    def test_vocabulary_mismatch(self, run_dir, tmp_path, capsys):
        cfg, out = run_dir
        work = tmp_path / "w"
        shutil.copytree(out, work)
        vocab = (work / "vocab.tsv").read_text().splitlines()
        (work / "vocab.tsv").write_text("\n".join(vocab[:-1]) + "\n")
        assert main(["eval", "--config", str(cfg), "--out", str(work)]) == 6
        assert "error[mismatch]" in capsys.readouterr().err

    def test_divergence_exit_code(self, run_dir, tmp_path, capsys):
        cfg, out = run_dir
        work = tmp_path / "w"
        shutil.copytree(out, work)
        bad = work / "bad.cfg"
        bad.write_text(cfg.read_text() + "train.lr = 1e300\n")
        assert main(["train", "--config", str(bad), "--out", str(work)]) == 8
        assert "error[divergence]" in capsys.readouterr().err
