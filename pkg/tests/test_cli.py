import json
import subprocess
import sys

import numpy as np
import pytest

from audio_fixtures import noise, room_impulse, speech_like
from lidkit.audio import write_wav
from lidkit.cli import main
from lidkit.data import LanguageList, ScoreMatrix, Utterance, load_model, read_scores, write_manifest, write_scores
from lidkit.schema import validate

SYNTH = ["--n-languages", "13", "--dim", "16", "--train-count", "20", "--dev-count", "10", "--test-count", "15"]


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


def run_json(capsys, *argv):
    rc, out, err = run(capsys, *argv, "--json")
    assert rc == 0, err
    return json.loads(out)


@pytest.fixture
def synth_dir(tmp_path, capsys):
    d = tmp_path / "data"
    obj = run_json(capsys, "synth", "--out-dir", d, "--seed", 5, *SYNTH)
    validate(obj, "outputs")
    assert len(obj["outputs"]) == 7
    return d


class TestEvaluate:
    langs = LanguageList(f"L{k}" for k in range(13))

    def _files(self, tmp_path, scores, labels):
        ids = [f"u{i}" for i in range(len(labels))]
        write_scores(tmp_path / "s.tsv", ScoreMatrix(ids=ids, scores=scores, languages=self.langs))
        write_manifest(tmp_path / "m.jsonl", [Utterance(u, None, int(y), None) for u, y in zip(ids, labels)],
                       self.langs)
        return tmp_path / "s.tsv", tmp_path / "m.jsonl"

    def test_perfect_scores_table(self, tmp_path, capsys):
        y = np.arange(26) % 13
        s, m = self._files(tmp_path, np.eye(13)[y] * 10, y)
        rc, out, _ = run(capsys, "evaluate", s, m)
        assert rc == 0
        row = out.splitlines()[2].split()
        assert row[1:4] == ["0.0000", "0.0000", "0.00"]

    def test_all_zero_scores(self, tmp_path, capsys):
        y = np.arange(26) % 13
        s, m = self._files(tmp_path, np.zeros((26, 13)), y)
        obj = run_json(capsys, "evaluate", s, m)
        validate(obj, "metric_report")
        assert obj["c_avg"] == 0.5
        rc, out, _ = run(capsys, "evaluate", s, m)
        assert out.splitlines()[2].split()[1] == "0.5000"

    def test_writes_report_and_figure(self, tmp_path, capsys):
        y = np.arange(39) % 13
        scores = np.random.default_rng(0).normal(size=(39, 13)) + 2 * np.eye(13)[y]
        s, m = self._files(tmp_path, scores, y)
        rc, _, _ = run(capsys, "evaluate", s, m, "--out-dir", tmp_path / "ev", "--p-target", 0.3)
        assert rc == 0
        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        validate(report, "metric_report")
        assert report["p_target"] == 0.3
        assert (tmp_path / "ev" / "llr_hist.png").stat().st_size > 1000

    def test_misaligned_ids(self, tmp_path, capsys):
        y = np.arange(13)
        s, m = self._files(tmp_path, np.zeros((13, 13)), y)
        write_manifest(m, [Utterance(f"x{i}", None, i, None) for i in range(13)], self.langs)
        rc, out, err = run(capsys, "evaluate", s, m)
        assert rc == 1 and out == ""
        assert err.startswith("error: [evaluate]") and "x0" in err


class TestBackendCommands:
    def test_train_score_calibrate_fuse_evaluate(self, synth_dir, tmp_path, capsys):
        cfg = synth_dir / "config.json"
        out = tmp_path / "run"
        obj = run_json(capsys, "train-backend", synth_dir / "train.jsonl", "--config", cfg, "--out-dir", out,
                       "--lda-dim", 6)
        validate(obj, "outputs")
        assert obj["summary"]["stages"] == ["normalize", "center", "project", "classify"]
        model = load_model(out / "backend.json")
        assert model.lda.shape == (16, 6)

        for split in ("dev", "test"):
            obj = run_json(capsys, "score", out / "backend.json", synth_dir / f"{split}.jsonl",
                           "--output", out / f"{split}.tsv")
            validate(obj, "outputs")
        obj = run_json(capsys, "calibrate", out / "dev.tsv", "--labels", synth_dir / "dev.jsonl",
                       "--model", out / "cal.json", "--apply", out / "test.tsv", "--output", out / "test_cal.tsv")
        validate(obj, "outputs")
        assert obj["summary"]["cllr_after"] <= obj["summary"]["cllr_before"]
        assert read_scores(out / "test_cal.tsv").n == 13 * 15

        obj = run_json(capsys, "fuse", out / "dev.tsv", out / "dev.tsv", "--labels", synth_dir / "dev.jsonl",
                       "--model", out / "fus.json")
        validate(obj, "outputs")
        assert len(obj["summary"]["alphas"]) == 2
        obj = run_json(capsys, "fuse", out / "test.tsv", out / "test.tsv", "--model", out / "fus.json",
                       "--output", out / "test_fused.tsv")
        validate(obj, "outputs")
        report = run_json(capsys, "evaluate", out / "test_fused.tsv", synth_dir / "test.jsonl")
        validate(report, "metric_report")

    def test_backend_flags_reach_the_model(self, synth_dir, tmp_path, capsys):
        cfg = synth_dir / "config.json"
        rc, _, err = run(capsys, "train-backend", synth_dir / "train.jsonl", "--config", cfg,
                         "--model", tmp_path / "m.json", "--no-rebalance", "--no-lda", "--l2-lambda", 0.01,
                         "--max-iter", 50, "--tol", 1e-5, "--order", "center_norm", "--lda-shrinkage", 0.1)
        assert rc == 0, err
        model = load_model(tmp_path / "m.json")
        assert model.lda is None and model.order == "center_norm"
        np.testing.assert_array_equal(model.balance_weights, np.ones(13))

    def test_lda_cap_warning(self, synth_dir, tmp_path, capsys):
        rc, _, err = run(capsys, "train-backend", synth_dir / "train.jsonl", "--config", synth_dir / "config.json",
                         "--out-dir", tmp_path, "--lda-dim", 50)
        assert rc == 0
        assert "warning: requested LDA dimension 50 exceeds K-1 = 12" in err

    def test_errors_have_stage_prefix(self, synth_dir, tmp_path, capsys):
        rc, _, err = run(capsys, "train-backend", synth_dir / "train.jsonl")
        assert rc == 1 and err.startswith("error: [config]")
        rc, _, err = run(capsys, "train-backend", tmp_path / "nope.jsonl", "--config", synth_dir / "config.json")
        assert rc == 1 and err.startswith("error: [load-train]")
        (tmp_path / "bad.json").write_text(json.dumps({"languages": ["a", "b"], "backend": {"ldaa": 3}}))
        rc, _, err = run(capsys, "train-backend", synth_dir / "train.jsonl", "--config", tmp_path / "bad.json")
        assert rc == 1 and err.startswith("error: [config]") and "ldaa" in err
        rc, _, err = run(capsys, "calibrate", tmp_path / "missing.tsv", "--labels", synth_dir / "dev.jsonl")
        assert rc == 1 and err.startswith("error: [load-scores]")
        rc, _, err = run(capsys, "train-backend", synth_dir / "train.jsonl", "--config",
                         synth_dir / "config.json", "--tol", 0)
        assert rc == 1 and err.startswith("error: [config]")


class TestPipelineCommand:
    def test_runs_and_is_reproducible(self, synth_dir, tmp_path, capsys):
        args = ["pipeline", synth_dir / "train.jsonl", synth_dir / "dev.jsonl", synth_dir / "test.jsonl",
                "--config", synth_dir / "config.json"]
        a = run_json(capsys, *args, "--out-dir", tmp_path / "a")
        validate(a, "pipeline_report")
        assert a["stages"] == ["normalize", "center", "classify", "calibrate", "evaluate"]
        run_json(capsys, *args, "--out-dir", tmp_path / "b")
        manifest = json.loads((tmp_path / "a" / "MANIFEST.json").read_text())
        for f in manifest["files"]:
            assert (tmp_path / "a" / f["path"]).read_bytes() == (tmp_path / "b" / f["path"]).read_bytes()

    def test_text_output_and_lda_warning(self, synth_dir, tmp_path, capsys):
        rc, out, err = run(capsys, "pipeline", synth_dir / "train.jsonl", synth_dir / "dev.jsonl",
                           synth_dir / "test.jsonl", "--config", synth_dir / "config.json",
                           "--out-dir", tmp_path, "--lda-dim", 50, "--no-figures")
        assert rc == 0
        assert "normalize -> center -> project -> classify -> calibrate -> evaluate" in out
        assert "Cavg" in out and "EER" in out
        assert err.count("LDA dimension 50") == 1

    def test_needs_out_dir(self, synth_dir, capsys):
        rc, _, err = run(capsys, "pipeline", synth_dir / "train.jsonl", synth_dir / "dev.jsonl",
                         synth_dir / "test.jsonl", "--config", synth_dir / "config.json")
        assert rc == 1 and err.startswith("error: [config]")


class TestOtherCommands:
    def test_gradcheck(self, capsys):
        obj = run_json(capsys, "gradcheck", "--instances", 2)
        validate(obj, "gradcheck")
        assert obj["passed"] and len(obj["checks"]) == 6
        rc, _, err = run(capsys, "gradcheck", "--only", "bogus")
        assert rc == 1 and err.startswith("error: [gradcheck]")

    def test_fewshot(self, tmp_path, capsys):
        args = ["fewshot", "--sizes", "1,5", "--seeds", 2, "--test-count", 20, "--n-languages", 4, "--dim", 8,
                "--pool", 10]
        obj = run_json(capsys, *args, "--out-dir", tmp_path)
        validate(obj, "fewshot")
        assert [r["size"] for r in obj["rows"]] == [1, 5]
        assert obj == run_json(capsys, *args)
        assert (tmp_path / "fewshot.png").exists() and (tmp_path / "fewshot.tsv").exists()
        for bad in ("0,5", "5,11", "a,b"):
            rc, _, err = run(capsys, "fewshot", "--sizes", bad, "--pool", 10)
            assert rc == 1 and err.startswith("error: [fewshot]"), err

    def test_augment(self, tmp_path, capsys):
        (tmp_path / "rir").mkdir()
        (tmp_path / "noise").mkdir()
        write_wav(tmp_path / "rir" / "r.wav", room_impulse(0, 400))
        write_wav(tmp_path / "noise" / "n.wav", noise(1))
        utts = []
        for i in range(3):
            write_wav(tmp_path / f"u{i}.wav", speech_like(i, n=4000))
            utts.append(Utterance(f"u{i}", f"u{i}.wav", None, None))
        write_manifest(tmp_path / "m.jsonl", utts, LanguageList(["x"]))
        args = ["augment", tmp_path / "m.jsonl", "--rir-dir", tmp_path / "rir", "--noise-dir", tmp_path / "noise",
                "--seed", 17, "--copies", 2]
        obj = run_json(capsys, *args, "--out-dir", tmp_path / "a")
        validate(obj, "outputs")
        assert obj["summary"] == {"utterances": 3, "files": 6}
        run_json(capsys, *args, "--out-dir", tmp_path / "b")
        lines = (tmp_path / "a" / "plans.jsonl").read_text().splitlines()
        assert len(lines) == 6
        for line in lines:
            entry = json.loads(line)
            validate(entry, "augment_plan")
            a = (tmp_path / "a" / entry["output"]).read_bytes()
            assert a == (tmp_path / "b" / entry["output"]).read_bytes()
        rc, _, err = run(capsys, "augment", tmp_path / "m.jsonl", "--out-dir", tmp_path / "c")
        assert rc == 1 and err.startswith("error: [augment]") and "rir" in err

    def test_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "lidkit.cli", "--version"], capture_output=True, text=True)
        assert res.returncode == 0 and res.stdout.startswith("lidkit ")
        res = subprocess.run([sys.executable, "-m", "lidkit.cli", "evaluate"], capture_output=True, text=True)
        assert res.returncode == 2
