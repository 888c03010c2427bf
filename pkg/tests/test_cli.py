import io

import numpy as np
import pytest
from PIL import Image

from auattn.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run, split_dataset
from auattn.objective import AU_NAMES
from auattn.trainer import load_checkpoint


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    # seed 0 puts a positive for every AU inside the first 16 frames (the training split)
    assert call("synth", "--out", root / "data", "--n", 20, "--seed", 0, "--size", 32)[0] == EXIT_OK
    code, out, err = call("train", "--data", root / "data", "--epochs", 2, "--batch-size", 8,
                          "--seed", 1, "--deterministic", "--out", root / "run")
    assert code == EXIT_OK, err
    return root, out


class TestUsage:
    @pytest.mark.parametrize("argv", [[], ["bogus"], ["train", "--data", "x"], ["synth", "--out", "d"],
                                      ["eval", "--checkpoint", "c", "--data", "d", "--frobnicate"],
                                      ["train", "--data", "d", "--epochs", "two", "--out", "o"]])
    def test_usage_errors_exit_1(self, argv):
        code, out, err = call(*argv)
        assert code == EXIT_USAGE and "error" in err

    def test_missing_data_exit_2(self, tmp_path):
        code, _, err = call("eval", "--checkpoint", tmp_path / "none.ckpt", "--data", tmp_path)
        assert code == EXIT_RUNTIME and err.startswith("auattn eval:")

    def test_bad_pool_schedule_exit_2(self, tmp_path):
        code, _, _ = call("train", "--data", tmp_path, "--epochs", 1, "--pool-schedule", "1111111",
                          "--out", tmp_path / "o")
        assert code == EXIT_RUNTIME


class TestSynth:
    def test_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert call("synth", "--out", tmp_path / d, "--n", 10, "--seed", 1, "--size", 32)[0] == EXIT_OK
        a = sorted(p for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(a) == 11
        for p in a:
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()

    def test_invalid_size(self, tmp_path):
        assert call("synth", "--out", tmp_path, "--n", 2, "--size", 8)[0] == EXIT_RUNTIME


class TestTrainEvalPredict:
    def test_train_outputs(self, cli_run):
        root, out = cli_run
        lines = (root / "run" / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,lr,loss,macro_f1" and len(lines) == 3
        assert out == (root / "run" / "log.csv").read_text()
        assert [float(line.split(",")[1]) for line in lines[1:]] == [1e-3, 1e-3]
        ckpt = load_checkpoint(root / "run" / "last.ckpt")
        assert ckpt.epoch == 2 and ckpt.train_config.batch_size == 8

    def test_deterministic_logs_repeat(self, cli_run):
        root, _ = cli_run
        code, out, _ = call("train", "--data", root / "data", "--epochs", 2, "--batch-size", 8,
                            "--seed", 1, "--deterministic", "--out", root / "run2")
        assert code == EXIT_OK
        assert out == (root / "run" / "log.csv").read_text()

    def test_eval_consistency(self, cli_run):
        root, _ = cli_run
        code, out, _ = call("eval", "--checkpoint", root / "run" / "last.ckpt", "--data", root / "data",
                            "--verbose")
        assert code == EXIT_OK
        lines = out.strip().splitlines()
        assert len(lines) == 13 and [ln.split()[0] for ln in lines[:12]] == list(AU_NAMES)
        per_au = []
        for ln in lines[:12]:
            name, f1, tp, fp, fn, tn = ln.split()
            tp, fp, fn = (int(t.split("=")[1]) for t in (tp, fp, fn))
            recount = 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
            assert float(f1) == pytest.approx(recount, abs=5e-7)
            per_au.append(float(f1))
        assert float(lines[-1].split()[1]) == pytest.approx(np.mean(per_au), abs=1e-6)

    def test_predict(self, cli_run):
        root, _ = cli_run
        img = root / "data" / "images" / "synth" / "00001.png"
        code, out, _ = call("predict", "--checkpoint", root / "run" / "last.ckpt", "--image", img)
        assert code == EXIT_OK
        lines = out.strip().splitlines()
        assert len(lines) == 12
        for name, line in zip(AU_NAMES, lines):
            n, p, d = line.split()
            assert n == name and 0 < float(p) < 1 and d == str(int(float(p) >= 0.5))

    def test_predict_unreadable_image(self, cli_run, tmp_path):
        root, _ = cli_run
        (tmp_path / "bad.jpg").write_bytes(b"junk")
        code, _, _ = call("predict", "--checkpoint", root / "run" / "last.ckpt", "--image", tmp_path / "bad.jpg")
        assert code == EXIT_RUNTIME

    def test_corrupt_checkpoint(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"AUATTN")
        Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "i.png")
        code, _, err = call("predict", "--checkpoint", tmp_path / "c.ckpt", "--image", tmp_path / "i.png")
        assert code == EXIT_RUNTIME and err


class TestSplit:
    def test_last_fifth_is_validation(self, cli_run):
        root, _ = cli_run
        tr, va = split_dataset(root / "data", "mask", 32)
        assert (len(tr), len(va)) == (16, 4)
        assert va.paths[0].name == "00017.png"

    def test_explicit_dirs(self, tmp_path):
        for part, n in (("train", 4), ("val", 3)):
            assert call("synth", "--out", tmp_path / part, "--n", n, "--size", 32)[0] == EXIT_OK
        tr, va = split_dataset(tmp_path, "mask", 32)
        assert (len(tr), len(va)) == (4, 3)
