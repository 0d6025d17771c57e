import json

import numpy as np
import pytest

from nevae.cli import main, read_config_file
from nevae.data import SyntheticSpec, make_synthetic, write_idx
from nevae.traverse import read_pgm

TRAIN = ["--nz", "3", "--hidden", "8", "--epochs", "2", "--batch-size", "16"]


@pytest.fixture(scope="module")
def idx(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    ds = make_synthetic(SyntheticSpec(2, 16, 64, 0.0, seed=3))
    write_idx(d / "x.idx", ds.images.reshape(64, 4, 4), d / "y.idx", np.arange(64) % 4)
    return d / "x.idx"


@pytest.fixture(scope="module")
def trained(idx, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    assert main(["train", "--data", str(idx), "--out", str(out), "--run-id", "r", *TRAIN]) == 0
    return out / "r" / "final.bin"


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestTrain:
    def test_run_directory(self, trained):
        run = trained.parent
        names = {p.name for p in run.iterdir()}
        assert {"config.txt", "manifest.json", "final.bin", "runlog.csv", "runlog.json"} <= names
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["run_id"] == "r" and manifest["seed"] == 0
        assert len(manifest["dataset_fingerprint"]) == 64

    def test_default_run_id(self, idx, tmp_path):
        assert main(["train", "--data", str(idx), "--out", str(tmp_path), "--variant", "ne_se",
                     "--seed", "4", *TRAIN]) == 0
        assert (tmp_path / "ne_se_nz3_seed4" / "final.bin").is_file()

    def test_missing_data_exits_2_without_run_dir(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nope.idx"), "--out", str(tmp_path / "o"),
                     *TRAIN]) == 2
        assert not (tmp_path / "o").exists()
        assert "not found" in capsys.readouterr().err

    def test_bad_magic_exits_2(self, tmp_path):
        bad = tmp_path / "bad.idx"
        bad.write_bytes(b"\x00\x00\x08\x02" + bytes(12))
        assert main(["train", "--data", str(bad), "--out", str(tmp_path), *TRAIN]) == 2

    def test_bad_flag_exits_2(self, idx, tmp_path):
        assert main(["train", "--data", str(idx), "--variant", "nope"]) == 2
        assert main(["train", "--data", str(idx), "--out", str(tmp_path), "--variant", "beta", "--beta", "0",
                     *TRAIN]) == 2

    def test_negative_cap_parses(self, idx, tmp_path):
        assert main(["train", "--data", str(idx), "--out", str(tmp_path), "--variant", "ne_lp",
                     "--cap", "-1.0", *TRAIN]) == 0
        assert "cap = -1.0" in (tmp_path / "ne_lp_nz3_seed0" / "config.txt").read_text()

    def test_config_file_and_override(self, idx, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# desk run\nvariant = ne_se\nnz = 3\nhidden = 8\nepochs = 1\nseed = 9\n"
                       "batch-size = 16\nzero_head = true\n")
        assert read_config_file(cfg)["batch_size"] == "16"
        assert main(["train", "--config", str(cfg), "--data", str(idx), "--out", str(tmp_path),
                     "--seed", "5"]) == 0
        text = (tmp_path / "ne_se_nz3_seed5" / "config.txt").read_text()
        assert "seed = 5" in text and "zero_head = true" in text and "hidden = 8" in text

    def test_unknown_config_key(self, idx, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("colour = blue\n")
        assert main(["train", "--config", str(cfg), "--data", str(idx)]) == 2

    def test_byte_identical_reruns(self, idx, tmp_path):
        argv = ["train", "--data", str(idx), "--run-id", "r", "--eval-every", "1", *TRAIN]
        assert main([*argv, "--out", str(tmp_path / "a")]) == 0
        assert main([*argv, "--out", str(tmp_path / "b")]) == 0
        a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
        assert "r/metrics.csv" in a and "r/activity.csv" in a
        assert a == b

    def test_out_from_environment(self, idx, tmp_path, monkeypatch):
        monkeypatch.setenv("NEVAE_RUN_DIR", str(tmp_path / "env"))
        assert main(["train", "--data", str(idx), "--run-id", "e", *TRAIN]) == 0
        assert (tmp_path / "env" / "e" / "final.bin").is_file()


class TestEval:
    def test_zero_head_checkpoint_has_zero_kl(self, idx, tmp_path):
        assert main(["train", "--data", str(idx), "--out", str(tmp_path), "--run-id", "z",
                     "--zero-head", *TRAIN[:-4], "--epochs", "0"]) == 0
        assert main(["eval", "--checkpoint", str(tmp_path / "z" / "final.bin"), "--data", str(idx),
                     "--out", str(tmp_path / "ev")]) == 0
        report = json.loads((tmp_path / "ev" / "eval.json").read_text())
        assert report["kl"] == 0.0 and report["au_count"] == 0

    def test_outputs_and_determinism(self, trained, idx, tmp_path):
        for d in ("a", "b"):
            assert main(["eval", "--checkpoint", str(trained), "--data", str(idx),
                         "--out", str(tmp_path / d), "--activity-csv", str(tmp_path / d / "act.csv"),
                         "--epoch", "2"]) == 0
        assert _files(tmp_path / "a") == _files(tmp_path / "b")
        rows = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
        assert rows[1].startswith("r,2,")

    def test_bad_checkpoint_exits_2(self, idx, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"NOTACKPT" + bytes(16))
        assert main(["eval", "--checkpoint", str(bad), "--data", str(idx)]) == 2
        assert main(["eval", "--checkpoint", str(tmp_path / "none.bin"), "--data", str(idx)]) == 2


class TestTraverse:
    def test_single_dim(self, trained, tmp_path):
        assert main(["traverse", "--checkpoint", str(trained), "--dim", "1", "--out", str(tmp_path)]) == 0
        img = read_pgm(tmp_path / "traverse_single_dim_1.pgm")
        assert img.shape == (10 * 5 + 1, 10 * 5 + 1)
        index = json.loads((tmp_path / "traverse_single_dim_1.json").read_text())
        assert len(index["tiles"]) == 100
        assert index["tiles"][0][1] == -10.0 and index["tiles"][-1][1] == 10.0

    def test_random_and_deterministic(self, trained, tmp_path):
        for d in ("a", "b"):
            assert main(["traverse", "--checkpoint", str(trained), "--random", "--seed", "3",
                         "--out", str(tmp_path / d)]) == 0
        assert _files(tmp_path / "a") == _files(tmp_path / "b")
        tiles = json.loads((tmp_path / "a" / "traverse_random_direction_3.json").read_text())["tiles"]
        assert abs(np.linalg.norm(tiles[-1]) - 10.0) < 1e-9

    def test_zero_top(self, trained, idx, tmp_path):
        assert main(["traverse", "--checkpoint", str(trained), "--random", "--zero-top", "2",
                     "--data", str(idx), "--out", str(tmp_path)]) == 0
        index = json.loads((tmp_path / "traverse_random_direction_0.json").read_text())
        assert len(index["zero_dims"]) == 2
        assert not np.array(index["tiles"])[:, index["zero_dims"]].any()

    def test_zero_top_needs_data(self, trained, tmp_path):
        assert main(["traverse", "--checkpoint", str(trained), "--zero-top", "1",
                     "--out", str(tmp_path)]) == 2

    def test_bad_dim(self, trained, tmp_path):
        assert main(["traverse", "--checkpoint", str(trained), "--dim", "7", "--out", str(tmp_path)]) == 2


class TestLso:
    def test_outputs_and_determinism(self, trained, idx, tmp_path):
        argv = ["lso", "--checkpoint", f"m={trained}", "--data", str(idx), "--targets", "3",
                "--thresholds", "0.01,0", "--max-iters", "50"]
        for d in ("a", "b"):
            assert main([*argv, "--out", str(tmp_path / d)]) == 0
        files = _files(tmp_path / "a")
        assert set(files) == {"lso_config.txt", "lso_trials.csv", "lso_pairs.csv", "lso_summary.csv"}
        assert files == _files(tmp_path / "b")
        trials = files["lso_trials.csv"].decode().splitlines()
        assert len(trials) == 1 + 3 * 2 * 2 and trials[1].startswith("m,0,")
