import csv
import json
import math
import shutil
import subprocess
import sys

import numpy as np
import pytest

from clmuce.channel_sim import build_datasets, load_dataset
from clmuce.cli import EXIT_CODES, run
from clmuce.config import from_dict
from clmuce.pipeline import METHODS, scene_of

from conftest import TINY


def cli(capsys, *argv):
    code = run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    return json.loads(err.strip().splitlines()[-1])["error"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny run taken through every command once."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "run"
    base = ["--config", cfg, "--out", out]
    for argv in (["generate"], ["train"], ["train", "--axis", "labels"], ["evaluate", "--axis", "snr"],
                 ["evaluate", "--axis", "labels"], ["evaluate", "--axis", "map"], ["similarity-study"]):
        assert run([str(a) for a in argv[:1] + base + argv[1:]]) == 0, argv
    return cfg, out


class TestGenerate:
    def test_round_trip(self, tiny_config, tmp_path, capsys):
        code, out, _ = cli(capsys, "generate", "--config", tiny_config, "--out", tmp_path / "r")
        assert code == 0 and "contrastive.bin" in out
        cfg = from_dict(TINY)
        sets = build_datasets(scene_of(cfg), cfg.system, (120, 60, 20), cfg.data.snr_db, cfg.seed)
        for name, ds in sets.items():
            loaded = load_dataset(tmp_path / "r" / "data" / name)
            assert np.array_equal(loaded.Y, ds.Y) and np.array_equal(loaded.H, ds.H)
            assert np.array_equal(loaded.positions, ds.positions)

    def test_byte_counts(self, tiny_config, tmp_path, capsys):
        cli(capsys, "generate", "--config", tiny_config, "--out", tmp_path)
        s = from_dict(TINY).system
        unlabeled = 2 + 2 * s.n_rx * s.pilot_len * s.n_sc  # position and measurement words
        labeled = unlabeled + 2 * s.channel_len
        for name, n, words in (("contrastive", 120, unlabeled), ("downstream", 60, labeled), ("test", 20, labeled)):
            assert (tmp_path / "data" / f"{name}.bin").stat().st_size == 8 * n * words

    def test_manifest_hash_follows_seed(self, tiny_config, tmp_path, capsys):
        hashes = []
        for seed in (3, 3, 4):
            out = tmp_path / f"s{len(hashes)}"
            cli(capsys, "generate", "--config", tiny_config, "--seed", seed, "--out", out)
            hashes.append(json.loads((out / "manifest.json").read_text())["files"]["data/test.bin"])
        assert hashes[0] == hashes[1] != hashes[2]

    def test_no_overwrite_without_force(self, tiny_config, tmp_path, capsys):
        assert cli(capsys, "generate", "--config", tiny_config, "--out", tmp_path)[0] == 0
        code, _, err = cli(capsys, "generate", "--config", tiny_config, "--out", tmp_path)
        assert code == EXIT_CODES["output-exists"] and error_of(err) == "output-exists"
        assert cli(capsys, "generate", "--config", tiny_config, "--out", tmp_path, "--force")[0] == 0


class TestErrors:
    def test_missing_seed(self, tmp_path, capsys):
        code, _, err = cli(capsys, "generate", "--out", tmp_path)
        assert code == 2 and error_of(err) == "configuration"

    def test_unknown_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"seed": 1, "data": {"n_tests": 3}}))
        code, _, err = cli(capsys, "generate", "--config", bad, "--out", tmp_path / "r")
        assert code == 2 and "n_tests" in json.loads(err.strip())["message"]

    def test_stage_needs_data(self, tiny_config, tmp_path, capsys):
        code, _, err = cli(capsys, "train", "--config", tiny_config, "--out", tmp_path, "--stage", "clnet")
        assert code == 3 and error_of(err) == "missing-dependency"

    def test_joint_needs_clnet(self, tiny_config, tmp_path, capsys):
        cli(capsys, "generate", "--config", tiny_config, "--out", tmp_path)
        code, _, err = cli(capsys, "train", "--config", tiny_config, "--out", tmp_path, "--stage", "joint")
        assert code == 3 and error_of(err) == "missing-dependency"
        assert not (tmp_path / "models" / "joint").exists()

    def test_bad_stage(self, tiny_config, tmp_path, capsys):
        cli(capsys, "generate", "--config", tiny_config, "--out", tmp_path)
        code, _, err = cli(capsys, "train", "--config", tiny_config, "--out", tmp_path, "--stage", "dsnet:9")
        assert code == 7 and error_of(err) == "pipeline"

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "clmuce.cli", "generate", "--out", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == 2
        assert json.loads(proc.stderr.strip().splitlines()[-1])["error"] == "configuration"


class TestPipeline:
    def test_snr_csv(self, pipeline):
        _, out = pipeline
        rows = read_csv(out / "results" / "snr.csv")
        assert rows[0] == ["method", "axis_value", "nmse", "nmse_db", "n_test", "seed"]
        body = rows[1:]
        assert len(body) == len(METHODS) * len(TINY["sweep"]["snr_db"])
        assert {r[0] for r in body} == set(METHODS)
        for r in body:
            assert float(r[3]) == pytest.approx(10 * math.log10(float(r[2])), rel=1e-12)
            assert r[4] == "20" and r[5] == "3"
        assert (out / "results" / "snr.svg").read_text().lstrip().startswith("<?xml")
        assert b"\r\n" not in (out / "results" / "snr.csv").read_bytes()

    def test_labels_csv(self, pipeline):
        _, out = pipeline
        body = read_csv(out / "results" / "labels.csv")[1:]
        assert len(body) == len(METHODS) * len(TINY["sweep"]["labels"])
        assert sorted({r[1] for r in body}) == ["30", "60"]
        assert (out / "sweeps" / "labels_30" / "manifest.json").exists()

    def test_map(self, pipeline):
        _, out = pipeline
        rows = read_csv(out / "results" / "map_grid.csv")
        assert rows[0][:3] == ["method", "ix", "iy"]
        users = {}
        for r in rows[1:]:
            users[r[0]] = users.get(r[0], 0) + int(r[7])
        assert set(users.values()) == {20}

    def test_similarity_csv(self, pipeline):
        _, out = pipeline
        rows = read_csv(out / "results" / "similarity.csv")
        assert rows[0] == ["bin_lo", "bin_hi", "n_pairs", "raw_similarity", "feature_similarity"]
        assert all(float(r[1]) > float(r[0]) for r in rows[1:])

    def test_evaluate_is_reproducible(self, pipeline, tmp_path, capsys):
        cfg, out = pipeline
        copy = tmp_path / "copy"
        shutil.copytree(out, copy)
        assert cli(capsys, "evaluate", "--config", cfg, "--out", copy, "--force")[0] == 0
        assert (copy / "results" / "snr.csv").read_bytes() == (out / "results" / "snr.csv").read_bytes()

    def test_tampered_data_refused(self, pipeline, tmp_path, capsys):
        cfg, out = pipeline
        copy = tmp_path / "copy"
        shutil.copytree(out, copy)
        with open(copy / "data" / "test.bin", "r+b") as fh:
            fh.seek(16)
            fh.write(b"\x00" * 8)
        code, _, err = cli(capsys, "evaluate", "--config", cfg, "--out", copy, "--force")
        assert code == 5 and error_of(err) == "input-mismatch"

    def test_regenerated_data_invalidates_models(self, pipeline, tmp_path, capsys):
        cfg, out = pipeline
        copy = tmp_path / "copy"
        shutil.copytree(out, copy)
        assert cli(capsys, "generate", "--config", cfg, "--seed", 4, "--out", copy, "--force")[0] == 0
        code, _, err = cli(capsys, "evaluate", "--config", cfg, "--seed", 4, "--out", copy, "--force")
        assert code == 5 and error_of(err) == "input-mismatch"

    def test_outputs_recorded_in_manifest(self, pipeline):
        _, out = pipeline
        doc = json.loads((out / "manifest.json").read_text())
        for stage in ("generate", "clnet", "dsnet:1", "joint", "baselines"):
            assert stage in doc["stages"], stage
        assert doc["stages"]["joint"]["inputs"]  # joint depends on data and the clnet
