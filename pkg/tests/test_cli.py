import json
import os

import numpy as np
import pytest

from coarsegrain.cli import main
from coarsegrain.data_io import load_header, synth_dataset, write_idx

PARITY = ["--synthetic", "parity_patterns", "--n-samples", "32"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, (json.loads(out.out) if code == 0 and out.out.strip() else None), out.err


class TestBuildTree:
    def test_exact_tree_has_no_fidelity_loss(self, capsys, tmp_path):
        code, m, _ = run(capsys, "build-tree", *PARITY, "--cutoff", "0",
                         "--model-out", str(tmp_path / "t"))
        assert code == 0
        assert m["command"] == "build-tree"
        for lyr in m["layers"]:
            assert lyr["log_fidelity_after"] == pytest.approx(lyr["log_fidelity_before"], abs=1e-10)
        assert load_header(tmp_path / "t")["kind"] == "tree"

    def test_missing_file_is_io_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "build-tree", "--images", str(tmp_path / "a"),
                           "--labels", str(tmp_path / "b"))
        assert code == 3 and "error" in err

    def test_bad_cutoff(self, capsys):
        code, _, _ = run(capsys, "build-tree", *PARITY, "--cutoff", "1.5")
        assert code == 2

    def test_idx_input(self, capsys, tmp_path):
        ds = synth_dataset("two_gaussian_stripes", 20)
        write_idx(tmp_path / "i", ds.images)
        write_idx(tmp_path / "l", ds.labels.astype(np.uint8))
        code, m, _ = run(capsys, "build-tree", "--images", str(tmp_path / "i"),
                         "--labels", str(tmp_path / "l"), "--layers", "2")
        assert code == 0 and len(m["bond_profile"]) == 2

    def test_malformed_idx(self, capsys, tmp_path):
        (tmp_path / "i").write_bytes(b"\x00\x00\x08\x03\x00")
        (tmp_path / "l").write_bytes(b"")
        code, _, _ = run(capsys, "build-tree", "--images", str(tmp_path / "i"),
                         "--labels", str(tmp_path / "l"))
        assert code == 4

    def test_config_file_and_precedence(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"layers": 1, "cutoff": 0.0, "scale-mode": "raw"}))
        code, m, _ = run(capsys, "build-tree", *PARITY, "--config", str(cfg))
        assert code == 0 and len(m["bond_profile"]) == 1 and m["scale_mode"] == "raw"
        code, m, _ = run(capsys, "build-tree", *PARITY, "--config", str(cfg), "--layers", "full")
        assert code == 0 and len(m["bond_profile"]) == 1  # 4 sites: full tree is one layer too
        code, m, _ = run(capsys, "build-tree", *PARITY, "--config", str(cfg),
                         "--scale-mode", "unit-local")
        assert m["scale_mode"] == "unit_local"

    def test_unknown_config_key(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        code, _, _ = run(capsys, "build-tree", *PARITY, "--config", str(cfg))
        assert code == 2


class TestLiftLinear:
    def test_stripes_fully_separated(self, capsys, tmp_path):
        code, m, _ = run(capsys, "lift-linear", "--synthetic", "two_gaussian_stripes",
                         "--n-samples", "200", "--model-out", str(tmp_path / "w"))
        assert code == 0
        assert m["train_accuracy"] == 1.0
        assert m["lift_max_abs_error"] < 1e-10
        assert load_header(tmp_path / "w")["kind"] == "mps"

    def test_singular_fallback(self, capsys, caplog):
        # two samples cannot determine nine coefficients
        code, m, _ = run(capsys, "lift-linear", "--synthetic", "two_gaussian_stripes",
                         "--n-samples", "2")
        assert code == 0 and m["ridge_used"] == 1e-8
        assert "singular" in caplog.text


class TestTrain:
    def test_top_then_evaluate_reproduces_accuracy(self, capsys, tmp_path):
        model = str(tmp_path / "top")
        code, m, _ = run(capsys, "train-top", *PARITY, "--cutoff", "0", "--model-out", model,
                         "--deterministic")
        assert code == 0 and m["train"]["accuracy"] == 1.0
        assert "wall_seconds" not in m
        code, e, _ = run(capsys, "evaluate", "--model", model, *PARITY)
        assert e["accuracy"] == m["train"]["accuracy"]
        assert e["cost"] == m["train"]["cost"]

    def test_deterministic_metrics_byte_identical(self, capsys, tmp_path):
        args = ["train-top", "--synthetic", "two_gaussian_stripes", "--n-samples", "60",
                "--cutoff", "1e-3", "--deterministic", "--threads", "2"]
        run(capsys, *args, "--metrics-out", str(tmp_path / "a.json"))
        run(capsys, *args, "--metrics-out", str(tmp_path / "b.json"))
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_curtain_parity(self, capsys, tmp_path):
        code, m, _ = run(capsys, "train-curtain", *PARITY, "--layers", "1", "--cutoff", "0",
                         "--bond-dim", "8", "--sweeps", "3", "--model-out", str(tmp_path / "c"))
        assert code == 0 and m["train"]["accuracy"] == 1.0
        assert np.all(np.diff(m["sweep_costs"]) <= 1e-10)

    def test_mixed_build_from_prior(self, capsys, tmp_path):
        prior = str(tmp_path / "w")
        run(capsys, "lift-linear", "--synthetic", "two_gaussian_stripes", "--n-samples", "50",
            "--model-out", prior)
        code, m, _ = run(capsys, "train-top", "--synthetic", "two_gaussian_stripes",
                         "--n-samples", "50", "--prior", prior, "--cutoff", "1e-3")
        assert code == 0 and m["mu"] == 0.5

    def test_evaluate_label_mismatch(self, capsys, tmp_path):
        model = str(tmp_path / "top")
        run(capsys, "train-top", *PARITY, "--cutoff", "0", "--model-out", model)
        code, _, _ = run(capsys, "evaluate", "--model", model, *PARITY, "--classes", "3")
        assert code == 5

    def test_train_top_rejects_partial_tree(self, capsys, tmp_path):
        model = tmp_path / "top"
        code, _, _ = run(capsys, "train-top", "--synthetic", "two_gaussian_stripes",
                         "--n-samples", "20", "--layers", "1", "--model-out", str(model))
        assert code == 5
        assert not model.exists()
        assert os.listdir(tmp_path) == []


class TestInspect:
    def test_two_layer_tree(self, capsys, tmp_path):
        t = str(tmp_path / "t")
        run(capsys, "build-tree", "--synthetic", "two_gaussian_stripes", "--n-samples", "30",
            "--layers", "2", "--model-out", t)
        code, m, err = run(capsys, "inspect", "--model", t)
        assert code == 0
        assert m["tree"]["n_layers"] == 2
        assert "layer 1" in err and "layer 2" in err and "layer 3" not in err

    def test_corrupt_container(self, capsys, tmp_path):
        t = tmp_path / "t"
        run(capsys, "build-tree", *PARITY, "--model-out", str(t))
        t.write_bytes(t.read_bytes()[:-4])
        code, _, _ = run(capsys, "inspect", "--model", str(t))
        assert code == 4
