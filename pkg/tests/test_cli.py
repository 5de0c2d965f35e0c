import json
import os

import numpy as np
import pandas as pd
import pytest

from fmapnet.cli import _run_header, build_parser, main, overrides_from_args
from fmapnet.config import PipelineConfig
from fmapnet.desc_net import load_checkpoint
from fmapnet.fmap_solver import load_fmap
from fmapnet.mesh_core import save_mesh
from fmapnet.pointwise_map import load_point_map, nn_residual
from fmapnet.spectral_basis import load_basis
from fmapnet.synthetic import tetrahedron


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("FMAPNET_OUT_DIR", "FMAPNET_THREADS", "FMAPNET_SEED", "FMAPNET_K"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def tetra_files(tmp_path):
    paths = []
    for name in ("tet_a", "tet_b"):
        path = str(tmp_path / f"{name}.off")
        save_mesh(tetrahedron(name=name), path)
        paths.append(path)
    return paths


@pytest.fixture
def synth_pair(tmp_path):
    directory = str(tmp_path / "synth")
    assert main(["--seed", "1", "--out", str(tmp_path / "out"), "synth", directory, "--nx", "8", "--ny", "7"]) == 0
    return {
        "template": os.path.join(directory, "template.off"),
        "deformed": os.path.join(directory, "deformed.off"),
        "gt": os.path.join(directory, "deformed_to_template.gt.txt"),
        "out": str(tmp_path / "out"),
    }


def test_precompute_writes_caches_then_reuses_them(tmp_path, tetra_files, capsys):
    out = str(tmp_path / "out")
    argv = ["--out", out, "precompute", *tetra_files, "--k", "3", "--descriptor", "hks"]
    assert main(argv) == 0
    cache = os.path.join(out, "cache")
    assert sorted(f for f in os.listdir(cache) if f.endswith(".basis.npz")) == ["tet_a.basis.npz", "tet_b.basis.npz"]
    assert sorted(f for f in os.listdir(cache) if f.endswith(".desc.csv")) == ["tet_a.desc.csv", "tet_b.desc.csv"]
    assert "computed" in capsys.readouterr().out

    assert main(argv) == 0
    printed = capsys.readouterr().out
    assert "basis cached, descriptors cached" in printed
    assert "basis computed" not in printed


def test_precompute_k_too_large_is_a_parameter_error(tmp_path, tetra_files, capsys):
    code = main(["--out", str(tmp_path / "out"), "precompute", tetra_files[0], "--k", "4", "--descriptor", "hks"])
    assert code == 2
    assert "tet_a" in capsys.readouterr().err


def test_precompute_bad_mesh_is_a_data_error(tmp_path):
    path = tmp_path / "broken.off"
    path.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 5\n")
    assert main(["--out", str(tmp_path / "out"), "precompute", str(path), "--k", "2"]) == 3


def test_run_header_echoes_defaults():
    header = dict(_run_header(PipelineConfig()))
    assert header["weights (w1..w4)"] == (1e3, 1e3, 1.0, 1e5)
    assert header["learning rate"] == 0.001
    assert header["iterations"] == 10000
    assert header["batch pairs"] == 10
    assert header["points per shape"] == 1500


def test_train_writes_checkpoint_log_and_summary(synth_pair, capsys):
    out = synth_pair["out"]
    code = main(["--out", out, "--seed", "2", "train", synth_pair["template"], synth_pair["deformed"],
                 "--k", "8", "--descriptor", "hks", "--hks-times", "10", "--iterations", "10", "--points", "40",
                 "--batch-pairs", "2", "--dtype", "float64", "--layers", "2"])
    assert code == 0
    log = pd.read_csv(os.path.join(out, "train_log.csv"))
    assert len(log) == 10
    assert {"step", "loss", "E1", "E2", "E3", "E4", "wall_ms"} <= set(log.columns)
    params, config_hash, metadata = load_checkpoint(os.path.join(out, "checkpoint.npz"))
    assert params.d == 10 and params.num_layers == 2
    assert metadata["shapes"] == ["template", "deformed"]
    with open(os.path.join(out, "train_summary.json")) as f:
        summary = json.load(f)
    assert summary["iterations"] == 10
    assert "learning rate" in capsys.readouterr().out


def test_train_without_caches_and_no_auto_precompute(synth_pair, capsys):
    code = main(["--out", synth_pair["out"], "train", synth_pair["template"], synth_pair["deformed"],
                 "--k", "8", "--descriptor", "hks", "--iterations", "2", "--no-auto-precompute"])
    assert code == 3
    assert "precompute" in capsys.readouterr().err


def test_match_refine_and_eval(synth_pair):
    out = synth_pair["out"]
    common = ["--k", "10", "--descriptor", "hks"]
    assert main(["--out", out, "match", synth_pair["template"], synth_pair["deformed"], "--axiomatic", *common]) == 0
    fmap = load_fmap(os.path.join(out, "template_to_deformed.fmap.csv"))
    assert fmap.shape == (10, 10)
    point_map = load_point_map(os.path.join(out, "template_to_deformed.map.txt"))
    assert point_map.source == "template" and point_map.target == "deformed"

    refined_out = os.path.join(out, "refined.fmap.csv")
    assert main(["--out", out, "refine", synth_pair["template"], synth_pair["deformed"], "--axiomatic",
                 "--fmap-out", refined_out, "--map-out", os.path.join(out, "refined.map.txt"), *common]) == 0
    C = load_fmap(refined_out).matrix
    assert np.linalg.norm(C.T @ C - np.eye(10)) < 1e-6

    report_path = os.path.join(out, "report.json")
    assert main(["--out", out, "eval", os.path.join(out, "refined.map.txt"), synth_pair["gt"],
                 synth_pair["template"], "--json", report_path]) == 0
    with open(report_path) as f:
        report = json.load(f)
    assert report["n"] == 56
    assert 0 <= report["mean"] <= report["max"]
    assert {"mean", "percentile95", "max"} <= report.keys()
    curve = pd.read_csv(os.path.join(out, "eval_curve.csv"))
    assert curve["fraction"].iloc[-1] == 1.0


def test_refine_given_functional_map(synth_pair):
    out = synth_pair["out"]
    fmap_path = os.path.join(out, "noisy.fmap.csv")
    pd.DataFrame(np.eye(10) + 0.01).to_csv(fmap_path, header=False, index=False)
    assert main(["--out", out, "refine", synth_pair["template"], synth_pair["deformed"], "--fmap", fmap_path,
                 "--k", "10", "--descriptor", "hks", "--fmap-out", os.path.join(out, "r.csv")]) == 0
    C = load_fmap(os.path.join(out, "r.csv")).matrix
    assert np.linalg.norm(C.T @ C - np.eye(10)) < 1e-6


def test_self_match_is_identity(synth_pair):
    out = synth_pair["out"]
    assert main(["--out", out, "match", synth_pair["template"], synth_pair["template"], "--axiomatic",
                 "--k", "10", "--descriptor", "hks"]) == 0
    point_map = load_point_map(os.path.join(out, "template_to_template.map.txt"))
    assert point_map.identity_fraction() >= 0.99


def test_reverse_direction_swaps_shapes(synth_pair):
    out = synth_pair["out"]
    assert main(["--out", out, "match", synth_pair["template"], synth_pair["deformed"], "--axiomatic",
                 "--direction", "reverse", "--k", "10", "--descriptor", "hks"]) == 0
    assert os.path.exists(os.path.join(out, "deformed_to_template.map.txt"))


def test_learned_match_needs_checkpoint(synth_pair):
    code = main(["--out", synth_pair["out"], "match", synth_pair["template"], synth_pair["deformed"],
                 "--method", "learned", "--k", "10", "--descriptor", "hks"])
    assert code == 2


def test_learned_and_axiomatic_match_residuals(synth_pair):
    out = synth_pair["out"]
    common = ["--k", "8", "--descriptor", "hks", "--hks-times", "10"]
    assert main(["--out", out, "--seed", "2", "train", synth_pair["template"], synth_pair["deformed"], *common,
                 "--iterations", "5", "--points", "40", "--batch-pairs", "1", "--dtype", "float64",
                 "--layers", "1"]) == 0
    checkpoint = os.path.join(out, "checkpoint.npz")

    residuals = {}
    for name, flags in (("learned", ["--checkpoint", checkpoint]), ("axiomatic", ["--axiomatic"])):
        fmap_path, map_path = os.path.join(out, f"{name}.fmap.csv"), os.path.join(out, f"{name}.map.txt")
        assert main(["--out", out, "match", synth_pair["template"], synth_pair["deformed"], *flags, *common,
                     "--fmap-out", fmap_path, "--map-out", map_path]) == 0
        basis1 = load_basis(os.path.join(out, "cache", "template.basis.npz"))
        basis2 = load_basis(os.path.join(out, "cache", "deformed.basis.npz"))
        residuals[name] = nn_residual(load_fmap(fmap_path).matrix, load_point_map(map_path), basis1, basis2)
    assert all(np.isfinite(r) and r >= 0 for r in residuals.values())


def test_ablation_writes_table(synth_pair, capsys):
    out = synth_pair["out"]
    gt = f"template:deformed:{synth_pair['gt']}"
    assert main(["--out", out, "--seed", "3", "ablation", synth_pair["template"], synth_pair["deformed"],
                 "--k", "8", "--descriptor", "hks", "--hks-times", "10", "--iterations", "3", "--points", "40",
                 "--batch-pairs", "1", "--dtype", "float64", "--layers", "1", "--subsets", "E3;E1+E2+E3+E4",
                 "--gt", gt]) == 0
    table = pd.read_csv(os.path.join(out, "ablation.csv"))
    assert list(table["penalties"]) == ["E3", "E1+E2+E3+E4"]
    assert {"k", "penalties", "mean", "percentile95", "max"} <= set(table.columns)
    assert np.all(table["k"] == 8)
    assert np.all(table["mean"] <= table["max"])
    with open(os.path.join(out, "ablation.json")) as f:
        assert len(json.load(f)) == 2
    assert "E1+E2+E3+E4" in capsys.readouterr().out


@pytest.mark.parametrize("subsets", ["E3;E5", "E1,E2", " ; "])
def test_ablation_unknown_subset_is_a_parameter_error(synth_pair, subsets):
    gt = f"template:deformed:{synth_pair['gt']}"
    code = main(["--out", synth_pair["out"], "ablation", synth_pair["template"], synth_pair["deformed"],
                 "--k", "8", "--descriptor", "hks", "--subsets", subsets, "--gt", gt])
    assert code == 2
    assert not os.path.exists(os.path.join(synth_pair["out"], "ablation.csv"))


def test_correlate(tmp_path, capsys):
    log = tmp_path / "log.csv"
    pd.DataFrame({"step": range(6), "loss": [5.0, 4.0, 3.5, 2.0, 1.0, 0.5],
                  "geo_error": [0.5, np.nan, 0.3, 0.25, np.nan, 0.1]}).to_csv(log, index=False)
    assert main(["--out", str(tmp_path / "out"), "correlate", str(log)]) == 0
    assert "Pearson r" in capsys.readouterr().out

    pd.DataFrame({"loss": [1.0, 2.0, 3.0], "geo_error": [0.2, 0.2, 0.2]}).to_csv(log, index=False)
    assert main(["--out", str(tmp_path / "out"), "correlate", str(log)]) == 3


def test_config_file_and_flag_precedence(tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({"k": 50, "train": {"iterations": 7}}))
    args = build_parser().parse_args(["--config", str(config_path), "train", "--k", "12",
                                      "--weights", "1,2,3,4", "--penalties", "e1,e4"])
    config = PipelineConfig.load(args.config, overrides=overrides_from_args(args), env=False)
    assert config.k == 12
    assert config.train.iterations == 7
    assert config.train.weights.as_tuple() == (1.0, 2.0, 3.0, 4.0)
    assert config.train.effective_weights.as_tuple() == (1.0, 0.0, 0.0, 4.0)


def test_bad_weights_flag(tmp_path):
    assert main(["--out", str(tmp_path / "out"), "train", "a.off", "b.off", "--weights", "1,2"]) == 2
