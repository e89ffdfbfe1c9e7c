import json
import math
import re
import subprocess
import sys

import numpy as np
import pytest

from probslot import serialize as io
from probslot.errors import ContractError
from probslot.gmm import GaussianMixture, grid_density_2d, mixture_log_density
from probslot.harness import commands
from probslot.harness.cli import main
from probslot.harness.config import RunConfig, apply_overrides, dump_config, load_config
from probslot.harness.plots import plot_mixture
from probslot.nets import build_model

TINY = {
    "scenes": "6",
    "epochs": "1",
    "K": "3",
    "T": "2",
    "batch_size": "3",
    "seeds": "1,2",
    "grid_n": "201",
}


def tiny_config(out_dir, **extra):
    values = dict(TINY, out_dir=str(out_dir))
    values.update({k: str(v) for k, v in extra.items()})
    return apply_overrides(RunConfig(), values)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    cfg = tiny_config(tmp_path_factory.mktemp("run"))
    commands.cmd_synth(cfg)
    commands.cmd_train(cfg)
    return cfg


# -- config -------------------------------------------------------------------------------


def test_config_file_roundtrip(tmp_path):
    cfg = tiny_config(tmp_path, tau="0.1", learn_query="false", encoder_hidden="8,8")
    path = tmp_path / "run.cfg"
    path.write_text("# comment line\n" + dump_config(cfg))
    back = load_config(path)
    assert back == cfg
    assert back.train.K == 3 and back.train.learn_query is False and back.train.encoder_hidden == (8, 8)


def test_config_rejects_bad_values(tmp_path):
    with pytest.raises(ContractError):
        apply_overrides(RunConfig(), {"no_such_key": "1"})
    with pytest.raises(ContractError):
        apply_overrides(RunConfig(), {"epochs": "many"})
    with pytest.raises(ContractError):
        apply_overrides(RunConfig(), {"seeds": "1,1"})
    with pytest.raises(ContractError):
        apply_overrides(RunConfig(), {"learn_query": "maybe"})
    (tmp_path / "bad.cfg").write_text("[oops\nkey\n")
    with pytest.raises(ContractError):
        load_config(tmp_path / "bad.cfg")


def test_digests_scope_their_inputs(tmp_path):
    a = tiny_config(tmp_path)
    b = apply_overrides(a, {"tau": "0.2"})
    assert a.digest("data") == b.digest("data") and a.digest("train", 1) == b.digest("train", 1)
    assert a.digest() != b.digest()
    assert a.digest("train", 1) != a.digest("train", 2)


# -- synth ----------------------------------------------------------------------------------


def test_synth_default_is_1000_scenes(tmp_path):
    cfg = RunConfig(out_dir=str(tmp_path))
    out = commands.cmd_synth(cfg)
    pts, labels, header, digest = io.load_dataset(out["dataset"])
    assert pts.shape == (1000, 384, 2) and header["M"] == 1000
    assert digest == cfg.digest("data")


def test_synth_single_scene_with_csv(tmp_path):
    cfg = tiny_config(tmp_path, scenes=1, export_csv="true")
    out = commands.cmd_synth(cfg)
    pts, _, _, _ = io.load_dataset(out["dataset"])
    assert pts.shape == (1, 384, 2)
    lines = open(out["csv"]).read().splitlines()
    assert len(lines) == 1 + 384 + 1 and lines[-1].startswith("# config_digest=")


# -- train ----------------------------------------------------------------------------------------


def test_train_writes_independent_checkpoints(run):
    a, b = (io.load_checkpoint(run.checkpoint_path(s)) for s in (1, 2))
    assert a.config.seed == 1 and b.config.seed == 2
    assert not np.array_equal(a.model.encoder.layers[0].weight, b.model.encoder.layers[0].weight)
    loss = (run.seed_dir(1) / "loss.csv").read_text().splitlines()
    assert loss[0] == "epoch,loss" and len(loss) == 1 + 1 + 1


def test_train_zero_epochs_is_initialization(tmp_path):
    cfg = tiny_config(tmp_path, epochs=0, seeds=4)
    commands.cmd_synth(cfg)
    commands.cmd_train(cfg)
    ck = io.load_checkpoint(cfg.checkpoint_path(4))
    ref = build_model(cfg.train_config(4), np.random.default_rng(4))
    for name, value in ref.parameters().items():
        assert np.array_equal(ck.model.parameters()[name], value)


def test_train_requires_dataset(tmp_path):
    with pytest.raises(ContractError):
        commands.cmd_train(tiny_config(tmp_path))


# -- aggregate --------------------------------------------------------------------------------------


def test_aggregate_single_scene_equals_local(tmp_path, run):
    cfg = apply_overrides(run, {"scenes": "1", "out_dir": str(tmp_path), "dataset": str(tmp_path / "one.bin")})
    commands.cmd_synth(cfg)
    out = commands.cmd_aggregate(cfg, run.checkpoint_path(1), tmp_path / "agg.json")
    mix, record = io.load_mixture(out["mixture"])
    ck = io.load_checkpoint(run.checkpoint_path(1))
    pts, _ = commands.load_points(cfg)
    local = commands.infer(ck.model, pts, cfg.infer_seed).locals()[0]
    assert np.array_equal(mix.means, local.means) and np.array_equal(mix.vars, local.vars)
    np.testing.assert_allclose(mix.weights, local.weights, atol=1e-15)
    assert record["meta"]["n_components"] == 3


def test_aggregate_component_count_and_normalization(run):
    out = commands.cmd_aggregate(run)
    assert out["n_components"] == 6 * 3
    assert 0.999 <= out["normalization"] <= 1.001 and out["normalized_ok"]


def test_aggregate_rejects_gaussian_mode(run):
    with pytest.raises(ContractError):
        commands.cmd_aggregate(apply_overrides(run, {"aggregate_mode": "gaussian"}))


# -- identifiability ------------------------------------------------------------------------------------


def test_identifiability_self_pair(run, tmp_path):
    cfg = apply_overrides(run, {"out_dir": str(tmp_path)})
    cfg = apply_overrides(cfg, {"dataset": str(run.dataset_path)})
    path = run.checkpoint_path(1)
    rep = commands.cmd_identifiability(cfg, [path], extra={"copy": io.load_checkpoint(path)})
    assert rep["mean_smcc"] == pytest.approx(1.0, abs=1e-9)
    assert rep["mean_aggregate_residual"] < 1e-12
    record = io.read_record(rep["report"], "sweep_report")
    assert np.allclose(record["smcc_matrix"], np.asarray(record["smcc_matrix"]).T)


def test_identifiability_affine_clone(run, tmp_path):
    cfg = apply_overrides(run, {"out_dir": str(tmp_path), "dataset": str(run.dataset_path), "learn_query": "false"})
    commands.cmd_train(apply_overrides(cfg, {"seeds": "7"}))
    ck = io.load_checkpoint(cfg.checkpoint_path(7))
    clone = commands.clone_checkpoint(ck, [2.5, -0.4], [3.0, -7.0])
    rep = commands.cmd_identifiability(cfg, [cfg.checkpoint_path(7)], extra={"clone": clone})
    assert rep["mean_smcc"] >= 0.999
    assert rep["mean_aggregate_residual"] < 1e-6


def test_affine_clone_same_outputs(run):
    ck = io.load_checkpoint(run.checkpoint_path(1))
    pts, _ = commands.load_points(run)
    clone = commands.affine_clone(ck.model, [0.5, 2.0], [0.0, 0.0])
    a = commands.infer(ck.model, pts, 3)
    b = commands.infer(clone, pts, 3)
    np.testing.assert_allclose(b.recon, a.recon, atol=1e-9)
    np.testing.assert_allclose(b.mu, a.mu * [0.5, 2.0], atol=1e-9)
    with pytest.raises(ContractError):
        commands.affine_clone(ck.model, [1.0, 1.0], [1.0, 0.0])  # learned query needs zero offset
    with pytest.raises(ContractError):
        commands.affine_clone(ck.model, [1.0, 0.0], [0.0, 0.0])


def test_identifiability_contracts(run, tmp_path):
    cfg = apply_overrides(run, {"out_dir": str(tmp_path), "dataset": str(run.dataset_path)})
    with pytest.raises(ContractError):
        commands.cmd_identifiability(cfg, [run.checkpoint_path(1)])
    other = apply_overrides(cfg, {"K": "4", "seeds": "9"})
    commands.cmd_train(other)
    with pytest.raises(ContractError):
        commands.cmd_identifiability(cfg, [run.checkpoint_path(1), other.checkpoint_path(9)])
    with pytest.raises(ContractError):
        commands.cmd_identifiability(apply_overrides(cfg, {"metrics": "smcc,fid"}), [run.checkpoint_path(1), run.checkpoint_path(2)])


def test_identifiability_metric_selection(run, tmp_path):
    cfg = apply_overrides(run, {"out_dir": str(tmp_path), "dataset": str(run.dataset_path), "metrics": "ari"})
    rep = commands.cmd_identifiability(cfg, [run.checkpoint_path(s) for s in run.seeds])
    assert "mean_smcc" not in rep and rep["pairs"] == []
    assert all("ari" in r and "ard" not in r for r in rep["per_run"].values())
    rep = commands.cmd_identifiability(apply_overrides(cfg, {"metrics": "contrast"}), [run.checkpoint_path(s) for s in run.seeds])
    assert all(r["contrast"] >= 0.0 and "ari" not in r for r in rep["per_run"].values())


# -- ARD -------------------------------------------------------------------------------------------------


def test_ard_tau_zero(run):
    stats = commands.cmd_ard_report(apply_overrides(run, {"tau": "0"}))
    assert stats["modal_count"] == 3 and stats["savings"] == 0.0 and stats["savings_counted"] == 0.0


def test_ard_savings_identity(run):
    stats = commands.cmd_ard_report(apply_overrides(run, {"tau": "0.3"}))
    assert stats["savings"] == pytest.approx(1 - stats["mean_active"] / 3, abs=1e-12)
    assert stats["savings_counted"] == pytest.approx(stats["savings"], abs=1e-12)
    assert sum(stats["histogram"]) == 6


# -- sampling ------------------------------------------------------------------------------------------------


def test_sample_count_zero(run, tmp_path):
    agg = commands.cmd_aggregate(run)["mixture"]
    out = commands.cmd_sample(run, agg, 0, out_path=tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert out["count"] == 0 and lines[0] == "z1,z2" and lines[1].startswith("# config_digest=")


def test_sample_histogram_tracks_density(tmp_path):
    cfg = tiny_config(tmp_path)
    mix = GaussianMixture([0.3, 0.5, 0.2], [[-2.0, 0.0], [1.5, 1.0], [0.0, -2.5]], [[0.4, 0.6], [0.3, 0.3], [1.0, 0.2]])
    src = io.save_mixture(tmp_path / "m.json", mix, cfg.digest())
    out = commands.cmd_sample(cfg, src, 100_000)
    x, _, _ = io.load_samples(out["samples"])
    edges_x, edges_y = np.linspace(-5, 5, 41), np.linspace(-5, 5, 41)
    hist, _, _ = np.histogram2d(x[:, 0], x[:, 1], bins=[edges_x, edges_y], density=True)
    cx, cy = 0.5 * (edges_x[1:] + edges_x[:-1]), 0.5 * (edges_y[1:] + edges_y[:-1])
    dens = grid_density_2d(mix, cx, cy).T  # (x, y) to match histogram2d
    assert np.corrcoef(hist.ravel(), dens.ravel())[0, 1] > 0.95


def test_sample_concat_dimension(run, tmp_path):
    out = commands.cmd_sample(run, run.checkpoint_path(1), 50, mode="concat", scene=2, out_path=tmp_path / "c.csv")
    assert out["dim"] == 6
    with pytest.raises(ContractError):
        commands.cmd_sample(run, run.checkpoint_path(1), 5, mode="concat", scene=99)
    with pytest.raises(ContractError):
        commands.cmd_sample(run, run.checkpoint_path(1), 5, mode="sideways")


# -- plots -------------------------------------------------------------------------------------------------------


def test_plot_empty_mixture_axes_only(tmp_path):
    path, drawn = plot_mixture(None, tmp_path / "e.svg", "0" * 16)
    assert drawn is None and path.read_text().startswith("<?xml")


def test_plot_1d_curve_matches_density(tmp_path):
    mix = GaussianMixture([0.2, 0.5, 0.3], [[-2.0], [0.0], [3.0]], [[0.3], [1.0], [0.5]])
    _, (xs, ys) = plot_mixture(mix, tmp_path / "c.svg", "0" * 16)
    np.testing.assert_allclose(ys, np.exp(mixture_log_density(mix, xs[:, None])), rtol=1e-14)


def test_plot_panels_and_determinism(run, tmp_path):
    mixtures = []
    for s in run.seeds:
        mixtures.append(commands.cmd_aggregate(run, run.checkpoint_path(s))["mixture"])
    a = commands.cmd_plot(run, mixtures, tmp_path / "a")
    b = commands.cmd_plot(run, mixtures, tmp_path / "b")
    assert [p.rsplit("/", 1)[1] for p in a["plots"]][-1] == "panels.svg"
    for pa, pb in zip(a["plots"], b["plots"]):
        assert open(pa, "rb").read() == open(pb, "rb").read()
    panel = open(a["plots"][-1]).read()
    assert panel.count("<g id=\"axes_") == len(run.seeds)


def test_plot_all_input_kinds(run, tmp_path):
    csv = commands.cmd_synth(apply_overrides(run, {"export_csv": "true", "out_dir": str(tmp_path), "dataset": ""}))["csv"]
    agg = commands.cmd_aggregate(run)["mixture"]
    samples = commands.cmd_sample(run, agg, 100, out_path=tmp_path / "s.csv")["samples"]
    out = commands.cmd_plot(run, [csv, samples, str(run.dataset_path)], tmp_path / "p")
    assert len(out["plots"]) == 3
    for p in out["plots"]:
        assert re.search(r"<!-- config_digest=[0-9a-f]{16} -->", open(p).read())


def test_plot_malformed_input(tmp_path, run):
    bad = tmp_path / "bad.json"
    bad.write_text('{"kind": "mixture",\n "version": 1\n "d": 2}')
    with pytest.raises(io.ParseError) as info:
        commands.cmd_plot(run, [bad], tmp_path)
    assert info.value.line == 3
    with pytest.raises(ContractError):
        commands.cmd_plot(run, [tmp_path / "missing.json"], tmp_path)


# -- CLI ------------------------------------------------------------------------------------------------------------


def test_cli_end_to_end_from_config_file(tmp_path, capsys):
    cfg_path = tmp_path / "exp.cfg"
    cfg_path.write_text(
        "\n".join(f"{k} = {v}" for k, v in {**TINY, "out_dir": str(tmp_path / "out"), "export_csv": "true"}.items()) + "\n"
    )
    outputs = {}
    for cmd in (["synth"], ["train"], ["aggregate"], ["identifiability"], ["ard-report"]):
        assert main(cmd + ["--config", str(cfg_path)]) == 0
        outputs[cmd[0]] = json.loads(capsys.readouterr().out)
    agg = outputs["aggregate"]["mixture"]
    assert main(["sample", "--config", str(cfg_path), "--source", agg, "--count", "20"]) == 0
    assert main(["plot", "--config", str(cfg_path), agg]) == 0
    assert outputs["synth"]["scenes"] == 6
    assert set(outputs["identifiability"]) >= {"mean_smcc", "mean_r2", "mean_aggregate_residual"}
    # every artifact carries the digest footer
    for path in (tmp_path / "out").rglob("*"):
        if path.is_file():
            tail = path.read_bytes()[-80:]
            assert b"config_digest" in tail or re.search(rb"[0-9a-f]{16}$", tail), path


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid value:RuntimeWarning")
def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train", "--out-dir", str(tmp_path / "none")]) == 2
    assert main(["synth", "--out-dir", str(tmp_path), "--set", "bogus=1"]) == 2
    assert main(["synth", "--out-dir", str(tmp_path), "--set", "no_equals"]) == 2
    assert main(["synth", "--out-dir", str(tmp_path), "--scenes", "2"]) == 0
    code = main(["train", "--out-dir", str(tmp_path), "--seeds", "1", "--epochs", "1", "--set", "lr=1e300", "--set", "batch_size=1"])
    assert code == 3
    capsys.readouterr()


def test_cli_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "probslot", "synth", "--scenes", "1", "--out-dir", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["scenes"] == 1


def test_commands_are_deterministic(tmp_path):
    digests = []
    for name in ("a", "b"):
        cfg = tiny_config(tmp_path / name, seeds="3")
        commands.cmd_synth(cfg)
        commands.cmd_train(cfg)
        commands.cmd_aggregate(cfg)
        digests.append(
            [
                (tmp_path / name / rel).read_bytes()
                for rel in ("dataset.bin", "seed3/checkpoint.json", "seed3/aggregate.json", "seed3/loss.csv")
            ]
        )
    assert digests[0] == digests[1]
    assert math.isfinite(json.loads(digests[0][2])["meta"]["normalization"])
