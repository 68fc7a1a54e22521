import hashlib
import json
import os

import numpy as np
import pytest

from v2sreg import cli
from v2sreg.datagen import (DatasetManifest, Sample, load_manifest, read_sample,
                            synthetic_brain, write_sample)
from v2sreg.geom import farthest_point_sample
from v2sreg.net import NetworkConfig, RegistrationNet, save_checkpoint
from v2sreg.ply import read_ply, write_ply

GEN_ARGS = ["--synthetic-brain", "1", "--variations", "2",
            "--modes", "global,composite", "--ratios", "0.25,0.45",
            "--preop-points", "192", "--surf-points", "96", "--seed", "3"]

TRAIN_NET_ARGS = ["--sa-sizes", "48,16,8", "--sa-channels", "8,12,16",
                  "--sa-kneighbors", "4", "--fp-channels", "16,12,8,4",
                  "--bottleneck", "24", "--heads", "2"]


def run_cli(capsys, args):
    rc = cli.main(args)
    out = capsys.readouterr().out
    return rc, (json.loads(out) if out.strip() else None)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = cli.main(["gen", *GEN_ARGS, "--out", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    rc = cli.main(["train", "--manifest", str(dataset / "manifest.json"),
                   "--out", str(out), "--epochs", "2", "--batch-size", "2",
                   "--seed", "5", "--noise-sigma-max", "0", "--noise-a-max", "0",
                   *TRAIN_NET_ARGS])
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def test_gen_counts(capsys, dataset):
    manifest = load_manifest(dataset / "manifest.json")
    assert len(manifest.samples) == 1 * 2 * 2 * 2
    splits = {r["split"] for r in manifest.samples}
    assert splits <= {"train", "val", "test"}


def test_gen_deterministic(tmp_path, capsys):
    rc1, s1 = run_cli(capsys, ["gen", *GEN_ARGS, "--out", str(tmp_path / "a")])
    rc2, s2 = run_cli(capsys, ["gen", *GEN_ARGS, "--out", str(tmp_path / "b")])
    assert rc1 == rc2 == 0
    assert s1["initial_epe_mm"] == s2["initial_epe_mm"]
    ma = (tmp_path / "a" / "manifest.json").read_text()
    mb = (tmp_path / "b" / "manifest.json").read_text()
    assert ma == mb
    for rec in json.loads(ma)["samples"]:
        da = hashlib.sha256((tmp_path / "a" / rec["path"]).read_bytes()).hexdigest()
        db = hashlib.sha256((tmp_path / "b" / rec["path"]).read_bytes()).hexdigest()
        assert da == db


def test_gen_summary_fields(tmp_path, capsys):
    rc, summary = run_cli(capsys, ["gen", "--synthetic-brain", "1", "--variations", "1",
                                   "--modes", "global", "--ratios", "0.25",
                                   "--preop-points", "128", "--surf-points", "64",
                                   "--seed", "0", "--out", str(tmp_path / "d")])
    assert rc == 0
    assert summary["samples"] == 1
    assert summary["initial_epe_mm"]["mean"] > 0


def test_gen_requires_cases(tmp_path, capsys):
    rc = cli.main(["gen", "--out", str(tmp_path / "x")])
    assert rc == 2


def test_gen_bad_out_dir(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rc = cli.main(["gen", *GEN_ARGS, "--out", str(blocker / "sub")])
    assert rc == 3
    assert not (blocker / "sub").exists()


def test_gen_env_seed(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("V2S_SEED", "3")
    args = [a for a in GEN_ARGS if a not in ("--seed", "3")]
    rc, summary = run_cli(capsys, ["gen", *args, "--out", str(tmp_path / "env")])
    assert rc == 0
    assert summary["seed"] == 3


def test_config_file_and_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("synthetic-brain = 1\nvariations = 1\nmodes = global\n"
                   "ratios = 0.25\npreop-points = 128\nsurf-points = 64\nseed = 1\n")
    rc, summary = run_cli(capsys, ["gen", "--config", str(cfg),
                                   "--out", str(tmp_path / "c")])
    assert rc == 0
    assert summary["samples"] == 1

    bad = tmp_path / "bad.cfg"
    bad.write_text("not-a-key = 1\n")
    rc = cli.main(["gen", "--config", str(bad), "--out", str(tmp_path / "c2")])
    assert rc == 2


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_outputs(run_dir):
    assert (run_dir / "best.v2sn").exists()
    assert (run_dir / "last.v2sn").exists()
    log_lines = (run_dir / "train_log.jsonl").read_text().strip().splitlines()
    assert len(log_lines) == 2
    rec = json.loads(log_lines[-1])
    assert {"epoch", "lr", "train_loss", "val_epe", "val_rmse"} <= set(rec)


def test_train_seed_reproducible(tmp_path, dataset):
    logs = []
    for sub in ("r1", "r2"):
        rc = cli.main(["train", "--manifest", str(dataset / "manifest.json"),
                       "--out", str(tmp_path / sub), "--epochs", "1",
                       "--seed", "7", *TRAIN_NET_ARGS])
        assert rc == 0
        logs.append((tmp_path / sub / "train_log.jsonl").read_text())
    assert logs[0] == logs[1]


def test_train_empty_split(tmp_path, dataset, capsys):
    manifest = load_manifest(dataset / "manifest.json")
    for rec in manifest.samples:
        rec["split"] = "test"
    crippled = tmp_path / "crippled"
    crippled.mkdir()
    (crippled / "manifest.json").write_text(manifest.to_json())
    rc = cli.main(["train", "--manifest", str(crippled / "manifest.json"),
                   "--out", str(tmp_path / "r"), *TRAIN_NET_ARGS])
    assert rc == 2


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_identity_matches_initial_misalignment(capsys, dataset):
    rc, summary = run_cli(capsys, ["eval", "--manifest", str(dataset / "manifest.json"),
                                   "--split", "test", "--method", "identity"])
    assert rc == 0
    manifest = load_manifest(dataset / "manifest.json")
    mags = [np.linalg.norm(read_sample(dataset / r["path"]).Phi.astype(np.float64),
                           axis=1).mean()
            for r in manifest.split("test")]
    assert summary["overall"]["epe"]["mean"] == pytest.approx(np.mean(mags), rel=1e-9)


def test_eval_checkpoint_and_outputs(capsys, dataset, run_dir, tmp_path):
    report = tmp_path / "report.json"
    csv = tmp_path / "report.csv"
    rc, summary = run_cli(capsys, ["eval", "--manifest", str(dataset / "manifest.json"),
                                   "--split", "test",
                                   "--method", str(run_dir / "best.v2sn"),
                                   "--out", str(report), "--csv", str(csv)])
    assert rc == 0
    assert summary["method"] == "proposed"
    assert np.isfinite(summary["overall"]["epe"]["mean"])
    assert report.exists() and csv.exists()
    assert csv.read_text().startswith("method,group,")


def test_eval_noise_sweep_structure(capsys, dataset):
    rc, summary = run_cli(capsys, ["eval", "--manifest", str(dataset / "manifest.json"),
                                   "--split", "test", "--method", "identity",
                                   "--noise", "0,0;1,5;2,10;5,15"])
    assert rc == 0
    assert list(summary["by_noise"]) == ["0,0", "1,5", "2,10", "5,15"]


def test_eval_missing_checkpoint(capsys, dataset):
    rc = cli.main(["eval", "--manifest", str(dataset / "manifest.json"),
                   "--method", "/does/not/exist.v2sn"])
    assert rc == 2


def translation_corpus(tmp_path, t=(2.0, -1.0, 0.5)):
    """Shell-only corpus deformed by a pure translation; ICP-recoverable."""
    mesh, mask = synthetic_brain(0)
    shell = mesh.vertices[mask]
    sel = np.sort(farthest_point_sample(shell, 256, 0))
    p = shell[sel].astype(np.float32)
    i = (shell[sel] + np.asarray(t)).astype(np.float32)
    sample = Sample(P=p, I=i, S=i.copy(), Phi=i - p,
                    meta={"case_id": "shell", "mode": "translation", "variation": 0,
                          "ratio": 1.0})
    out = tmp_path / "rigid"
    (out / "samples").mkdir(parents=True)
    write_sample(sample, out / "samples" / "t0.v2ss")
    manifest = DatasetManifest(global_seed=0, samples=[
        {"path": "samples/t0.v2ss", "meta": sample.meta, "split": "test"}])
    (out / "manifest.json").write_text(manifest.to_json())
    return out


def test_eval_icp_on_translation_corpus(capsys, tmp_path):
    out = translation_corpus(tmp_path)
    rc, summary = run_cli(capsys, ["eval", "--manifest", str(out / "manifest.json"),
                                   "--split", "test", "--method", "icp"])
    assert rc == 0
    assert summary["overall"]["epe"]["mean"] < 1e-3


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def test_bench_identities_and_rows(capsys, dataset, run_dir):
    rc, out = run_cli(capsys, ["bench", "--checkpoint", str(run_dir / "best.v2sn"),
                               "--manifest", str(dataset / "manifest.json"),
                               "--reps", "3", "--baselines", "icp,cpd",
                               "--sizes", "256,512,1024"])
    assert rc == 0
    for method in ("proposed", "icp", "cpd"):
        rep = out[method]
        assert rep["t_total_ms"] == pytest.approx(
            rep["t_inference_ms"] + rep["t_update_ms"], abs=1e-9)
        assert rep["fps"] * rep["t_total_ms"] == pytest.approx(1000.0, rel=1e-9)
    assert len(out["update_scaling"]["t_update_ms"]) == 3


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

@pytest.fixture()
def zero_checkpoint(tmp_path):
    cfg = NetworkConfig(n_preop=192, n_surf=96, sa_sizes=(48, 16, 8),
                        sa_channels=(8, 12, 16), sa_kscales=((4, 8),) * 3,
                        bottleneck=24, fp_channels=(16, 12, 8, 4), heads=2)
    net = RegistrationNet(cfg)
    net.params.load_flat(np.zeros(net.params.count(), dtype=np.float32))
    path = tmp_path / "zero.v2sn"
    save_checkpoint(net, path)
    return path


def test_infer_zero_checkpoint_identity(capsys, tmp_path, zero_checkpoint, rng):
    pts = (rng.normal(size=(150, 3)) * 40).astype(np.float32).astype(np.float64)
    surf = pts[:50] + 1.0
    write_ply(tmp_path / "p.ply", pts)
    write_ply(tmp_path / "s.ply", surf)
    out_path = tmp_path / "reg.ply"
    rc, info = run_cli(capsys, ["infer", str(tmp_path / "p.ply"), str(tmp_path / "s.ply"),
                                "--checkpoint", str(zero_checkpoint),
                                "--out", str(out_path)])
    assert rc == 0
    assert info["points"] == 150
    verts, _, props = read_ply(out_path)
    assert np.array_equal(verts, pts)  # zero field: V_reg == P
    disp = np.stack([props["dx"], props["dy"], props["dz"]], axis=1)
    assert np.abs(disp).max() == 0.0
    # round trip: subtracting the stored displacement recovers the input
    assert np.abs((verts - disp) - pts).max() < 1e-5


def test_infer_trained_checkpoint_round_trip(capsys, tmp_path, dataset, run_dir):
    manifest = load_manifest(dataset / "manifest.json")
    sample = read_sample(dataset / manifest.samples[0]["path"])
    write_ply(tmp_path / "p.ply", sample.P.astype(np.float64))
    write_ply(tmp_path / "s.ply", sample.S.astype(np.float64))
    out_path = tmp_path / "reg.ply"
    rc, info = run_cli(capsys, ["infer", str(tmp_path / "p.ply"), str(tmp_path / "s.ply"),
                                "--checkpoint", str(run_dir / "best.v2sn"),
                                "--out", str(out_path)])
    assert rc == 0
    verts, _, props = read_ply(out_path)
    assert len(verts) == len(sample.P)
    disp = np.stack([props["dx"], props["dy"], props["dz"]], axis=1)
    back = verts - disp
    assert np.abs(back - sample.P).max() < 1e-3  # f32 read/write headroom


def test_infer_malformed_ply(capsys, tmp_path, zero_checkpoint):
    bad = tmp_path / "bad.ply"
    bad.write_text("not a ply\n")
    rc = cli.main(["infer", str(bad), str(bad), "--checkpoint", str(zero_checkpoint),
                   "--out", str(tmp_path / "o.ply")])
    assert rc == 2
