import json
import math

import numpy as np
import pytest

from voxelkp import cli, training
from voxelkp.config import RunConfig, ScheduleConfig, config_from_dict
from voxelkp.metrics import read_records, report
from voxelkp.pose import DEFAULT_SKELETON
from voxelkp.scenes import MANIFEST, generate_scene, load_dataset, save_scene, write_dataset
from voxelkp.training import OneCycle, read_log

TINY = {
    "seed": 3,
    "steps": 4,
    "batch_size": 1,
    "augment_enabled": False,
    "data": {"num_scenes": 2, "min_humans": 1, "max_humans": 2, "extent": 5.0, "ground_points": 200},
    "network": {"channels": [8, 16, 16, 16, 16], "point_range": [-6.0, -6.0, -2.0, 6.0, 6.0, 2.0],
                "voxel_size": [0.25, 0.25, 0.25], "bev": {"channels": 16}, "head_channels": 8,
                "attn_heads": 2, "box_size": 4},
    "eval": {"score_threshold": 0.0, "max_detections": 5},
}


def _tiny(**kw) -> RunConfig:
    return config_from_dict({**TINY, **kw})


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    cli.cmd_generate(_tiny(), d)
    return d


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return cli.cmd_train(_tiny(), dataset, out)


def _write_cfg(path, **kw):
    path.write_text(json.dumps({**TINY, **kw}))
    return str(path)


def test_generate_one_and_fifty(tmp_path):
    cfg = _tiny(data={**TINY["data"], "num_scenes": 1})
    paths = cli.cmd_generate(cfg, tmp_path / "one")
    assert len(paths) == 1
    assert (tmp_path / "one" / MANIFEST).read_text().splitlines() == [paths[0].name]
    cfg = _tiny(data={**TINY["data"], "num_scenes": 50, "ground_points": 10, "max_humans": 1})
    cli.cmd_generate(cfg, tmp_path / "fifty")
    assert len((tmp_path / "fifty" / MANIFEST).read_text().splitlines()) == 50


def test_generate_deterministic(tmp_path):
    a = cli.cmd_generate(_tiny(), tmp_path / "a")
    b = cli.cmd_generate(_tiny(), tmp_path / "b")
    for p, q in zip(a, b):
        assert p.read_bytes() == q.read_bytes()
    assert (tmp_path / "a" / MANIFEST).read_bytes() == (tmp_path / "b" / MANIFEST).read_bytes()
    c = cli.cmd_generate(_tiny(seed=4), tmp_path / "c")
    assert a[0].read_bytes() != c[0].read_bytes()


def test_generate_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(RuntimeError):
        cli.cmd_generate(_tiny(), blocker / "sub")


def test_train_one_step(dataset, tmp_path):
    res = cli.cmd_train(_tiny(steps=1), dataset, tmp_path)
    assert res.checkpoint.exists()
    rows = read_log(res.log_path)
    assert len(rows) == 1 and rows[0]["step"] == 0
    assert all(math.isfinite(v) for v in rows[0].values())


def _onecycle_oracle(step, peak, total, warm=0.3, div=25.0, final_div=1000.0):
    ps = int(round(warm * (total - 1)))
    lo, fin = peak / div, peak / final_div
    if step <= ps:
        return peak if ps == 0 else lo + (peak - lo) * (1 - math.cos(math.pi * step / ps)) / 2
    t = min((step - ps) / (total - 1 - ps), 1.0)
    return fin + (peak - fin) * (1 + math.cos(math.pi * t)) / 2


@pytest.mark.parametrize("total", [3, 11, 800])
def test_onecycle_shape(total):
    s = OneCycle(0.003, total, ScheduleConfig())
    assert s(0) < 0.003
    assert s(s.peak_step) == 0.003
    assert s(total - 1) <= s(0)
    for k in range(total):
        assert s(k) == pytest.approx(_onecycle_oracle(k, 0.003, total), rel=1e-12)
    lrs = [s(k) for k in range(total)]
    assert max(lrs) == 0.003
    assert np.all(np.diff(lrs[:s.peak_step + 1]) >= 0) and np.all(np.diff(lrs[s.peak_step:]) <= 0)


def test_resume_matches_uninterrupted(dataset, trained, tmp_path):
    cfg = _tiny(checkpoint_every=2)
    part = training.train(cfg, load_dataset(dataset), out_dir=tmp_path / "a")
    mid = tmp_path / "a" / "checkpoint_000002.vkpw"
    assert mid.exists()
    resumed = cli.cmd_train(_tiny(), dataset, tmp_path / "b", resume=mid)
    assert resumed.checkpoint.read_bytes() == trained.checkpoint.read_bytes()
    assert part.checkpoint.read_bytes() == trained.checkpoint.read_bytes()
    full = read_log(trained.log_path)
    assert [r["total"] for r in read_log(resumed.log_path)] == [r["total"] for r in full[2:]]


def test_train_empty_dataset(tmp_path):
    write_dataset(tmp_path / "empty", [])
    with pytest.raises(ValueError, match="no scenes"):
        cli.cmd_train(_tiny(), tmp_path / "empty", tmp_path / "run")


def test_eval_oracle_mode(dataset, tmp_path):
    rep, _ = cli.cmd_eval(_tiny(), dataset, tmp_path, oracle=True)
    assert rep.rows["all"]["MPJPE"] == 0.0
    assert rep.rows["all"]["OKS@AP"] == 1.0
    assert (tmp_path / "report.csv").exists() and (tmp_path / "report.txt").exists()


def test_eval_errors(dataset, tmp_path):
    with pytest.raises(FileNotFoundError):
        cli.cmd_eval(_tiny(), dataset, tmp_path, checkpoint=tmp_path / "missing.vkpw")
    write_dataset(tmp_path / "empty", [])
    with pytest.raises(ValueError, match="no scenes"):
        cli.cmd_eval(_tiny(), tmp_path / "empty", tmp_path, oracle=True)


def _same_rows(a, b):
    assert list(a.rows) == list(b.rows)
    for part in a.rows:
        np.testing.assert_array_equal(list(a.rows[part].values()), list(b.rows[part].values()))
    assert (a.num_matched, a.num_gt, a.num_pred) == (b.num_matched, b.num_gt, b.num_pred)


def test_eval_report_is_metrics_report(dataset, trained, tmp_path):
    cfg = _tiny()
    rep, preds = cli.cmd_eval(cfg, dataset, tmp_path, checkpoint=trained.checkpoint)
    scenes = load_dataset(dataset)
    model = cli.load_model(cfg, trained.checkpoint)
    again = [cli.predict_scene(model, s, cfg) for s in scenes]
    ref = report(again, [s.annotations for s in scenes], DEFAULT_SKELETON, cfg.eval.match_radius)
    _same_rows(rep, ref)
    assert (tmp_path / "report.csv").read_text() == ref.to_csv()
    # the report command recomputes the same table from the written records
    rec = cli.cmd_report(tmp_path / "predictions.vkpr", tmp_path / "ground_truth.vkpr", tmp_path / "r")
    _same_rows(rec, ref)


def test_infer_outputs_deterministic_and_round_trip(dataset, trained, tmp_path):
    cfg = _tiny()
    scene = sorted(dataset.glob("*.vkps"))[0]
    a = cli.cmd_infer(cfg, trained.checkpoint, scene, tmp_path / "a")
    cli.cmd_infer(cfg, trained.checkpoint, scene, tmp_path / "b")
    for name in ("predictions.vkpr", "predictions.csv", "predictions.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for name in ("predictions.vkpr", "predictions.csv"):
        recs = read_records(tmp_path / "a" / name)
        assert len(recs) == len(a)
        for r, p in zip(recs, a):
            e = r.to_estimate()
            assert e.score == p.score
            np.testing.assert_array_equal(e.keypoints, p.keypoints)
            np.testing.assert_array_equal(e.center, p.center)
    assert "<svg" in (tmp_path / "a" / "predictions.svg").read_text()


def test_infer_no_detections(dataset, trained, tmp_path):
    cfg = _tiny(eval={"score_threshold": 1.0})
    scene = tmp_path / "bare.vkps"
    save_scene(scene, generate_scene(0, 0, extent=5.0, ground_points=200))
    assert cli.cmd_infer(cfg, trained.checkpoint, scene, tmp_path) == []
    assert read_records(tmp_path / "predictions.vkpr") == []
    svg = (tmp_path / "predictions.svg").read_text()
    assert "<circle" in svg and "<polygon" not in svg and "<line" not in svg


def test_exit_codes(dataset, tmp_path, monkeypatch):
    cfg = _write_cfg(tmp_path / "c.json", steps=1)
    assert cli.run(["bogus"]) == cli.EXIT_USAGE
    assert cli.run(["train", "--config", cfg, "--steps", "0"]) == cli.EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert cli.run(["train", "--config", str(bad)]) == cli.EXIT_USAGE
    monkeypatch.setenv("VOXELKP_THREADS", "zero")
    assert cli.run(["eval", "--config", cfg, "--oracle", "--data", str(dataset)]) == cli.EXIT_USAGE
    monkeypatch.setenv("VOXELKP_THREADS", "1")
    assert cli.run(["eval", "--config", cfg, "--data", str(dataset), "--out", str(tmp_path / "e"),
                    "--checkpoint", str(tmp_path / "none.vkpw")]) == cli.EXIT_RUNTIME
    assert cli.run(["eval", "--config", cfg, "--oracle", "--data", str(dataset),
                    "--out", str(tmp_path / "e")]) == cli.EXIT_OK
    assert cli.run(["generate", "--config", cfg, "--num-scenes", "1", "--out", str(tmp_path / "g")]) == cli.EXIT_OK


def test_nan_abort_dumps_terms(dataset, tmp_path, monkeypatch, capsys):
    real = training.loss_on_batch

    def poisoned(model, batch, cfg):
        loss, parts, extra = real(model, batch, cfg)
        return loss, {**parts, "skeleton": float("nan")}, extra

    monkeypatch.setattr(training, "loss_on_batch", poisoned)
    cfg = _write_cfg(tmp_path / "c.json", steps=2)
    code = cli.run(["train", "--config", cfg, "--data", str(dataset), "--out", str(tmp_path / "run")])
    assert code == cli.EXIT_NAN
    err = capsys.readouterr().err
    assert "skeleton" in err and "heatmap" in err
    assert (tmp_path / "run" / "nan_dump.vkpw").exists()


def test_cli_generate_matches_module(tmp_path):
    cfg = _write_cfg(tmp_path / "c.json")
    assert cli.run(["generate", "--config", cfg, "--out", str(tmp_path / "g")]) == 0
    scenes = load_dataset(tmp_path / "g")
    assert scenes == load_dataset(cli.cmd_generate(_tiny(), tmp_path / "m")[0].parent)
