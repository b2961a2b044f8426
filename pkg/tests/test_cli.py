import json
import re

import numpy as np
import pytest

from xdcnn import cli, gradcheck, hsdata, sampler, traineval, xnet

SMALL = ["--size", "24x24", "--blobs", "12", "--per-class", "10"]


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A small synthetic experiment with a cross-domain and an individual checkpoint."""
    root = tmp_path_factory.mktemp("exp")
    data = root / "data"
    assert cli.main(["synth", "--out", str(data), "--seed", "1", *SMALL]) == 0
    cfg = data / "config.json"
    assert cli.main(["train", "--config", str(cfg), "--iters", "60", "--out", str(root / "cross.xdnc"),
                     "--log", str(root / "cross.csv")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--iters", "60", "--individual", "synth1",
                     "--out", str(root / "ind1.xdnc")]) == 0
    return root, cfg


# --- synth -----------------------------------------------------------------------


def test_synth_defaults(tmp_path, capsys):
    code, _, _ = run(["synth", "--out", str(tmp_path)], capsys)
    assert code == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert [d["name"] for d in cfg["domains"]] == ["synth0", "synth1", "synth2"]
    assert cfg["train"] == {"iterations": 5000, "lr_step": 2000, "seed": 0}
    bands = [hsdata.load_cube(tmp_path / d["cube_path"])[0].bands for d in cfg["domains"]]
    assert bands == [20, 24, 12]
    for d in cfg["domains"]:
        labels = hsdata.load_labels(tmp_path / d["labels_path"])
        assert (labels.height, labels.width) == (64, 64) and len(labels.class_names) == 4
        split = sampler.load_split(tmp_path / d["split_path"])
        assert split.n_train == 4 * 20


def test_synth_single_domain(tmp_path, capsys):
    assert run(["synth", "--out", str(tmp_path), "--domains", "1", *SMALL], capsys)[0] == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert len(cfg["domains"]) == 1


def test_synth_deterministic_bytes(tmp_path, capsys):
    for sub in ("a", "b"):
        assert run(["synth", "--out", str(tmp_path / sub), "--seed", "7", *SMALL], capsys)[0] == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 3 * 5 + 1
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("extra", [["--bands", "20,24"], ["--domains", "0"], ["--noise", "-1"]])
def test_synth_invalid_args(tmp_path, capsys, extra):
    assert run(["synth", "--out", str(tmp_path), *extra], capsys)[0] == 2


def test_synth_unparseable_size(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["synth", "--out", str(tmp_path), "--size", "big"])
    assert exc.value.code == 2


def test_synth_io_failure(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["synth", "--out", str(blocker / "sub"), *SMALL], capsys)[0] == 3


# --- train -----------------------------------------------------------------------


def test_train_outputs(trained):
    root, _ = trained
    hist = traineval.read_history(root / "cross.csv")
    assert len(hist.rows) == 3 * (60 // 20)
    net = xnet.load_checkpoint(root / "cross.xdnc")
    assert [s.name for s in net.domain_specs] == ["synth0", "synth1", "synth2"]
    assert (root / "ind1.csv").exists()
    assert [s.name for s in xnet.load_checkpoint(root / "ind1.xdnc").domain_specs] == ["synth1"]


def test_train_prints_final_losses(trained, capsys):
    root, cfg = trained
    code, out, _ = run(["train", "--config", str(cfg), "--iters", "3", "--out", str(root / "t.xdnc")], capsys)
    assert code == 0
    assert len(re.findall(r"synth\d: final training loss \d+\.\d{4}", out)) == 3


def test_train_zero_iterations_is_init(trained, capsys):
    root, cfg = trained
    assert run(["train", "--config", str(cfg), "--iters", "0", "--seed", "3", "--out", str(root / "init.xdnc")], capsys)[0] == 0
    saved = xnet.load_checkpoint(root / "init.xdnc")
    fresh = xnet.build(saved.domain_specs, seed=3, width=saved.width)
    for p, q in zip(xnet.trainable_params(saved), xnet.trainable_params(fresh)):
        assert p.data.tobytes() == q.data.tobytes()
    assert not traineval.bn_ready(saved)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_non_finite_exit(trained, tmp_path, capsys):
    _, cfg = trained
    raw = json.loads(cfg.read_text())
    raw["train"]["base_lr"] = 1e30
    for d in raw["domains"]:
        for k in ("cube_path", "labels_path", "split_path"):
            d[k] = str(cfg.parent / d[k])
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(raw))
    code, _, err = run(["train", "--config", str(bad), "--iters", "50", "--out", str(tmp_path / "x.xdnc")], capsys)
    assert code == 4
    assert "iteration" in err


def test_config_errors(tmp_path, capsys):
    assert run(["train", "--config", str(tmp_path / "missing.json")], capsys)[0] == 3
    (tmp_path / "c.json").write_text("{not json")
    assert run(["train", "--config", str(tmp_path / "c.json")], capsys)[0] == 3
    (tmp_path / "c.json").write_text(json.dumps({"domains": [], "bogus": 1}))
    assert run(["train", "--config", str(tmp_path / "c.json")], capsys)[0] == 2


def test_unknown_individual_domain(trained, capsys):
    _, cfg = trained
    assert run(["train", "--config", str(cfg), "--iters", "1", "--individual", "nope"], capsys)[0] == 2


# --- eval ------------------------------------------------------------------------


def test_eval_matches_report(trained, capsys):
    root, cfg = trained
    report = root / "r.json"
    code, out, _ = run(["eval", "--ckpt", str(root / "cross.xdnc"), "--config", str(cfg), "--report", str(report)], capsys)
    assert code == 0
    payload = json.loads(report.read_text())
    assert set(payload) == {"synth0", "synth1", "synth2"}
    for name, rep in payload.items():
        assert re.search(rf"^{name}\s+{rep['overall_accuracy']:.3f}$", out, re.M)


def test_eval_baseline_gain_column(trained, capsys):
    root, cfg = trained
    code, out, _ = run(["eval", "--ckpt", str(root / "cross.xdnc"), "--config", str(cfg),
                        "--domain", "synth1", "--baseline", str(root / "ind1.xdnc")], capsys)
    assert code == 0
    header, row = out.strip().splitlines()
    assert header.split() == ["Dataset", "Individual", "Cross-Domain", "Gain"]
    name, ind, cross, gain = row.split()
    assert name == "synth1"
    assert abs(float(gain) - (float(cross) - float(ind))) <= 0.0011


def test_eval_untrained_is_near_chance(trained, capsys):
    root, cfg = trained
    assert run(["train", "--config", str(cfg), "--iters", "0", "--out", str(root / "init2.xdnc")], capsys)[0] == 0
    report = root / "init.json"
    assert run(["eval", "--ckpt", str(root / "init2.xdnc"), "--config", str(cfg), "--report", str(report)], capsys)[0] == 0
    for rep in json.loads(report.read_text()).values():
        assert abs(rep["overall_accuracy"] - 0.25) <= 0.1


def test_eval_domain_mismatch(trained, tmp_path, capsys):
    root, cfg = trained
    other = xnet.build([hsdata.DomainSpec("elsewhere", 5, 5, ["a", "b"])], width=4)
    xnet.save_checkpoint(other, tmp_path / "o.xdnc")
    assert run(["eval", "--ckpt", str(tmp_path / "o.xdnc"), "--config", str(cfg)], capsys)[0] == 2
    # same name, wrong band count
    wrong = xnet.build([hsdata.DomainSpec("synth0", 7, 7, ["a", "b", "c", "d"])], width=4)
    xnet.save_checkpoint(wrong, tmp_path / "w.xdnc")
    assert run(["eval", "--ckpt", str(tmp_path / "w.xdnc"), "--config", str(cfg)], capsys)[0] == 2


def test_eval_corrupt_checkpoint(trained, tmp_path, capsys):
    root, cfg = trained
    (tmp_path / "t.xdnc").write_bytes((root / "cross.xdnc").read_bytes()[:100])
    assert run(["eval", "--ckpt", str(tmp_path / "t.xdnc"), "--config", str(cfg)], capsys)[0] == 3


# --- gradcheck -------------------------------------------------------------------


def test_gradcheck_single_seed(capsys):
    code, out, _ = run(["gradcheck", "--seed", "3", "--n-seeds", "1"], capsys)
    assert code == 0
    assert len(re.findall(r"max_rel_err=", out)) == 14


def test_gradcheck_failure_exit(monkeypatch, capsys):
    bad = gradcheck.GradcheckReport(0, {"relu": 0.5}, {"relu": 1e-4}, {"relu": 0})
    monkeypatch.setattr(gradcheck, "run_suite", lambda seed, n: [bad])
    code, out, _ = run(["gradcheck"], capsys)
    assert code == 5
    assert "FAIL" in out


# --- predict-map -----------------------------------------------------------------


def test_predict_map_files(trained, capsys):
    root, cfg = trained
    pgm, ppm = root / "m.pgm", root / "m.ppm"
    code, _, _ = run(["predict-map", "--ckpt", str(root / "cross.xdnc"), "--cube", str(cfg.parent / "synth2.json"),
                      "--domain", "synth2", "--out", str(pgm), "--ppm", str(ppm)], capsys)
    assert code == 0
    raw = pgm.read_bytes()
    assert raw.startswith(b"P5\n24 24\n255\n")
    assert ppm.read_bytes().startswith(b"P6\n24 24\n255\n")
    grid = np.frombuffer(raw[len(b"P5\n24 24\n255\n"):], dtype=np.uint8).reshape(24, 24)
    # interior agreement with patchwise predictions used by eval
    net = xnet.load_checkpoint(root / "cross.xdnc")
    cube, _ = hsdata.load_cube(cfg.parent / "synth2.json")
    coords = [(x, y) for y in range(2, 22) for x in range(2, 22)]
    patchwise = traineval.predict_pixels(net, 2, cube, coords) + 1
    agree = np.mean([grid[y, x] == p for (x, y), p in zip(coords, patchwise)])
    assert agree >= 0.999


def test_predict_map_band_mismatch(trained, capsys):
    root, cfg = trained
    code, _, _ = run(["predict-map", "--ckpt", str(root / "cross.xdnc"), "--cube", str(cfg.parent / "synth1.json"),
                      "--domain", "synth0", "--out", str(root / "x.pgm")], capsys)
    assert code == 2
