"""Smoke test for the gdflow Python bindings.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import json
import math
import tempfile
from pathlib import Path

import gdflow_py as g


def check_metrics():
    a = g.PointCloud([[0.0, 0.0, 0.0]])
    b = g.PointCloud([[1.0, 0.0, 0.0]])
    assert g.chamfer(a, b) == 2.0
    assert g.hausdorff(a, b) == 1.0
    assert g.rmsd(a, b) == 1.0
    assert g.emd(a, b) == 1.0
    r = g.evaluate(a, b, "cd,hd")
    assert r["cd"] == 2.0 and r["emd"] is None and r["n_ref"] == 1


def check_tensor():
    x = g.Tensor([1.0, 2.0, 3.0], [3], requires_grad=True)
    y = x.square().sum()
    (gx,) = y.grad([x])
    assert gx == [2.0, 4.0, 6.0], gx


def check_filters():
    grid = [i / 10 for i in range(11)]
    resp = g.bernstein_response([0.3, 0.3, 0.3], grid)
    assert all(abs(v - resp[0]) < 1e-12 and v <= 1.0 for v in resp)
    assert g.filter_response("ppr", [1.0], grid) == [1.0] * 11
    try:
        g.filter_response("ppr", [0.0], grid)
    except ValueError:
        pass
    else:
        raise AssertionError("ppr theta=0 must be rejected")


def check_model():
    cfg = json.loads(g.default_config())
    cfg["model"].update(d=2, d_h=4, K=2, k=4, heads=1, key_dim=2, lift_hidden=8)
    model = g.Model.init(json.dumps(cfg["model"]), seed=1)
    clean = g.PointCloud.synth("sphere", 64, seed=2)
    noisy = clean.add_noise(0.02, seed=3)
    out = model.denoise(noisy)
    assert out.points() == noisy.points()  # zero readout at init
    snaps = model.denoise(noisy, snapshots=[0.5, 1.0])
    assert len(snaps) == 2 and snaps[1].points() == out.points()

    cfg["train"].update(iterations=2, batch_size=2, patch_size=48, val_every=1)
    result = g.train(json.dumps(cfg), [clean, g.PointCloud.synth("torus", 64, seed=4)], [clean])
    assert result["best_val_cd"] <= result["initial_val_cd"]
    with tempfile.TemporaryDirectory() as d:
        result["model"].save(Path(d) / "ckpt")
        again = g.Model.load(Path(d) / "ckpt")
        assert again.denoise(noisy).points() == result["model"].denoise(noisy).points()
        noisy.save(Path(d) / "n.xyz")
        assert len(g.PointCloud.load(Path(d) / "n.xyz")) == 64


def check_selftest():
    ok, report = g.run_selftest()
    assert ok, report
    ok, report = g.run_selftest("matmul")
    assert not ok and "matmul" in report


if __name__ == "__main__":
    for check in (check_metrics, check_tensor, check_filters, check_model, check_selftest):
        check()
        print(f"{check.__name__}: ok")
    assert math.isfinite(g.chamfer(g.PointCloud.synth("cube", 32), g.PointCloud.synth("cube", 32, seed=1)))
    print("all python smoke checks passed")
