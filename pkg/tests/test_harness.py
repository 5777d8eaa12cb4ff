from __future__ import annotations

import json
import math

import numpy as np
import pytest

from fiowave.cli import main
from fiowave.harness import (
    DegenerateProbeError,
    ExperimentConfig,
    UnknownExperimentError,
    flat_wave_loss,
    knapp_probe,
    probe_operator_norm,
    run_experiment,
    slope_fit,
    synth_coefficients,
)
from fiowave.spectral_core import Field, Grid
from fiowave.symbols import CLASS_TAGS, Symbol, estimate_seminorm
from fiowave.wavepacket import build_frame


def _bracket(g):
    return np.sqrt(1.0 + g.abs_freq**2)


# ---------------------------------------------------------------------------
# coefficient synthesis


def test_synth_smooth_flag():
    g = Grid(32)
    c = synth_coefficients(math.inf, 0.5, seed=1, grid=g)
    assert np.ptp(c.aij, axis=(2, 3)).max() == 0
    assert c.measured_kappa >= 0.5 - 1e-12


def test_synth_ellipticity_and_symmetry():
    g = Grid(64)
    c = synth_coefficients(2.5, 0.7, seed=4, grid=g)
    assert c.measured_kappa >= 0.7 - 1e-12
    assert np.array_equal(c.aij, np.swapaxes(c.aij, 0, 1))
    assert c.self_adjoint


def test_synth_zygmund_verdict():
    g = Grid(128)
    c = synth_coefficients(2.5, 0.5, seed=0, grid=g)
    a = Symbol.separable(g, [c.aij[0, 0]], [_bracket(g)], m=1, r=2.5, tag=CLASS_TAGS[1])
    rep = estimate_seminorm(a, l=1, orders=[2.5, 2.7])
    assert rep.verdict
    assert abs(rep.scale_slopes["Czyg s=2.5,a=(0, 0)"]) < 0.15
    assert rep.scale_slopes["Czyg s=2.7,a=(0, 0)"] >= 0.15


def test_synth_determinism():
    g = Grid(32)
    a = synth_coefficients(2.5, 0.5, seed=11, grid=g)
    b = synth_coefficients(2.5, 0.5, seed=11, grid=g)
    assert a.aij.tobytes() == b.aij.tobytes()
    assert a.a0.tobytes() == b.a0.tobytes()
    c = synth_coefficients(2.5, 0.5, seed=12, grid=g)
    assert a.aij.tobytes() != c.aij.tobytes()


def test_synth_rejects_bad_input():
    with pytest.raises(ValueError):
        synth_coefficients(0.0, 0.5)
    with pytest.raises(ValueError):
        synth_coefficients(2.5, -1.0)


# ---------------------------------------------------------------------------
# probes


def test_identity_probe_ratios():
    g = Grid(64)
    fr = build_frame(g, 3)
    for kind in ("random", "packets", "knapp"):
        rep = probe_operator_norm(lambda f: f, 0.0, 2.0, fr, probes=kind, space="classical")
        assert all(r["ratio"] == pytest.approx(1.0, abs=1e-14) for r in rep.rows)
    rep = probe_operator_norm(lambda f: f, 0.0, 1.0, fr, probes="packets")
    assert all(r["ratio"] == pytest.approx(1.0, abs=1e-14) for r in rep.rows)
    assert rep.summary["two_s_p"] == pytest.approx(0.5)


def test_probe_errors(monkeypatch):
    import fiowave.harness as h

    g = Grid(32)
    fr = build_frame(g, 3)
    with pytest.raises(ValueError):
        probe_operator_norm(lambda f: f, 0.0, 2.0, fr, trials=4)
    monkeypatch.setattr(h, "packet_probe", lambda grid, j, direction=(1.0, 0.0): Field.zeros(grid))
    with pytest.raises(DegenerateProbeError):
        probe_operator_norm(lambda f: f, 0.0, 2.0, fr, probes="packets", space="classical")


def test_knapp_probe_localization():
    g = Grid(128)
    f = knapp_probe(g, 4)
    h = np.abs(f.hat)
    k1, _ = g.freqs
    assert k1.ravel()[h.argmax()] == 16
    assert np.sum(h[k1 < 0] ** 2) < 1e-6 * np.sum(h**2)


def test_slope_fit():
    x = np.arange(4)
    fit = slope_fit(x, 2.0 ** (0.5 * x + 1))
    assert fit["slope"] == pytest.approx(0.5) and fit["r2"] == pytest.approx(1.0)
    assert fit["halfwidth"] == pytest.approx(0.0, abs=1e-12)


def test_flat_wave_loss_contrast():
    rep = flat_wave_loss(N=256, t=1.0, scales=range(3, 7))
    cl = rep.summary["classical_fit"]["slope"]
    fio = rep.summary["fio_fit"]["slope"]
    assert abs(cl - 0.5) <= 0.15
    assert fio <= 0.15
    assert rep.passed


# ---------------------------------------------------------------------------
# experiments and reports


def test_config_validation():
    with pytest.raises(UnknownExperimentError):
        ExperimentConfig("nope")
    with pytest.raises(ValueError):
        ExperimentConfig("frame-validation", N=64, J=5)
    cfg = ExperimentConfig("frame-validation", p=math.inf)
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg


def test_frame_validation_experiment(tmp_path):
    cfg = ExperimentConfig("frame-validation", N=64, J=3, seed=3, out=str(tmp_path / "a"))
    rep = run_experiment(cfg)
    assert rep.passed and rep.summary["tightness"] <= 1e-13
    assert rep.summary["thresholds"]["tightness"] == 1e-13
    csv1 = (tmp_path / "a" / "frame-validation.csv").read_text()
    rep2 = run_experiment(ExperimentConfig("frame-validation", N=64, J=3, seed=3, out=str(tmp_path / "b")))
    assert (tmp_path / "b" / "frame-validation.csv").read_text() == csv1
    assert rep2.run_id == rep.run_id
    head = csv1.splitlines()[0].split(",")
    assert head[:2] == ["run_id", "seed"]
    js = json.loads((tmp_path / "a" / "frame-validation.json").read_text())
    assert js["passed"] is True and js["summary"]["config"]["seed"] == 3


def test_embedding_and_pseudo_experiments():
    rep = run_experiment(ExperimentConfig("embedding-study", N=128, J=5, p=1.0))
    assert rep.passed
    rep = run_experiment(ExperimentConfig("pseudo-loss", N=128, J=5, p=1.0, r=0.6))
    assert rep.passed
    assert "threshold_slope" in rep.summary


def test_spectral_compare_experiment():
    rep = run_experiment(ExperimentConfig("spectral-compare", N=128, J=5, p=1.0))
    assert rep.passed
    assert rep.summary["per_t"]["0.5"]["max_relative_deviation"] <= 0.5


# ---------------------------------------------------------------------------
# cli


def test_cli_unknown(capsys):
    assert main(["bogus"]) == 2
    assert "error" in json.loads(capsys.readouterr().out)


def test_cli_invalid_experiment(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"name": "nope"}))
    assert main(["frame", "--config", str(cfg)]) == 2
    assert "error" in json.loads(capsys.readouterr().out)


def test_cli_frame(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["frame", "--grid", "64", "--depth", "3", "--seed", "2", "--out", str(out)]) == 0
    js = json.loads(capsys.readouterr().out)
    assert js["passed"] and js["summary"]["config"]["N"] == 64
    assert (out / "frame-validation.csv").exists()
