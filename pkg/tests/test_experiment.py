import csv
import json

import numpy as np
import pytest

from semaug import experiment as ex
from semaug.config import Config
from semaug.metrics import harmonic_mean, overlap_coefficient, routing_accuracy

TINY = {
    "seed": 4,
    "data": {"n_train": 8, "n_eval": 6, "n_calib": 6},
    "train": {"pretrain_epochs": 2, "peft_epochs": 2},
    "router": {"epochs": 2},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = Config.from_dict(TINY)
    return cfg, ex.run_experiment(cfg, out), out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_report_schema(run):
    cfg, report, out = run
    assert set(report) >= {"seed", "config", "map_tgt", "map_general", "h", "routing", "arms",
                           "curves"}
    assert set(report["routing"]) >= {"tau", "accuracy", "overlap_sar", "overlap_ddas"}
    assert set(report["arms"]) == set(ex.ARMS)
    assert report["config"] == cfg.to_dict()
    for ref in report["curves"].values():
        assert (out / ref).exists()
    assert json.loads((out / "report.json").read_text()) == report


def test_h_consistent(run):
    _, report, _ = run
    assert abs(report["h"] - harmonic_mean(report["map_tgt"], report["map_general"])) <= 1e-9
    for arm in report["arms"].values():
        assert abs(arm["h"] - harmonic_mean(arm["map_tgt"], arm["map_general"])) <= 1e-9


def test_routing_recomputable_from_traces(run):
    _, report, out = run
    rows = _rows(out / "router_errors.csv")
    e_in = {k: np.array([float(r[f"d_err_{k}"]) for r in rows if r["domain"] == "vertical"])
            for k in ("sar", "ddas")}
    e_out = {k: np.array([float(r[f"d_err_{k}"]) for r in rows if r["domain"] == "general"])
             for k in ("sar", "ddas")}
    rt = report["routing"]
    assert routing_accuracy(e_in["sar"], e_out["sar"], rt["tau"]) == pytest.approx(rt["accuracy"], abs=1e-12)
    assert overlap_coefficient(e_in["sar"], e_out["sar"]) == pytest.approx(rt["overlap_sar"], abs=1e-12)
    assert overlap_coefficient(e_in["ddas"], e_out["ddas"]) == pytest.approx(rt["overlap_ddas"], abs=1e-12)
    decided = [r["decision"] == "augmented" for r in rows]
    assert decided == [float(r["d_err_sar"]) < rt["tau"] for r in rows]


def test_trace_columns(run):
    _, _, out = run
    for kind in ("sar", "ddas"):
        rows = _rows(out / f"router_trace_{kind}.csv")
        assert list(rows[0]) == ["sample_id", "domain_label", "d_err", "decision"]
        assert {r["domain_label"] for r in rows} == {"vertical", "general"}
    loss = _rows(out / "loss_curves.csv")
    assert list(loss[0])[:2] == ["epoch", "phase"]
    assert {r["phase"] for r in loss} == {"pretrain", "peft", "router_sar", "router_ddas"}


def test_base_hash_reported(run):
    _, report, out = run
    from semaug.checkpoint import load_model

    model, adapters, _ = load_model(out / "peft.ckpt")
    assert model.parameter_hash() == report["base_hash"]
    assert adapters is not None


def test_deterministic(run, tmp_path):
    cfg, _, out = run
    ex.run_experiment(cfg, tmp_path)
    for name in ("report.json", "base.ckpt", "peft.ckpt", "router_sar.ckpt", "router_ddas.ckpt",
                 "router_errors.csv", "loss_curves.csv"):
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_phase_errors_are_tagged(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise ValueError("synthetic failure")

    monkeypatch.setattr(ex, "peft_finetune", boom)
    cfg = Config.from_dict({**TINY, "train": {"pretrain_epochs": 1, "peft_epochs": 1}})
    with pytest.raises(ex.PhaseError) as exc:
        ex.run_experiment(cfg, tmp_path)
    assert exc.value.phase == "peft"
    assert str(exc.value) == "[peft] ValueError: synthetic failure"


def test_histogram_csv():
    # binary-exact values so the middle edge sits exactly on 0.75
    text = ex.histogram_csv({"sar": (np.array([0.25, 0.25, 0.75]), np.array([0.75, 1.25, 1.25]))}, 2)
    rows = list(csv.DictReader(text.splitlines()))
    assert [float(r["p_vertical"]) for r in rows] == pytest.approx([2 / 3, 1 / 3])
    assert [float(r["p_general"]) for r in rows] == pytest.approx([0.0, 1.0])
