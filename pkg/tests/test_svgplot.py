"""SVG output structure tests."""

import json

import numpy as np
import pytest

from pieplan.svgplot import plot_bev, plot_loss_curves, plot_score_histogram


def test_loss_curves(tmp_path):
    metrics = tmp_path / "metrics.jsonl"
    rows = [{"epoch": i, "train_loss": 2.0 / (i + 1), "parts": {},
             "val_pdms": 0.5 + 0.01 * i if i % 2 == 0 else None,
             "wall_time": float(i)} for i in range(10)]
    metrics.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    out = tmp_path / "loss.svg"
    plot_loss_curves(metrics, out)
    text = out.read_text()
    assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
    assert "train loss" in text
    assert "polyline" in text


def test_loss_curves_empty_rejected(tmp_path):
    metrics = tmp_path / "metrics.jsonl"
    metrics.write_text("")
    with pytest.raises(ValueError, match="no epoch"):
        plot_loss_curves(metrics, tmp_path / "x.svg")


def test_score_histogram(tmp_path):
    csv = tmp_path / "report.csv"
    header = "scenario_id,nc,dac,ep,ttc,c,hc,lk,ec,ddc,tlc,pdms,epdms"
    rows = [f"s{i},1,1,0.5,1,1,1,1,1,1,1,{0.05 * i},{0.04 * i}" for i in range(20)]
    csv.write_text(header + "\n" + "\n".join(rows) + "\n")
    out = tmp_path / "hist.svg"
    plot_score_histogram(csv, out, column="pdms")
    text = out.read_text()
    assert "pdms over 20 scenarios" in text
    assert text.count("<rect") > 3


def test_bev_snapshot(tmp_path, small_scenarios):
    s = small_scenarios[0]
    out = tmp_path / "bev.svg"
    planned = s.expert.points + 0.5
    plot_bev(s, out, planned=planned)
    text = out.read_text()
    assert "<polygon" in text  # road and agents
    assert text.count("<polyline") >= 2  # expert and planned
    assert s.id in text
