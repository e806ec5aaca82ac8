import json

import numpy as np

from pood_backdoor.report import build_report, metrics_table, plot_pruning, plot_strip


def test_metrics_table_formats_floats_and_extras():
    table = metrics_table([{"label": "a", "acc": 97.0, "asr": 12.345, "extra": {"value": 0.01}}], ("label", "acc", "asr", "value"))
    lines = table.splitlines()
    assert lines[0] == "| label | acc | asr | value |"
    assert lines[2] == "| a | 97.00 | 12.35 | 0.01 |"


def test_plots_are_byte_reproducible(tmp_path):
    curve = [{"rate": 0.0, "acc": 90.0, "asr": 80.0}, {"rate": 0.5, "acc": 70.0, "asr": 75.0}]
    a = plot_pruning(curve, tmp_path / "a.png").read_bytes()
    b = plot_pruning(curve, tmp_path / "b.png").read_bytes()
    assert a == b and a[:8] == b"\x89PNG\r\n\x1a\n"
    plot_strip({"clean": np.linspace(0, 1, 20), "triggered": np.zeros(20)}, tmp_path / "s.png")


def test_build_report_from_sweep_records(tmp_path):
    rows = [{"label": f"poison_ratio={v}", "acc": 95.0, "tar_acc": 90.0, "asr": 10.0 * i, "config_hash": "h",
             "extra": {"axis": "poison_ratio", "value": v}} for i, v in enumerate([0.0, 0.01])]
    src = tmp_path / "sweep.jsonl"
    src.write_text("".join(json.dumps(r) + "\n" for r in rows))
    path = build_report([src], tmp_path / "out")
    text = path.read_text()
    assert "poison_ratio=0.01" in text and "![sweep](sweep.png)" in text
    assert (tmp_path / "out" / "sweep.png").exists()
