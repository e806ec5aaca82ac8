"""Tables and figures from run manifests, sweep records and defense outputs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# PNG metadata would otherwise carry the matplotlib version string
_SAVE = {"dpi": 110, "metadata": {"Software": None}, "bbox_inches": "tight"}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_neural_cleanse(record: dict, path: str | Path, masks: np.ndarray | None = None, class_names=None) -> Path:
    l1 = np.asarray(record["l1"])
    anomaly = np.asarray(record["anomaly_index"])
    names = list(class_names) if class_names is not None else [str(i) for i in range(len(l1))]
    ncols = 1 + (0 if masks is None else len(masks))
    fig, axes = plt.subplots(1, ncols, figsize=(4 + 1.4 * (ncols - 1), 3), squeeze=False)
    ax = axes[0, 0]
    ax.bar(names, l1, color="tab:gray")
    for i, (v, a) in enumerate(zip(l1, anomaly)):
        ax.text(i, v, f"{a:.2f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("mask l1 (anomaly index on top)")
    ax.tick_params(axis="x", rotation=45)
    if masks is not None:
        for i, m in enumerate(masks):
            a = axes[0, i + 1]
            a.imshow(np.squeeze(m), cmap="gray", vmin=0, vmax=1)
            a.set_title(names[i], fontsize=8)
            a.axis("off")
    return _save(fig, path)


def plot_strip(entropies: dict[str, Sequence[float]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    hi = max((max(v) for v in entropies.values() if len(v)), default=1.0)
    bins = np.linspace(0, max(hi, 1e-3), 30)
    for name, values in entropies.items():
        ax.hist(values, bins=bins, alpha=0.55, label=f"{name} (mean {np.mean(values):.3f})")
    ax.set_xlabel("mean prediction entropy (nats)")
    ax.set_ylabel("probes")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_pruning(curve: list[dict], path: str | Path) -> Path:
    rates = [r["rate"] for r in curve]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(rates, [r["acc"] for r in curve], "o-", label="clean ACC")
    ax.plot(rates, [r["asr"] for r in curve], "s-", label="ASR")
    ax.set_xlabel("fraction of channels pruned")
    ax.set_ylabel("%")
    ax.set_ylim(-2, 102)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_heatmaps(images: np.ndarray, heatmaps: np.ndarray, path: str | Path, titles: Sequence[str] | None = None) -> Path:
    n = len(images)
    fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.4), squeeze=False)
    for i in range(n):
        axes[0, i].imshow(np.clip(images[i], 0, 1))
        axes[1, i].imshow(np.clip(images[i], 0, 1))
        axes[1, i].imshow(heatmaps[i], cmap="jet", alpha=0.5, vmin=0, vmax=1)
        if titles is not None:
            axes[0, i].set_title(titles[i], fontsize=7)
        axes[0, i].axis("off")
        axes[1, i].axis("off")
    return _save(fig, path)


def plot_sweep(records: list[dict], axis: str, path: str | Path) -> Path:
    values = [r["extra"]["value"] for r in records]
    xs = np.arange(len(values))
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(xs, [r["acc"] for r in records], "o-", label="ACC")
    ax.plot(xs, [r["asr"] for r in records], "s-", label="ASR")
    ax.set_xticks(xs, [str(v) for v in values], rotation=30)
    ax.set_xlabel(axis)
    ax.set_ylabel("%")
    ax.set_ylim(-2, 102)
    ax.legend(fontsize=8)
    return _save(fig, path)


def metrics_table(records: Iterable[dict], columns: Sequence[str] = ("label", "acc", "tar_acc", "asr")) -> str:
    """Markdown table; floats get two decimals."""
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in records:
        cells = []
        for c in columns:
            v = r.get(c, r.get("extra", {}).get(c, ""))
            cells.append(f"{v:.2f}" if isinstance(v, float) else str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def _read_records(path: Path) -> tuple[str, list[dict]]:
    """A sweep/ablation ``.jsonl`` (one report per line) or a run manifest ``.json``."""
    if path.suffix == ".jsonl":
        return path.stem, [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    doc = json.loads(path.read_text())
    if "metrics" not in doc:
        raise ValueError(f"{path}: not a run manifest or sweep record file")
    metrics = doc["metrics"].get("evaluate")
    if metrics is None:
        return path.stem, []
    return path.stem, [{**metrics, "label": metrics.get("label") or path.stem}]


def build_report(inputs: Sequence[str | Path], out_dir: str | Path) -> Path:
    """Collect records from ``inputs`` into ``out_dir/report.md`` with one plot per sweep file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sections = ["# Results", ""]
    singles = []
    for p in map(Path, inputs):
        name, records = _read_records(p)
        if p.suffix == ".jsonl" and records:
            axis = records[0].get("extra", {}).get("axis", name)
            plot = plot_sweep(records, axis, out_dir / f"{name}.png")
            cols = ("label", "acc", "tar_acc", "asr", "config_hash")
            sections += [f"## {name}", "", metrics_table(records, cols), "", f"![{name}]({plot.name})", ""]
        else:
            singles.extend(records)
    if singles:
        sections += ["## Runs", "", metrics_table(singles, ("label", "acc", "tar_acc", "asr", "config_hash")), ""]
    path = out_dir / "report.md"
    path.write_text("\n".join(sections))
    return path
