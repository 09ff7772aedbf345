"""Run reports: loss/mIoU curves as PNG files plus an ablation table.

Consumes the line-delimited logs written by the trainer (metrics.csv,
eval.csv) from one or more run directories.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError

LOSS_KEYS = ("total", "l_cls", "l_c2s", "l_s2c", "l_aff")


def load_metrics(run_dir) -> dict[str, list[float]]:
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        raise DataError(f"missing metrics log: {path}")
    cols: dict[str, list[float]] = {}
    with open(path) as f:
        for row in csv.DictReader(f):
            for k, v in row.items():
                cols.setdefault(k, []).append(float(v))
    return cols


def load_eval(run_dir) -> list[dict]:
    path = Path(run_dir) / "eval.csv"
    if not path.exists():
        raise DataError(f"missing eval log: {path}")
    with open(path) as f:
        return [{"iteration": int(r["iteration"]), "branch": r["branch"],
                 "miou": float(r["miou"])} for r in csv.DictReader(f)]


def final_mious(run_dir) -> dict[str, float]:
    """Last logged mIoU per branch."""
    out: dict[str, float] = {}
    for row in load_eval(run_dir):
        out[row["branch"]] = row["miou"]
    return out


def render_curves(run_dirs, out_dir) -> list[Path]:
    """Loss and branch-mIoU curves across runs, one PNG each."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for rd in run_dirs:
        cols = load_metrics(rd)
        name = Path(rd).name
        ax.plot(cols["iteration"], cols["total"], label=f"{name} total", lw=1.2)
        ax.plot(cols["iteration"], cols["l_cls"], label=f"{name} cls", lw=0.8, alpha=0.7)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    p = out_dir / "losses.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    written.append(p)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for rd in run_dirs:
        name = Path(rd).name
        rows = load_eval(rd)
        for branch, style in (("seed", "--"), ("seg", "-")):
            xs = [r["iteration"] for r in rows if r["branch"] == branch]
            ys = [100 * r["miou"] for r in rows if r["branch"] == branch]
            if xs:
                ax.plot(xs, ys, style, label=f"{name} {branch}", lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mIoU (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    p = out_dir / "miou.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    written.append(p)
    return written


def ablation_table(run_dirs, out_dir) -> Path:
    """One row per run: final seed mIoU and seg mIoU, as CSV and text table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for rd in run_dirs:
        m = final_mious(rd)
        rows.append((Path(rd).name, m.get("seed", float("nan")), m.get("seg", float("nan"))))
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "seed_miou", "seg_miou"])
        for name, a, b in rows:
            w.writerow([name, f"{a:.6f}", f"{b:.6f}"])
    width = max([len("run")] + [len(r[0]) for r in rows])
    lines = [f"{'run':<{width}}  seed mIoU  seg mIoU",
             "-" * (width + 21)]
    for name, a, b in rows:
        lines.append(f"{name:<{width}}  {100 * a:>8.2f}%  {100 * b:>7.2f}%")
    (out_dir / "ablation.txt").write_text("\n".join(lines) + "\n")
    return csv_path
