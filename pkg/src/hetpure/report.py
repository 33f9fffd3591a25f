"""Aggregate ``metrics.csv`` files into a summary table and plots."""
from __future__ import annotations

import csv
import math
from pathlib import Path

from hetpure.purifier import expected_calls

NUMERIC = ("standard_acc", "robust_acc", "feat_dist_clean", "feat_dist_adv", "denoiser_calls_mean", "wall_seconds")
GROUP = ("mode", "eps", "norm", "t_l", "t_s", "tau", "U", "S")
REQUIRED = ("run_id", "mode", "standard_acc")


class ReportError(ValueError):
    pass


def read_metrics(path: Path) -> list[dict]:
    """Parse one metrics file; malformed rows raise with their line number."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ReportError(f"{path}: empty file") from None
        missing = [c for c in REQUIRED if c not in header]
        if missing:
            raise ReportError(f"{path}:1: missing columns {missing}")
        for rec in reader:
            lineno = reader.line_num
            if not rec:
                continue
            if len(rec) != len(header):
                raise ReportError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            row = dict(zip(header, rec))
            for k in NUMERIC:
                if row.get(k):
                    try:
                        row[k] = float(row[k])
                    except ValueError:
                        raise ReportError(f"{path}:{lineno}: column {k} is not a number: {row[k]!r}") from None
                else:
                    row[k] = None
            for k in ("standard_acc", "robust_acc"):
                if row[k] is not None and not 0.0 <= row[k] <= 1.0:
                    raise ReportError(f"{path}:{lineno}: {k} = {row[k]} outside [0, 1]")
            rows.append(row)
    return rows


def collect(root: Path) -> list[dict]:
    root = Path(root)
    files = [root] if root.is_file() else sorted(root.rglob("metrics.csv"))
    if not files:
        raise ReportError(f"no metrics.csv under {root}")
    out = []
    for f in files:
        for r in read_metrics(f):
            r["source"] = str(f)
            out.append(r)
    return out


def mean_std(vals: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof = 1; zero for a single value)."""
    m = sum(vals) / len(vals)
    if len(vals) < 2:
        return m, 0.0
    return m, math.sqrt(sum((v - m) ** 2 for v in vals) / (len(vals) - 1))


def aggregate(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r.get(k, "") for k in GROUP), []).append(r)
    out = []
    for key, members in groups.items():
        rec = dict(zip(GROUP, key))
        rec["runs"] = len(members)
        for k in NUMERIC:
            vals = [m[k] for m in members if m.get(k) is not None]
            if vals:
                rec[f"{k}_mean"], rec[f"{k}_std"] = mean_std(vals)
            else:
                rec[f"{k}_mean"] = rec[f"{k}_std"] = None
        out.append(rec)
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_summary(summary: list[dict], path: Path) -> None:
    cols = [*GROUP, "runs"] + [f"{k}_{s}" for k in NUMERIC for s in ("mean", "std")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rec in summary:
            w.writerow([_fmt(rec.get(c)) for c in cols])


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_accuracy_bars(summary, path: Path) -> None:
    plt = _plt()
    recs = [r for r in summary if r["mode"] in ("undefended", "hetero", "homog_ts", "homog_tl")]
    if not recs:
        return
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = range(len(recs))
    w = 0.38
    ax.bar([i - w / 2 for i in xs], [r["standard_acc_mean"] for r in recs], w,
           yerr=[r["standard_acc_std"] for r in recs], label="standard")
    if any(r["robust_acc_mean"] is not None for r in recs):
        ax.bar([i + w / 2 for i in xs], [r["robust_acc_mean"] or 0.0 for r in recs], w,
               yerr=[r["robust_acc_std"] or 0.0 for r in recs], label="robust")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([r["mode"] for r in recs])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_tau_curve(summary, path: Path) -> bool:
    recs = sorted((r for r in summary if r["mode"] == "sweep_tau"), key=lambda r: float(r["tau"]))
    if not recs:
        return False
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    taus = [float(r["tau"]) for r in recs]
    ax.errorbar(taus, [r["standard_acc_mean"] for r in recs], yerr=[r["standard_acc_std"] for r in recs],
                marker="o", label="standard")
    if all(r["robust_acc_mean"] is not None for r in recs):
        ax.errorbar(taus, [r["robust_acc_mean"] for r in recs], yerr=[r["robust_acc_std"] for r in recs],
                    marker="s", label="robust")
    ax.set_xlabel("tau")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def plot_pair_heatmap(summary, path: Path) -> bool:
    recs = [r for r in summary if r["mode"] == "sweep_pair"]
    if not recs:
        return False
    plt = _plt()
    metric = "robust_acc_mean" if all(r["robust_acc_mean"] is not None for r in recs) else "standard_acc_mean"
    tls = sorted({int(r["t_l"]) for r in recs})
    tss = sorted({int(r["t_s"]) for r in recs})
    grid = [[float("nan")] * len(tls) for _ in tss]
    for r in recs:
        grid[tss.index(int(r["t_s"]))][tls.index(int(r["t_l"]))] = r[metric]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    im = ax.imshow(grid, origin="lower", vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(tls)))
    ax.set_xticklabels(tls)
    ax.set_yticks(range(len(tss)))
    ax.set_yticklabels(tss)
    ax.set_xlabel("t_l")
    ax.set_ylabel("t_s")
    ax.set_title(metric.replace("_mean", ""))
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def call_comparison(U: int = 20, t_l: int = 200, t_s: int = 50) -> dict:
    single = expected_calls(t_l, t_s, U)
    legacy = expected_calls(t_l, t_s, U, legacy=True)
    return {"U": U, "t_l": t_l, "t_s": t_s, "single_step": single, "legacy": legacy, "reduction": 1 - single / legacy}


def plot_calls(path: Path, U: int = 20, t_l: int = 200, t_s: int = 50) -> dict:
    plt = _plt()
    cmp = call_comparison(U, t_l, t_s)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar(["legacy multi-step", "single-step"], [cmp["legacy"], cmp["single_step"]], color=["tab:gray", "tab:blue"])
    ax.set_ylabel("denoiser calls per image")
    ax.set_title(f"U={U}, t_l={t_l}, t_s={t_s}: {100 * cmp['reduction']:.1f}% fewer calls")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return cmp


def report(metrics_dir: str | Path, out_dir: str | Path | None = None, plots: bool = True) -> list[dict]:
    """Write ``summary.csv`` (mean and std over repeats) and the plot files."""
    metrics_dir = Path(metrics_dir)
    out = Path(out_dir) if out_dir else (metrics_dir if metrics_dir.is_dir() else metrics_dir.parent)
    out.mkdir(parents=True, exist_ok=True)
    summary = aggregate(collect(metrics_dir))
    write_summary(summary, out / "summary.csv")
    if plots:
        plot_accuracy_bars(summary, out / "accuracy.png")
        plot_tau_curve(summary, out / "tau_curve.png")
        plot_pair_heatmap(summary, out / "tl_ts_heatmap.png")
        cmp = plot_calls(out / "calls.png")
        with open(out / "calls.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(cmp))
            w.writerow([_fmt(v) for v in cmp.values()])
    return summary
