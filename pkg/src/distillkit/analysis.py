"""Post-hoc analyses: inter-class logit correlation discrepancy and the
comparison report emitted after a batch of runs.

Correlation matrices are Pearson correlations of logit columns over a
test split; the teacher-minus-student difference summarizes how much of
the teacher's inter-class structure the student picked up (the Frobenius
norm is the scalar summary). Report CSVs are byte-deterministic so
re-running on identical records reproduces identical files.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DegenerateError, ShapeError

# matplotlib is imported lazily with the Agg backend so report emission
# works headless.


@dataclass
class CorrelationDiff:
    matrix: np.ndarray
    frobenius: float

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ShapeError("correlation difference must be square")
        if np.abs(self.matrix - self.matrix.T).max() > 1e-9:
            raise ShapeError("correlation difference must be symmetric")
        if abs(self.frobenius - float(np.linalg.norm(self.matrix))) > 1e-9:
            raise ShapeError("frobenius field inconsistent with the matrix")


def logit_correlation(logits_over_testset) -> np.ndarray:
    """Pearson correlation matrix of logit columns, (classes, classes)."""
    z = np.asarray(logits_over_testset, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError("logits must be (samples, classes)")
    if z.shape[0] < 2:
        raise DegenerateError("need at least 2 samples")
    centered = z - z.mean(axis=0, keepdims=True)
    var = (centered * centered).mean(axis=0)
    if np.any(var <= 0):
        raise DegenerateError("zero-variance logit column")
    cov = centered.T @ centered / z.shape[0]
    denom = np.sqrt(np.outer(var, var))
    corr = cov / denom
    # exact unit diagonal despite rounding
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


def correlation_diff(teacher_corr, student_corr) -> CorrelationDiff:
    """teacher_corr - student_corr with its Frobenius norm."""
    t = np.asarray(teacher_corr, dtype=np.float64)
    s = np.asarray(student_corr, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeError(f"shape mismatch {t.shape} vs {s.shape}")
    d = t - s
    return CorrelationDiff(matrix=d, frobenius=float(np.linalg.norm(d)))


def _fmt(x: float) -> str:
    return "" if (x is None or (isinstance(x, float) and math.isnan(x))) else f"{x:.6f}"


def _group_records(records: Sequence) -> Dict[tuple, list]:
    groups: Dict[tuple, list] = {}
    for r in records:
        groups.setdefault((r.objective, r.config_hash), []).append(r)
    return groups


def emit_report(records: Sequence, out_dir) -> List[Path]:
    """Comparison table (CSV + Markdown), loss curves, correlation heatmaps,
    and sweep/certification summaries when applicable.

    One CSV row per (objective, config_hash) group; accuracies are
    mean +- sample std (ddof=1) over the seeds in the group.
    """
    if not records:
        raise OSError("emit_report needs at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    rows = []
    for (objective, chash), group in sorted(_group_records(records).items()):
        accs = np.array([g.final["student_test_acc"] for g in group], dtype=np.float64)
        frob = [g.final.get("corr_frobenius") for g in group]
        frob = [f for f in frob if f is not None]
        wb = [g.final.get("weak_bound_final") for g in group]
        wb = [w for w in wb if w is not None and not (isinstance(w, float) and math.isnan(w))]
        rows.append({
            "objective": objective,
            "teacher": group[0].teacher,
            "student": group[0].student,
            "seed_count": len(group),
            "acc_mean": float(np.nanmean(accs)),
            "acc_std": float(np.nanstd(accs, ddof=1)) if len(accs) > 1 else 0.0,
            "corr_frobenius": float(np.mean(frob)) if frob else float("nan"),
            "weak_bound_final": float(np.mean(wb)) if wb else float("nan"),
        })

    csv_path = out / "comparison.csv"
    cols = ["objective", "teacher", "student", "seed_count", "acc_mean",
            "acc_std", "corr_frobenius", "weak_bound_final"]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([row["objective"], row["teacher"], row["student"],
                        row["seed_count"], _fmt(row["acc_mean"]), _fmt(row["acc_std"]),
                        _fmt(row["corr_frobenius"]), _fmt(row["weak_bound_final"])])
    written.append(csv_path)

    md_path = out / "comparison.md"
    lines = ["| " + " | ".join(cols) + " |",
             "|" + "---|" * len(cols)]
    for row in rows:
        lines.append("| " + " | ".join([
            row["objective"], row["teacher"], row["student"], str(row["seed_count"]),
            _fmt(row["acc_mean"]), _fmt(row["acc_std"]),
            _fmt(row["corr_frobenius"]), _fmt(row["weak_bound_final"])]) + " |")
    md_path.write_text("\n".join(lines) + "\n")
    written.append(md_path)

    written.extend(_emit_tau_sweep(records, out))
    written.extend(_emit_plots(records, out))
    return written


def _emit_tau_sweep(records: Sequence, out: Path) -> List[Path]:
    """When several records differ only by critic temperature, write a
    sweep table with the best cell flagged."""
    by_tau: Dict[float, list] = {}
    for r in records:
        if isinstance(r.tau, float) and not math.isnan(r.tau) and "CRD" in r.objective:
            by_tau.setdefault(r.tau, []).append(r)
    if len(by_tau) < 2:
        return []
    rows = []
    for tau in sorted(by_tau):
        accs = [g.final["student_test_acc"] for g in by_tau[tau]]
        rows.append((tau, float(np.mean(accs)), len(accs)))
    best_tau = max(rows, key=lambda t: t[1])[0]
    path = out / "tau_sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "acc_mean", "seed_count", "best"])
        for tau, acc, cnt in rows:
            w.writerow([f"{tau:g}", _fmt(acc), cnt, "*" if tau == best_tau else ""])
    return [path]


def _emit_plots(records: Sequence, out: Path) -> List[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written: List[Path] = []
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (objective, chash), group in sorted(_group_records(records).items()):
        r = group[0]
        if not r.per_epoch:
            continue
        epochs = [e.epoch for e in r.per_epoch]
        losses = [e.train_loss for e in r.per_epoch]
        ax.plot(epochs, losses, label=f"{objective}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    p = out / "loss_curves.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    written.append(p)

    for (objective, chash), group in sorted(_group_records(records).items()):
        r = group[0]
        mat = r.final.get("corr_diff")
        if mat is None:
            continue
        m = np.asarray(mat)
        fig, ax = plt.subplots(figsize=(4, 3.4))
        im = ax.imshow(m, cmap="coolwarm", vmin=-1, vmax=1)
        fig.colorbar(im, ax=ax)
        ax.set_title(f"{objective} corr diff (fro={np.linalg.norm(m):.3f})", fontsize=8)
        fig.tight_layout()
        p = out / f"corr_diff_{objective}_{chash[:8]}.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        written.append(p)
    return written


def write_certification_summary(report: dict, out_dir) -> Path:
    """Copy the MI certification report next to the comparison tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / "mi_certification.json"
    p.write_text(json.dumps(report, indent=1, sort_keys=True))
    return p
