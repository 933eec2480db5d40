"""PNG figures for run reports: objective trace, precision-recall, mixing curve."""

from __future__ import annotations

from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataio import PathLike, atomic_open  # noqa: E402
from .evaluation import MatchResult, precision_recall  # noqa: E402
from .solver import Trace  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_METADATA = {"Software": None}


def _save(fig, path: PathLike) -> None:
    with atomic_open(path, "wb") as fh:
        fig.savefig(fh, format="png", dpi=100, metadata=_METADATA)
    plt.close(fig)


def plot_trace(trace: Trace, path: PathLike, h0: float = None) -> None:
    """Objective and total duality gap against iteration."""
    fig, (ax_h, ax_g) = plt.subplots(1, 2, figsize=(9, 3.5))
    it = np.asarray(trace.iteration)
    ax_h.plot(it, trace.h, lw=1.2)
    ax_h.set_xlabel("iteration")
    ax_h.set_ylabel("objective")
    gaps = np.asarray(trace.total_gap, dtype=np.float64)
    pos = gaps > 0
    ax_g.semilogy(it[pos], gaps[pos], lw=1.2)
    if h0 is not None and h0 > 0:
        ax_g.axhline(1e-3 * h0, ls="--", color="0.5", lw=1, label="1e-3 h(Y0)")
        ax_g.legend(loc="upper right", fontsize=8)
    ax_g.set_xlabel("iteration")
    ax_g.set_ylabel("total gap")
    fig.tight_layout()
    _save(fig, path)


def plot_pr_curves(result: MatchResult, classes: Sequence[int], path: PathLike,
                   title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for k in classes:
        if result.num_gt.get(k, 0) == 0:
            continue
        rec, prec = precision_recall(result, k)
        ax.step(np.concatenate([[0], rec]), np.concatenate([[1], prec]), where="post",
                label=f"class {k}", lw=1.2)
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    if title:
        ax.set_title(title, fontsize=10)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_mix_curve(rows: Sequence[Dict[str, float]], path: PathLike,
                   weak: str = "weak", strong: str = "strong") -> None:
    """mAP at each threshold against the fraction of strongly annotated videos."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    frac = np.array([r["fraction"] for r in rows])
    keys = [k for k in rows[0] if k.startswith("map@")] if rows else []
    for key in keys:
        ax.plot(100 * frac, [r[key] for r in rows], marker="o", lw=1.2, label=key.replace("map", "mAP"))
    ax.set_xlabel(f"% videos with {strong} supervision (rest {weak})")
    ax.set_ylabel("video mAP")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
