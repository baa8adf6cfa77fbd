"""SVG figure emission for the correction, diagnostic and density reports.

Figures are written without timestamps (fixed hash salt, no Date
metadata) so repeated runs produce stable output.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "chemocal"

import matplotlib.pyplot as plt  # noqa: E402

from .calib import BulkAggregate  # noqa: E402
from .density import DensitySweep  # noqa: E402
from .diagnose import BulkDistribution  # noqa: E402


def _save(fig, path: str | Path) -> None:
    fig.savefig(Path(path), format="svg", metadata={"Date": None})
    plt.close(fig)


def parity_plot(path: str | Path, aggregates: list[BulkAggregate],
                stats_by_split: dict[str, dict], title: str = "") -> None:
    """Bulk-mean predictions against references, one panel per split, with
    SEM error bars, the identity line and the fitted line (drawn in the
    reference-to-prediction direction)."""
    splits = [s for s in ("train", "val", "test") if s in stats_by_split]
    fig, axes = plt.subplots(1, len(splits), figsize=(4.2 * len(splits), 4.0),
                             squeeze=False)
    for ax, split in zip(axes[0], splits):
        rows = [r for r in aggregates if r.split == split]
        y = [r.y_ref for r in rows]
        yhat = [r.yhat_mean for r in rows]
        sem = [0.0 if r.sem is None else r.sem for r in rows]
        ax.errorbar(y, yhat, yerr=sem, fmt="o", ms=3.5, lw=0.8, capsize=2,
                    color="tab:blue", ecolor="tab:gray")
        lo = min(min(y), min(yhat))
        hi = max(max(y), max(yhat))
        pad = 0.05 * (hi - lo or 1.0)
        lo, hi = lo - pad, hi + pad
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8, label="identity")
        st = stats_by_split[split]
        if st["inv_scale"] is not None:
            ax.plot([lo, hi],
                    [st["inv_scale"] * lo + st["inv_bias"],
                     st["inv_scale"] * hi + st["inv_bias"]],
                    "r-", lw=0.9, label="fit")
        if st["scale"] is not None:
            syx_txt = "-" if st["syx"] is None else f"{st['syx']:.3f}"
            ax.set_title(f"{split}: RMSE {st['rmse']:.3f}, sYX {syx_txt}\n"
                         f"bias {st['bias']:.3f}, scale {st['scale']:.3f}", fontsize=9)
        else:
            ax.set_title(f"{split}: RMSE {st['rmse']:.3f}", fontsize=9)
        ax.set_xlabel("reference")
        ax.set_ylabel("prediction")
        ax.legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def corrected_parity_plot(path: str | Path, rows: list[BulkAggregate],
                          rmse_value: float, source: str) -> None:
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    y = [r.y_ref for r in rows]
    yhat = [r.yhat_mean for r in rows]
    sem = [0.0 if r.sem is None else r.sem for r in rows]
    ax.errorbar(y, yhat, yerr=sem, fmt="o", ms=3.5, lw=0.8, capsize=2,
                color="tab:green", ecolor="tab:gray")
    lo = min(min(y), min(yhat))
    hi = max(max(y), max(yhat))
    pad = 0.05 * (hi - lo or 1.0)
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], "k--", lw=0.8)
    ax.set_title(f"test, corrected with {source} parameters: RMSE {rmse_value:.3f}")
    ax.set_xlabel("reference")
    ax.set_ylabel("corrected prediction")
    fig.tight_layout()
    _save(fig, path)


def distribution_plot(path: str | Path, rows: list[BulkDistribution],
                      family: str, alpha: float) -> None:
    """Per-bulk statistic, Z-score and p-value against the bulk reference.

    ``family`` is ``skew``, ``kurt`` or ``omnibus``; p-value panels carry
    the alpha guide line on a log scale.
    """
    tested = [r for r in rows if r.flag is None]
    if family == "skew":
        panels = [("skewness g1", [r.g1 for r in tested], None),
                  ("Z", [r.z_skew for r in tested], None),
                  ("p", [r.p_skew for r in tested], alpha)]
    elif family == "kurt":
        panels = [("excess kurtosis g2", [r.g2 for r in tested], None),
                  ("Z", [r.z_kurt for r in tested], None),
                  ("p", [r.p_kurt for r in tested], alpha)]
    elif family == "omnibus":
        panels = [("K2", [r.k2 for r in tested], None),
                  ("p", [r.p_omnibus for r in tested], alpha)]
    else:
        raise ValueError(f"unknown statistic family {family!r}")
    refs = [r.y_ref for r in tested]
    fig, axes = plt.subplots(1, len(panels), figsize=(4.0 * len(panels), 3.6),
                             squeeze=False)
    for ax, (label, values, guide) in zip(axes[0], panels):
        ax.scatter(refs, values, s=12, color="tab:blue")
        ax.set_xlabel("bulk reference")
        ax.set_ylabel(label)
        if label.startswith("skew") or label == "Z":
            ax.axhline(0.0, color="k", lw=0.6, ls=":")
        if guide is not None:
            floor = min([v for v in values if v > 0.0], default=1e-300)
            ax.set_yscale("log")
            ax.set_ylim(max(floor / 10.0, 1e-300), 1.5)
            ax.axhline(guide, color="r", lw=0.8, ls="--", label=f"alpha={guide:g}")
            ax.legend(fontsize=7)
    split = rows[0].split if rows else ""
    fig.suptitle(f"{family} statistics per bulk ({split})")
    fig.tight_layout()
    _save(fig, path)


def density_plot(path: str | Path, sweep: DensitySweep) -> None:
    """Binned metric bars plus the cumulative minimum-density curve
    (read right-to-left)."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    mids = [(p.lo + p.hi) / 2.0 for p in sweep.bins]
    ax.bar(mids, [p.mean for p in sweep.bins], width=0.045,
           yerr=[p.sem for p in sweep.bins], color="tab:blue", alpha=0.6,
           capsize=2, label=f"{sweep.metric} per bin")
    ax.errorbar([p.lo for p in sweep.cumulative],
                [p.mean for p in sweep.cumulative],
                yerr=[p.sem for p in sweep.cumulative],
                color="tab:red", lw=1.2, capsize=2, marker=".",
                label=f"{sweep.metric}, density >= threshold")
    ax.set_xlabel("grain density")
    ax.set_ylabel(sweep.metric)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
