"""Figure rendering for the report paths (PNG files next to the CSVs)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .correlate import CorrelationHistogram
from .distill import SecureKeyReport, aggregate_reports


def save_key_report_figure(reports: Sequence[SecureKeyReport], path: str | Path) -> Path:
    """Per-link secure-key rate and QBER bars (cumulative over blocks)."""
    totals = aggregate_reports(reports)
    links = sorted(totals)
    labels = [f"{u}-{v}" for u, v in links]
    rates = [totals[l]["rate_bps"] for l in links]
    qbers = [100.0 * totals[l]["e_b"] for l in links]

    fig, (ax_rate, ax_qber) = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    x = range(len(links))
    ax_rate.bar(x, rates, color="tab:blue")
    ax_rate.set_ylabel("secure key rate (bit/s)")
    if rates and max(rates) > 0:
        ax_rate.set_yscale("symlog", linthresh=1.0)
    ax_qber.bar(x, qbers, color="tab:orange")
    ax_qber.set_ylabel("QBER (%)")
    ax_qber.set_xticks(list(x))
    ax_qber.set_xticklabels(labels, rotation=75, fontsize=7)
    ax_qber.set_xlabel("link")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_block_rate_figure(reports: Sequence[SecureKeyReport], path: str | Path) -> Path:
    """Total network key rate per block (stability-over-time view)."""
    by_block: dict[int, float] = {}
    for rep in reports:
        by_block[rep.block_index] = by_block.get(rep.block_index, 0.0) + rep.rate_bps
    blocks = sorted(by_block)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(blocks, [by_block[b] for b in blocks], marker="o")
    ax.set_xlabel("block index")
    ax.set_ylabel("total secure key rate (bit/s)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_sweep_power_figure(rows: Sequence[dict], path: str | Path) -> Path:
    """Key rate vs pump scale: thin per-link curves plus the bold total."""
    fig, ax = plt.subplots(figsize=(8, 5))
    links = sorted({r["link"] for r in rows if r["link"] != "total"})
    for link in links:
        pts = [(r["x"], r["key_rate_bps"]) for r in rows if r["link"] == link]
        ax.plot(*zip(*pts), color="gray", alpha=0.4, linewidth=0.8)
    total = [(r["x"], r["key_rate_bps"]) for r in rows if r["link"] == "total"]
    if total:
        ax.plot(*zip(*total), color="tab:red", linewidth=2.0, label="network total")
        ax.legend()
    ax.set_xscale("log")
    ax.set_xlabel("pump scale")
    ax.set_ylabel("asymptotic key rate (bit/s)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_sweep_loss_figure(rows: Sequence[dict], path: str | Path) -> Path:
    """Key rate vs transmission loss, one curve per (n, k) family."""
    fig, ax = plt.subplots(figsize=(8, 5))
    families = sorted({r["family"] for r in rows}, key=lambda f: (len(f), f))
    for family in families:
        pts = [(r["x"], r["key_rate_bps"]) for r in rows if r["family"] == family]
        style = next(r["style"] for r in rows if r["family"] == family)
        xs, ys = zip(*pts)
        ax.plot(xs, ys, linestyle="-" if style == "solid" else "--", label=family)
    ax.set_yscale("log")
    ax.set_xlabel("per-user transmission loss (dB)")
    ax.set_ylabel("key rate, non-premium link (bit/s)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_histogram_figure(hist: CorrelationHistogram, path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(hist.bin_centers(), hist.counts, drawstyle="steps-mid", linewidth=0.9)
    ax.set_xlabel("offset (ps)")
    ax.set_ylabel("coincidences")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
