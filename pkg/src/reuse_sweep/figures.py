"""Matplotlib renderings written next to the delimited report files."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    return path


def save_memory_figure(traces, path: str) -> str:
    """Live store bytes over logical ticks, one line per executed stage."""
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    for i, trace in enumerate(traces):
        if not trace.samples:
            continue
        ticks = [t for t, _, _ in trace.samples]
        live = [b for _, _, b in trace.samples]
        ax.step(ticks, live, where="post", lw=0.9, alpha=0.7,
                label=f"stage {i}" if len(traces) <= 8 else None)
    ax.set_xlabel("logical tick")
    ax.set_ylabel("live bytes")
    ax.set_title("store occupancy during execution")
    if len(traces) <= 8:
        ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def save_indices_figure(names, mu_star, sigma, path: str) -> str:
    fig, ax = plt.subplots(figsize=(6.5, 3.2))
    x = range(len(names))
    ax.bar(x, mu_star, width=0.6, label="mu*")
    ax.plot(x, sigma, "k.", ms=6, label="sigma")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=60, fontsize=7)
    ax.set_ylabel("elementary-effect magnitude")
    ax.set_title("parameter influence (screening)")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def save_bucket_figure(sizes, path: str) -> str:
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    top = max(sizes) if sizes else 1
    ax.hist(sizes, bins=range(1, top + 2), align="left", rwidth=0.85)
    ax.set_xlabel("bucket size")
    ax.set_ylabel("buckets")
    ax.set_title("merged-stage bucket sizes")
    return _save(fig, path)


def save_compare_figure(rows, path: str) -> str:
    """Executed cost and peak bytes per reuse mode, side by side."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.5, 3.0))
    modes = [r["mode"] for r in rows]
    ax1.bar(modes, [r["executed_cost"] for r in rows], color="#4878d0")
    ax1.set_ylabel("executed task cost")
    ax2.bar(modes, [r["peak_bytes"] for r in rows], color="#d65f5f")
    ax2.set_ylabel("peak store bytes")
    for ax in (ax1, ax2):
        ax.tick_params(axis="x", rotation=20)
    fig.suptitle("reuse modes compared")
    return _save(fig, path)


def save_scaling_figure(rows, path: str) -> str:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    nodes = [r["nodes"] for r in rows]
    eff = [r["efficiency"] for r in rows]
    ax.plot(nodes, eff, "o-", lw=1.2)
    ax.set_xscale("log", base=2)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("nodes")
    ax.set_ylabel("parallel efficiency")
    ax.set_title("simulated scaling")
    ax.axhline(1.0, color="grey", lw=0.6, ls=":")
    return _save(fig, path)
