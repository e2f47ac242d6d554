"""Static PNG charts for `analyze --plot`."""
from __future__ import annotations
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import fs  # noqa: E402
from .analysis import AttentionStats, LoopAllocationProfile, MaskCountProfile, TimestepProfile  # noqa: E402


def _save(fig, path: Path) -> Path:
    path = Path(path)
    fs.ensure_dir(path.parent)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_attention(stats: Sequence[AttentionStats], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    by_series: Dict[tuple, List[AttentionStats]] = {}
    for s in stats:
        by_series.setdefault((s.loops, s.layer), []).append(s)
    for (S, layer), series in sorted(by_series.items()):
        series.sort(key=lambda s: s.loop)
        ax.plot([s.loop for s in series], [s.mass for s in series], marker="o", label=f"S={S} layer {layer}")
    ax.set_xlabel("loop iteration")
    ax.set_ylabel("mask-to-mask attention mass")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.25)
    ax.legend(fontsize="small")
    return _save(fig, path)


def plot_timestep_gain(profile: TimestepProfile, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    centers = 0.5 * (profile.edges[:-1] + profile.edges[1:])
    gains = profile.gains
    for j, S in enumerate(profile.s_list):
        if S == 1:
            continue
        ax.plot(centers, gains[:, j], marker=".", label=f"S={S}")
    ax.axhline(0.0, color="gray", linewidth=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel("NLL(S=1) - NLL(S)")
    ax.grid(True, alpha=0.25)
    if len(profile.s_list) > 1:
        ax.legend()
    return _save(fig, path)


def plot_mask_count_gain(profile: MaskCountProfile, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    gains = profile.gains
    for j, S in enumerate(profile.s_list):
        if S == 1:
            continue
        ax.plot(profile.mask_counts, gains[:, j], marker=".", label=f"S={S}")
    ax.axhline(0.0, color="gray", linewidth=0.8)
    ax.set_xlabel("masked positions")
    ax.set_ylabel("NLL(S=1) - NLL(S)")
    ax.grid(True, alpha=0.25)
    if len(profile.s_list) > 1:
        ax.legend()
    return _save(fig, path)


def plot_loop_allocation(profiles: Dict[str, LoopAllocationProfile], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, profile in profiles.items():
        centers = 0.5 * (profile.edges[:-1] + profile.edges[1:])
        seen = ~np.isnan(profile.mean_loops)
        ax.plot(centers[seen], profile.mean_loops[seen], marker="o", label=label)
    ax.set_xlabel("t")
    ax.set_ylabel("mean loops used")
    ax.grid(True, alpha=0.25)
    ax.legend()
    return _save(fig, path)
