"""Report figures. Everything renders off-screen to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from hybridep import perfmodel  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}

# PNG metadata otherwise embeds the matplotlib version
_META = {"Software": None}

KIND_COLORS = {
    "PRE_EXPERT": "#4c72b0",
    "EXPERT": "#8172b2",
    "OPTIMIZER": "#937860",
    "BACKWARD": "#8c8c8c",
    "AG": "#55a868",
    "A2A_dispatch": "#c44e52",
    "A2A_combine": "#dd8452",
}


def _save(fig, path):
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def plot_latency_curve(workload, device, num_gpus, path, chosen=None):
    """Final latency against p, with the divisor-realizable points marked."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ps = np.linspace(0, 1, 401)
        lat = [perfmodel.final_latency(p, workload, device, num_gpus, relaxed=True).final * 1e3 for p in ps]
        ax.plot(ps, lat, color="k", lw=1)
        sizes = perfmodel.divisors(num_gpus)
        grid = [perfmodel.evaluate_domain(workload, device, num_gpus, s) for s in sizes]
        ax.scatter([float(g.p) for g in grid], [g.latency.final * 1e3 for g in grid], color="k", s=12, zorder=3)
        if chosen is not None:
            ax.scatter([float(chosen.p)], [chosen.latency.final * 1e3], color="red", s=30, zorder=4, label="chosen")
            ax.legend(frameon=False)
        pb = perfmodel.boundary_p(workload, device, num_gpus)
        if 0 < pb < 1:
            ax.axvline(pb, color="gray", ls=":", lw=0.8)
        ax.set_xlabel("A2A proportion p")
        ax.set_ylabel("iteration latency (ms)")
        _save(fig, path)


def plot_sweep(rows, axis, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        x = [r.value for r in rows]
        ax.plot(x, [r.speedup for r in rows], marker="o", ms=3, color="#c44e52")
        ax.axhline(1.0, color="gray", lw=0.6, ls="--")
        if axis == "dc_count" and len(x) > 1 and max(x) / min(x) >= 20:
            ax.set_xscale("log")
        ax.set_xlabel(axis.replace("_", " "))
        ax.set_ylabel("speedup over EP")
        _save(fig, path)


def plot_trace(trace, path, max_gpus=8):
    """Gantt chart of the first ``max_gpus`` GPUs' resources."""
    jobs = trace.graph.jobs
    resources = sorted({j.resource for j in jobs if j.gpu < max_gpus}, key=_resource_key)
    row = {r: i for i, r in enumerate(resources)}
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(7, 0.3 * len(resources) + 1))
        for j in jobs:
            if j.gpu >= max_gpus:
                continue
            dur = trace.end[j.id] - trace.start[j.id]
            if dur <= 0:
                continue
            ax.barh(
                row[j.resource], dur * 1e3, left=trace.start[j.id] * 1e3, height=0.7,
                color=KIND_COLORS.get(j.kind.value, "k"), edgecolor="white", lw=0.3,
            )
        ax.set_yticks(range(len(resources)), resources)
        ax.invert_yaxis()
        ax.set_xlabel("time (ms)")
        handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in KIND_COLORS.values()]
        ax.legend(handles, KIND_COLORS.keys(), ncol=4, frameon=False, loc="upper center", bbox_to_anchor=(0.5, -0.25))
        _save(fig, path)


def _resource_key(res):
    gpu, part = res.split(":")
    return int(gpu[3:]), part


def plot_topology(topology, path):
    """Pair matrix: 0 none, 1 AG, 2 A2A (collapsed over levels)."""
    if topology.types is None:
        return False
    g = topology.cluster.total_gpus
    if g > 512:
        return False
    merged = topology.types.max(axis=0)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 4))
        cmap = matplotlib.colors.ListedColormap(["#f0f0f0", "#55a868", "#c44e52"])
        ax.imshow(merged, cmap=cmap, vmin=0, vmax=2, interpolation="nearest")
        ax.set_xlabel("GPU n")
        ax.set_ylabel("GPU m")
        handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in ("#55a868", "#c44e52")]
        ax.legend(handles, ["AG", "A2A"], frameon=False, loc="upper center", bbox_to_anchor=(0.5, -0.12), ncol=2)
        _save(fig, path)
    return True


def plot_residual_hist(experts, shared, path, bins=120):
    """Distribution of raw expert weights against their residuals."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(7, 2.8))
        for ax, name in zip(axes, ("w_up", "w_down")):
            raw = np.concatenate([getattr(e, name).ravel() for e in experts])
            res = np.concatenate([(getattr(e, name) - getattr(shared, name)).ravel() for e in experts])
            lim = float(np.abs(raw).max())
            edges = np.linspace(-lim, lim, bins)
            ax.hist(raw, bins=edges, color="#4c72b0", alpha=0.6, label=name)
            ax.hist(res, bins=edges, color="#c44e52", alpha=0.6, label=f"{name}_res")
            ax.set_yscale("log")
            ax.legend(frameon=False)
            ax.set_xlabel("value")
        axes[0].set_ylabel("count")
        _save(fig, path)
