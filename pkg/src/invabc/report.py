"""Posterior report: summary table, histograms, tolerance trace and defect-count validation runs."""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .abcpmc import format_summary_table, summarize  # noqa: E402
from .csvio import read_matrix, write_table  # noqa: E402
from .forming_sim import count_defects, element_region, run_forward  # noqa: E402
from .imaging import save_png  # noqa: E402

# fixed ids and no date stamp keep the SVG bytes reproducible
plt.rcParams["svg.hashsalt"] = "invabc"
_SVG_META = {"Date": None}


def _save(fig, path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def summary_rows(names, theta, weights):
    s = summarize(theta, weights)
    return [(n, m, sd) for n, m, sd in zip(names, s.mean, s.std)], s


def plot_histograms(path, names, theta, weights, truth=None, bins: int = 20) -> None:
    d = len(names)
    cols = min(d, 3)
    rows = -(-d // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.6 * rows), squeeze=False)
    for i, name in enumerate(names):
        ax = axes[i // cols][i % cols]
        ax.hist(theta[:, i], bins=bins, weights=weights, color="0.55")
        if truth is not None:
            ax.axvline(truth[i], color="k", linestyle="--", linewidth=1)
        ax.set_title(name, fontsize=9)
    for j in range(d, rows * cols):
        axes[j // cols][j % cols].axis("off")
    fig.tight_layout()
    _save(fig, path)


def plot_epsilon_trace(path, generations, epsilons) -> None:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(generations, epsilons, marker="o", color="k")
    ax.set_xlabel("generation")
    ax.set_ylabel("tolerance")
    if np.all(np.asarray(epsilons) > 0):
        ax.set_yscale("log")
    fig.tight_layout()
    _save(fig, path)


def plot_defects(path, labels, cracks, wrinkles) -> None:
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(4, 0.3 * len(labels)), 3))
    ax.bar(x - 0.2, cracks, width=0.4, color="0.3", label="crack")
    ax.bar(x + 0.2, wrinkles, width=0.4, color="0.7", label="wrinkles")
    ax.set_xticks(x, labels, rotation=90, fontsize=7)
    ax.set_ylabel("elements in working region")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def defect_validation(theta_draws, space, sim) -> list[tuple]:
    """Simulated crack and wrinkle counts, inside the working region and overall."""
    region = element_region(sim.grid, sim)
    out = []
    for th in theta_draws:
        _, labels, _ = run_forward(th, space, sim)
        cr, wr = count_defects(labels, region)
        ct, wt = count_defects(labels)
        out.append((cr, wr, ct, wt, int(region.sum())))
    return out


def write_report(run) -> list[str]:
    from .pipeline import read_final_posterior

    cfg = run.cfg
    names = cfg.space.names
    theta, w = read_final_posterior(run.path("infer/posterior.csv"), names)
    rows, s = summary_rows(names, theta, w)
    truth = cfg.theta_star if cfg.objective_mode == "planted" else None
    header = ["parameter", "mean", "std"] + (["planted"] if truth is not None else [])
    table = [r + ((truth[i],) if truth is not None else ()) for i, r in enumerate(rows)]
    write_table(run.path("report/summary.csv"), header, table)
    run.path("report/summary.txt").write_text(format_summary_table(names, s.mean, s.std))
    plot_histograms(run.path("report/histograms.svg"), names, theta, w, truth)

    th, tr = read_matrix(run.path("infer/traces.csv"))
    plot_epsilon_trace(run.path("report/epsilon_trace.svg"), tr[:, th.index("generation")], tr[:, th.index("epsilon")])

    rng = np.random.default_rng([cfg.seed, 7])
    idx = rng.choice(len(theta), size=cfg.report_draws, p=w) if cfg.report_draws else np.zeros(0, int)
    draws = list(theta[idx]) + [s.mean]
    labels = [f"draw_{k + 1}" for k in range(len(idx))] + ["mean"]
    counts = defect_validation(draws, cfg.space, cfg.sim)
    write_table(
        run.path("report/defects.csv"),
        ["run", *names, "crack_region", "wrinkles_region", "crack_total", "wrinkles_total", "region_elements"],
        [(lab, *d, *c) for lab, d, c in zip(labels, draws, counts)],
    )
    plot_defects(run.path("report/defects.svg"), labels, [c[0] for c in counts], [c[1] for c in counts])
    _, _, mean_img = run_forward(s.mean, cfg.space, cfg.sim)
    save_png(mean_img, run.path("report/posterior_mean_fld.png"))
    return [
        "report/summary.csv",
        "report/summary.txt",
        "report/histograms.svg",
        "report/epsilon_trace.svg",
        "report/defects.csv",
        "report/defects.svg",
        "report/posterior_mean_fld.png",
    ]
