"""Figure rendering for experiment outputs.

Figures are derived purely from the delimited tables the experiments write,
never from in-memory state, so they carry no information of their own.
"""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _savefig(fig, outdir, name):
    path = os.path.join(outdir, name)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return path


def render_figures(outdir: str) -> list:
    """Render the standard figure for every known table present in a run
    directory; returns the list of files written."""
    written = []
    table = os.path.join(outdir, "moment_history.csv")
    if os.path.exists(table):
        rows = _read_csv(table)
        fig, ax = plt.subplots(figsize=(6, 4))
        groups = sorted({r["label"] for r in rows})
        for g in groups:
            pts = [(float(r["time"]), float(r["mean_u2"])) for r in rows
                   if r["label"] == g]
            ax.semilogy([p[0] for p in pts], [p[1] for p in pts],
                        marker="o", ms=3, label=g)
        ax.set_xlabel("time")
        ax.set_ylabel("second moment")
        ax.legend(fontsize=8)
        written.append(_savefig(fig, outdir, "moment_history.svg"))
    table = os.path.join(outdir, "concentration_constants.csv")
    if os.path.exists(table):
        rows = _read_csv(table)
        fig, ax = plt.subplots(figsize=(6, 4))
        models = [r["model"] for r in rows]
        ax.bar([i - 0.2 for i in range(len(rows))],
               [float(r["zeta_local"]) for r in rows], 0.4, label="local")
        ax.bar([i + 0.2 for i in range(len(rows))],
               [float(r["zeta_global"]) for r in rows], 0.4, label="global")
        ax.set_xticks(range(len(rows)), models)
        ax.set_ylabel("concentration constant")
        ax.legend()
        written.append(_savefig(fig, outdir, "concentration_constants.svg"))
    table = os.path.join(outdir, "envelope_fits.csv")
    if os.path.exists(table):
        rows = _read_csv(table)
        fig, ax = plt.subplots(figsize=(7, max(3, 0.3 * len(rows))))
        labels = [r["label"] for r in rows]
        margins = [float(r["holdout_max_ratio"]) /
                   max(float(r["fitted_constant"]), 1e-300) for r in rows]
        colors = ["tab:green" if r["passed"] in ("True", "true", "1")
                  else "tab:red" for r in rows]
        ax.barh(range(len(rows)), margins, color=colors)
        ax.axvline(1.1, color="k", ls="--", lw=1)
        ax.set_yticks(range(len(rows)), labels, fontsize=7)
        ax.set_xlabel("holdout ratio / fitted constant (limit 1.1)")
        written.append(_savefig(fig, outdir, "envelope_fits.svg"))
    table = os.path.join(outdir, "series_orders.csv")
    if os.path.exists(table):
        rows = _read_csv(table)
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.semilogy([int(r["order"]) for r in rows],
                    [abs(float(r["contribution"])) for r in rows], "o-")
        ax.set_xlabel("series order")
        ax.set_ylabel("contribution")
        written.append(_savefig(fig, outdir, "series_orders.svg"))
    table = os.path.join(outdir, "lyapunov_fits.csv")
    if os.path.exists(table):
        rows = _read_csv(table)
        fig, ax = plt.subplots(figsize=(6, 4))
        for i, r in enumerate(rows):
            ax.errorbar([i], [float(r["slope"])],
                        yerr=[[float(r["slope"]) - float(r["ci_lo"])],
                              [float(r["ci_hi"]) - float(r["slope"])]],
                        fmt="o", capsize=4)
            ax.hlines(float(r["target"]), i - 0.3, i + 0.3, color="tab:red")
        ax.set_xticks(range(len(rows)),
                      [f"beta={r['beta']}" for r in rows])
        ax.set_ylabel("growth-rate estimate vs target")
        written.append(_savefig(fig, outdir, "lyapunov_fits.svg"))
    table = os.path.join(outdir, "verdicts.csv")
    if os.path.exists(table):
        rows = _read_csv(table)
        counts = {}
        for r in rows:
            counts[r["verdict"]] = counts.get(r["verdict"], 0) + 1
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.pie(list(counts.values()), labels=list(counts.keys()),
               autopct="%d%%")
        written.append(_savefig(fig, outdir, "verdicts.svg"))
    return written
