"""PNG figures written next to a CSV report."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _values(rows, key):
    return np.array([np.nan if r.get(key) is None else float(r[key]) for r in rows])


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _series(ax, x, rows, prefix, names, **kw):
    for a in names:
        y = _values(rows, f"{prefix}_{a}")
        if np.any(np.isfinite(y)):
            ax.plot(x, y, label=a, **kw)


def plot_model(table, stem: str) -> list[str]:
    rows = table.rows
    names = [r["ac"] for r in rows]
    out = []
    with plt.rc_context(STYLE):
        for key, label in (("throughput_mbps", "throughput per station (Mbps)"),
                           ("airtime", "flow air-time")):
            if key not in table.columns:
                continue
            fig, ax = plt.subplots()
            ax.bar(names, _values(rows, key))
            ax.set_ylabel(label)
            out.append(_save(fig, f"{stem}_{key}.png"))
    return out


def plot_optimize(table, names, stem: str) -> list[str]:
    row = table.rows[0]
    out = []
    with plt.rc_context(STYLE):
        for prefix, label in (("throughput", "throughput per station (Mbps)"),
                              ("airtime", "flow air-time")):
            if f"{prefix}_{names[0]}" not in table.columns:
                continue
            fig, ax = plt.subplots()
            ax.bar(names, [np.nan if row.get(f"{prefix}_{a}") is None else row[f"{prefix}_{a}"]
                           for a in names])
            ax.set_ylabel(label)
            out.append(_save(fig, f"{stem}_{prefix}.png"))
    return out


def plot_sweep(table, names, parameter: str, stem: str) -> list[str]:
    rows = [r for r in table.rows if not r.get("error")]
    if not rows:
        return []
    x = _values(rows, "value")
    logx = np.all(x > 0) and x.max() / x.min() > 100
    out = []
    with plt.rc_context(STYLE):
        for prefix, label in (("throughput", "throughput per station (Mbps)"),
                              ("delay", "mean delay (us)"), ("tau", "attempt probability"),
                              ("airtime", "flow air-time")):
            if f"{prefix}_{names[0]}" not in table.columns:
                continue
            fig, ax = plt.subplots()
            _series(ax, x, rows, prefix, names, marker="o", ms=3)
            if logx:
                ax.set_xscale("log")
            ax.set_xlabel(parameter)
            ax.set_ylabel(label)
            ax.legend()
            out.append(_save(fig, f"{stem}_{prefix}.png"))
        if "airtime_sum" in table.columns:
            fig, ax = plt.subplots()
            ax.plot(x, _values(rows, "airtime_sum"), marker="o", ms=3)
            if logx:
                ax.set_xscale("log")
            ax.set_xlabel(parameter)
            ax.set_ylabel("sum of flow air-times")
            out.append(_save(fig, f"{stem}_airtime_sum.png"))
    return out


def plot_closed_loop(records, names, stem: str) -> list[str]:
    rows = records.rows
    t = _values(rows, "time_s")
    out = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        _series(ax, t, rows, "cw", names, lw=0.8)
        ax.set_yscale("log")
        ax.set_xlabel("time (s)")
        ax.set_ylabel("CW_min")
        ax.legend()
        out.append(_save(fig, f"{stem}_cw.png"))

        fig, ax = plt.subplots()
        _series(ax, t, rows, "throughput_window", names, lw=0.8)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("windowed throughput per station (Mbps)")
        ax.legend()
        out.append(_save(fig, f"{stem}_throughput.png"))

        fig, ax = plt.subplots()
        for a in names:
            y = _values(rows, f"pfail_window_{a}")
            if np.any(np.isfinite(y)):
                line, = ax.plot(t, y, lw=0.8, label=a)
                ax.plot(t, _values(rows, f"ref_{a}"), ls="--", lw=0.8, color=line.get_color())
        ax.set_xlabel("time (s)")
        ax.set_ylabel("failure probability (dashed: target)")
        ax.legend()
        out.append(_save(fig, f"{stem}_pfail.png"))
    return out
