"""Report figures written next to the JSON/CSV outputs."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import row_errors  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def route_paths(rows, out_dir):
    """Truth, network and Kalman positions per route, one PNG each."""
    out = []
    for name in sorted({r["route"] for r in rows}):
        sub = [r for r in rows if r["route"] == name]
        with plt.rc_context(STYLE):
            fig, ax = plt.subplots()
            tx = [r["truth_x"] for r in sub]
            ty = [r["truth_y"] for r in sub]
            ax.plot(tx, ty, "k-", lw=1.0, label="truth")
            ax.plot([r["est_x"] for r in sub], [r["est_y"] for r in sub], "x", ms=3, color="tab:orange",
                    label="network")
            ax.plot([r["kalman_x"] for r in sub], [r["kalman_y"] for r in sub], "+", ms=3, color="tab:blue",
                    label="kalman", alpha=0.6)
            ax.set_aspect("equal", adjustable="datalim")
            ax.set_xlabel("x [m]")
            ax.set_ylabel("y [m]")
            ax.set_title(f"{name} ({sub[0]['route_type']})")
            ax.legend(loc="best")
            out.append(_save(fig, Path(out_dir) / f"path_{name}.png"))
    return out


def error_by_type(report, out_dir):
    per = report["per_route_type"]
    types = list(per)
    net = [per[t]["network"]["mean_cm"] for t in types]
    kf = [per[t]["kalman"]["mean_cm"] for t in types]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(types))
        ax.bar(x - 0.2, net, 0.4, label="network")
        ax.bar(x + 0.2, kf, 0.4, label="kalman")
        ax.set_xticks(x)
        ax.set_xticklabels(types)
        ax.set_ylabel("mean 200 ms-ahead error [cm]")
        ax.legend()
        return _save(fig, Path(out_dir) / "error_by_route_type.png")


def error_cdf(rows, out_dir):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for which, label in (("est", "network"), ("kalman", "kalman")):
            e = np.sort(row_errors(rows, which)) * 100.0
            if len(e):
                ax.plot(e, np.arange(1, len(e) + 1) / len(e), label=label)
        ax.set_xlabel("error [cm]")
        ax.set_ylabel("fraction of forecasts")
        ax.legend()
        return _save(fig, Path(out_dir) / "error_cdf.png")


def training_history(history, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = [h["epoch"] for h in history]
        ax.semilogy(ep, [h["train_loss"] for h in history], label="train")
        ax.semilogy(ep, [h["val_loss"] for h in history], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        return _save(fig, path)


def render_report(report, rows, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not rows:
        return []
    return [error_by_type(report, out_dir), error_cdf(rows, out_dir)] + route_paths(rows, out_dir)
