"""Figure rendering for run outputs.

Experiments only collect plot data; this module turns each collected
figure description into a PNG with the non-interactive Agg backend.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _deviation(ax, data):
    hist = data["hist"]
    lam = np.asarray(hist["lambda"])
    for value in sorted(set(lam.tolist())):
        sel = lam == value
        mid = 0.5 * (np.asarray(hist["bin_lo"])[sel] + np.asarray(hist["bin_hi"])[sel])
        line, = ax.plot(mid, np.asarray(hist["exponential"])[sel], lw=1)
        ax.plot(mid, np.asarray(hist["empirical"])[sel], ".", color=line.get_color(),
                label=f"|lambda| = {value:g}")
    ax.set_yscale("log")
    ax.set_xlabel("|dS - dA|")
    ax.set_ylabel("density")
    ax.legend()


def _born(ax, data):
    dens = data["density"]
    q = np.asarray(dens["q"])
    for j, t in enumerate(data["times"]):
        line, = ax.plot(q, dens[f"density_t{j}"], lw=1, label=f"t = {t:.3g}")
        ax.step(q, dens[f"histogram_t{j}"], where="mid", color=line.get_color(), alpha=0.5)
    ax.set_xlabel("q")
    ax.set_ylabel("density")
    ax.legend()


def _scaling(ax, data):
    dt = np.asarray(data["dt"])
    ax.loglog(dt, data["rms"], "o", label="RMS gap")
    ax.loglog(dt, data["prefactor"] * dt ** data["exponent"], "-",
              label=f"fit, exponent {data['exponent']:.3f}")
    ax.set_xlabel("dt")
    ax.set_ylabel("RMS position gap")
    ax.legend()


def _classical(ax, data):
    paths = data["paths"]
    t = np.asarray(paths["t"])
    ax.plot(t, paths["classical_q"], "k-", lw=2, label="classical")
    for key, col in paths.items():
        if key.startswith("mean_q_"):
            ax.plot(t, col, lw=1, label=key.replace("mean_q_", "mean, "))
    ax.set_xlabel("t")
    ax.set_ylabel("q")
    ax.legend()


def _balance(ax, data):
    prof = data["profile"]
    q = np.asarray(prof["q"])
    for key, col in prof.items():
        if key.startswith("residual_"):
            ax.semilogy(q, np.abs(np.asarray(col, dtype=float)) + 1e-18, lw=1,
                        label=key.replace("residual_", ""))
    ax.set_xlabel("q")
    ax.set_ylabel("|sign-averaged residual|")
    ax.legend()


def _uncertainty(ax, data):
    rows = data["rows"]
    x = np.arange(len(rows["product"]))
    ax.errorbar(x, rows["product"], yerr=rows["stat_err"], fmt="o", label="sigma_q sigma_p")
    ax.plot(x, rows["fisher_bound"], "s", mfc="none", label="grid bound")
    ax.axhline(0.5, color="k", lw=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels([f"{c}\nt={t:.3g}" for c, t in zip(rows["case"], rows["t"])],
                       fontsize=7)
    ax.legend()


def _locality(ax, data):
    ax.plot(data["times"], data["ks"], "o-", label="particle-1 two-sample KS")
    ax.axhline(data["band"], color="k", ls="--", label="99% band")
    ax.set_xlabel("t")
    ax.legend()


_KINDS = {"deviation": _deviation, "born": _born, "scaling": _scaling, "classical": _classical,
          "balance": _balance, "uncertainty": _uncertainty, "locality": _locality}


def render(spec, path) -> Path:
    """Draw one figure description (``{"kind", "data"}``) to ``path``."""
    draw = _KINDS[spec["kind"]]
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    try:
        draw(ax, spec["data"])
        fig.tight_layout()
        fig.savefig(path, dpi=100, metadata={"Software": None})
    finally:
        plt.close(fig)
    return Path(path)
