"""Figure builders.

The renderer draws what the CSVs contain and never recomputes physics: the
berry-scan slope annotation echoes the fit stored in the artifact, and the
variance figure's theory curve is the artifact's theory column (the inset
applies only the display map nu = exp(-8 var) to that same column).

Output is deterministic: fixed SVG hash salt, no timestamps in metadata.
"""

from __future__ import annotations

import matplotlib
matplotlib.use("Agg")

import math

import matplotlib.pyplot as plt
import numpy as np

from .csvio import ArtifactTable, SchemaError

matplotlib.rcParams["svg.hashsalt"] = "echo-figures"

_DATA = "#1f5fa8"
_CTRL = "#b4452c"
_REF = "#6b6b6b"
_THEORY = "#222222"


def _new_axes(figsize=(5.2, 3.6)):
    fig, ax = plt.subplots(figsize=figsize, dpi=100)
    ax.grid(True, linestyle=":", alpha=0.4)
    return fig, ax


def render_berry_scan(table: ArtifactTable, title: str | None = None,
                      labels: bool = True):
    """Geometric phase against solid angle with both controls."""
    table.require("solid_angle_sr", "phi_g_rad", "phi_ctrl_rad", "phi_ref_rad")
    omega = np.asarray(table.col("solid_angle_sr"))
    phi = np.asarray(table.col("phi_g_rad"))
    ctrl = np.asarray(table.col("phi_ctrl_rad"))
    ref = np.asarray(table.col("phi_ref_rad"))

    fig, ax = _new_axes()
    if "phi_g_se" in table.columns:
        ax.errorbar(omega, phi, yerr=np.asarray(table.col("phi_g_se")),
                    fmt="o", color=_DATA, ms=5, capsize=2,
                    label="geometric phase")
    else:
        ax.plot(omega, phi, "o", color=_DATA, ms=5, label="geometric phase")
    grid = np.linspace(0.0, float(np.max(omega)) * 1.05, 64)
    ax.plot(grid, -grid / 2.0, "-", color=_THEORY, lw=1.0,
            label=r"$-\Omega/2$")
    ax.plot(omega, ctrl, "s", color=_CTRL, ms=4, fillstyle="none",
            label="same-direction control")
    ax.plot(omega, ref, "^", color=_REF, ms=4, fillstyle="none",
            label="no-evolution control")

    slope = table.meta_float("fit_slope_per_sr")
    intercept = table.meta_float("fit_intercept_rad")
    if slope is not None:
        text = f"fit slope {slope:+.4f} / sr"
        if intercept is not None:
            text += f"\nintercept {intercept:+.4f} rad"
        ax.annotate(text, xy=(0.03, 0.05), xycoords="axes fraction",
                    fontsize=8, family="monospace")
    if labels:
        ax.set_xlabel(r"solid angle $\Omega$ (sr)")
        ax.set_ylabel(r"phase (rad)")
    ax.set_title(title or "Geometric phase against swept solid angle",
                 fontsize=10)
    ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    return fig


def render_variance_scan(table: ArtifactTable, title: str | None = None,
                         labels: bool = True):
    """Phase variance against cycle duration, theory overlay, nu_rel inset."""
    table.require("T_ms", "var_rad2", "var_se", "theory_var_rad2",
                  "nu_rel", "nu_rel_se")
    t = np.asarray(table.col("T_ms"))
    var = np.asarray(table.col("var_rad2"))
    se = np.asarray(table.col("var_se"))
    th = np.asarray(table.col("theory_var_rad2"))
    nu = np.asarray(table.col("nu_rel"))
    nu_se = np.asarray(table.col("nu_rel_se"))

    order = np.argsort(t)
    t, var, se, th, nu, nu_se = (a[order] for a in (t, var, se, th, nu, nu_se))

    fig, ax = _new_axes(figsize=(5.6, 4.0))
    ax.errorbar(t, var, yerr=se, fmt="o", color=_DATA, ms=5, capsize=2,
                label="ensemble variance")
    ax.plot(t, th, "-", color=_THEORY, lw=1.2, label="theory (no free parameters)")
    if labels:
        ax.set_xlabel("cycle duration T (ms)")
        ax.set_ylabel(r"$\sigma^2_{\varphi}$ (rad$^2$)")
    ax.set_ylim(bottom=0.0)
    ax.set_title(title or "Geometric dephasing against evolution time",
                 fontsize=10)
    ax.legend(fontsize=8, loc="upper right")

    inset = ax.inset_axes([0.50, 0.28, 0.45, 0.38])
    inset.errorbar(t, nu, yerr=nu_se, fmt="o", color=_DATA, ms=3, capsize=1.5)
    inset.plot(t, np.exp(-8.0 * th), "-", color=_THEORY, lw=1.0)
    inset.set_ylabel(r"$\nu_{\rm rel}$", fontsize=7)
    inset.set_xlabel("T (ms)", fontsize=7)
    inset.tick_params(labelsize=6)
    inset.grid(True, linestyle=":", alpha=0.4)
    fig.tight_layout()
    return fig


def save_figure(fig, path) -> None:
    """Write a vector image without timestamps (deterministic bytes)."""
    path = str(path)
    if not path.endswith((".svg", ".pdf")):
        raise SchemaError("output must be a vector image (.svg or .pdf)")
    fig.savefig(path, format=path.rsplit(".", 1)[1], metadata={"Date": None})
    plt.close(fig)
