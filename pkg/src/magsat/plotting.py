"""PNG renderings of the figure tables (matplotlib, non-interactive backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.8),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
    "svg.hashsalt": "magsat",
}


def _save(fig, path):
    # fixed metadata so reruns produce identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def error_figure(trajectories, labels, path, dt=10e-6):
    """|x_d - x_ref_d| and |x_q - x_ref_q| versus time, one line per controller."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 1, sharex=True)
        for tr, lab in zip(trajectories, labels):
            t = np.arange(len(tr)) * dt * 1e3
            err = np.abs(tr.states - tr.x_ref)
            axes[0].plot(t, err[:, 0], label=lab, lw=1.2)
            axes[1].plot(t, err[:, 1], label=lab, lw=1.2)
        axes[0].set_ylabel(r"$|\Delta I_d|$ [A]")
        axes[1].set_ylabel(r"$|\Delta I_q|$ [A]")
        axes[1].set_xlabel("time [ms]")
        axes[0].legend(loc="upper right")
        fig.tight_layout()
        _save(fig, path)


def input_figure(trajectories, labels, path, dt=10e-6):
    """Input deviations from the equilibrium input versus time."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 1, sharex=True)
        for tr, lab in zip(trajectories, labels):
            t = np.arange(len(tr)) * dt * 1e3
            du = tr.inputs - tr.u_ref
            axes[0].plot(t, du[:, 0], label=lab, lw=1.2)
            axes[1].plot(t, du[:, 1], label=lab, lw=1.2)
        axes[0].set_ylabel(r"$\Delta V$ [V]")
        axes[1].set_ylabel(r"$\Delta\delta$ [rad]")
        axes[1].set_xlabel("time [ms]")
        axes[0].legend(loc="upper right")
        fig.tight_layout()
        _save(fig, path)


def comparison_figure(comparison, path, i_max=None):
    """Grid-side currents of the full-order model against the simplified model."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 1, sharex=True)
        t = comparison.t * 1e3
        for k, name in enumerate(("d", "q")):
            axes[0].plot(t, comparison.simplified[:, k], lw=1.2, label=f"simplified $I_{name}$")
            axes[0].plot(t, comparison.full[:, k], "--", lw=1.2, label=f"full-order $I_{{g{name}}}$")
        axes[1].plot(t, np.hypot(*comparison.simplified.T), lw=1.2, label="simplified")
        axes[1].plot(t, np.hypot(*comparison.full.T), "--", lw=1.2, label="full-order")
        if i_max is not None:
            axes[1].axhline(i_max, color="k", lw=0.8, ls=":", label=r"$I_{max}$")
        axes[0].set_ylabel("current [A]")
        axes[1].set_ylabel("magnitude [A]")
        axes[1].set_xlabel("time [ms]")
        axes[0].legend(loc="lower right", ncol=2)
        axes[1].legend(loc="lower right")
        fig.tight_layout()
        _save(fig, path)
