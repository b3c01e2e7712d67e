""" general plots for openlandmark

"""

# import libraries
import numpy as np
import matplotlib as mpl

mpl.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

mpl.rcParams["figure.subplot.wspace"] = 0.3


def plot_history(history):
    """Train loss and validation matching loss per epoch, mean kappa on a twin axis."""
    fig, ax = plt.subplots()
    fig.suptitle("Training history")

    ax.plot(history["epoch"], history["train_loss"], "-o", label="train loss")
    ax.plot(history["epoch"], history["val_match_loss"], "-s", label="validation match loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(which="major", color="0.85")

    ax2 = ax.twinx()
    ax2.plot(history["epoch"], history["mean_kappa"], ":", color="0.4", label="mean kappa")
    ax2.set_ylabel("mean kappa")
    ax2.set_yscale("log")

    lines = ax.get_legend_handles_labels()
    lines2 = ax2.get_legend_handles_labels()
    ax.legend(lines[0] + lines2[0], lines[1] + lines2[1], loc="upper right")
    return fig


def plot_sweep(sweep):
    """Validation matching loss against lambda, one line per fold and the fold mean."""
    fig, ax = plt.subplots()
    fig.suptitle("Effect of the regularisation weight")

    ok = sweep[sweep["error"].fillna("") == ""]
    for fold, group in ok.groupby("fold"):
        ax.plot(group["lambda"], group["val_match_loss"], "-o", alpha=0.4, label=f"fold {fold}")
    mean = ok.groupby("lambda")["val_match_loss"].mean()
    ax.plot(mean.index, mean.values, "-k", linewidth=2, label="mean")

    lams = ok["lambda"]
    if len(lams) and (lams > 0).all():
        ax.set_xscale("log")
    elif (lams > 0).any():
        ax.set_xscale("symlog", linthresh=float(lams[lams > 0].min()))
    ax.set_xlabel("lambda")
    ax.set_ylabel("validation match loss")
    ax.grid(which="major", color="0.85")
    ax.legend()
    return fig


def plot_landmarks(images, landmarks, titles=None, anchor_count: int = 0):
    """
    Images side by side with their landmarks overlaid.

    Learned landmarks are numbered by index, anchors are drawn as squares.
    """
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 4), squeeze=False)
    for k, (ax, img, pts) in enumerate(zip(axes[0], images, landmarks)):
        pts = np.asarray(pts)
        n_learned = len(pts) - anchor_count
        ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0)
        ax.scatter(pts[:n_learned, 0], pts[:n_learned, 1], c="tab:red", s=18)
        for i, (x, y) in enumerate(pts[:n_learned]):
            ax.annotate(str(i), (x, y), color="yellow", fontsize=7, xytext=(2, 2), textcoords="offset points")
        if anchor_count:
            ax.scatter(pts[n_learned:, 0], pts[n_learned:, 1], marker="s", c="tab:blue", s=18)
        ax.set_axis_off()
        if titles is not None:
            ax.set_title(titles[k])
    return fig


def save_figure(fig, path):
    fig.savefig(path, format="png", dpi=100)
    plt.close(fig)
    return path
