"""Plots from the CSVs the `sgtm` binary writes. Reads nothing else.

    python scripts/figures.py tradeoff  RUN/analysis/tradeoff-*/tradeoff.csv ... -o tradeoff.png
    python scripts/figures.py sweep     SWEEP/sweep.csv -o sweep.png
    python scripts/figures.py leakage   RUN/analysis/leakage-*/leakage_curve.csv -o leakage.png
    python scripts/figures.py gradnorms RUN/analysis/gradnorms-*/gradnorms.csv -o gradnorms.png
    python scripts/figures.py pertoken  RUN/analysis/pertoken-*/histogram.csv ... -o pertoken.png
    python scripts/figures.py attack    DERIVED/*.attack-finetune-*/attack.csv ... -o attack.png

Each input gets a legend entry named after its path.
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def label(path):
    p = Path(path)
    # run directories are the informative part of report paths
    for parent in p.parents:
        if parent.parent.name in ("runs", "sweeps"):
            return parent.name
    return str(p.parent.name)


def tradeoff(ax, paths):
    for path in paths:
        df = pd.read_csv(path)
        cal = df["loss_forget_calibrated"].notna().all()
        x = df["loss_retain_calibrated"] if cal else df["loss_retain"]
        y = df["loss_forget_calibrated"] if cal else df["loss_forget"]
        ax.plot(x, y, marker="o", label=label(path))
    ax.set_xlabel("retain loss")
    ax.set_ylabel("forget loss")


def sweep(ax, paths):
    for path in paths:
        df = pd.read_csv(path)
        ax.plot(df["value"].astype(str), df["loss_forget_test"], marker="o", label=f"{label(path)} forget")
        ax.plot(df["value"].astype(str), df["loss_retain_test"], marker="s", label=f"{label(path)} retain")
    ax.set_xlabel("sweep point")
    ax.set_ylabel("final loss")


def leakage(ax, paths):
    for path in paths:
        df = pd.read_csv(path).sort_values("forget_tokens")
        ax.plot(df["forget_tokens"], df["forget_loss"], marker="o", label=label(path))
    ax.set_xscale("symlog")
    ax.set_xlabel("forget tokens seen")
    ax.set_ylabel("forget loss")


def gradnorms(ax, paths):
    for path in paths:
        df = pd.read_csv(path)
        for group in ("forget", "retain"):
            for domain, style in (("forget", "-"), ("retain", "--")):
                xs = df.loc[df["domain"] == domain, group]
                ax.hist(xs, bins=30, histtype="step", linestyle=style, density=True,
                        label=f"{group} params, {domain} data")
    ax.set_xlabel("|grad| / |theta|")
    ax.set_ylabel("density")


def pertoken(ax, paths):
    for path in paths:
        df = pd.read_csv(path)
        mid = (df["lo"] + df["hi"]) / 2
        ax.step(mid, df["count"], where="mid", label=f"{label(path)} raw")
        if df["count_calibrated"].notna().all():
            ax.step(mid, df["count_calibrated"], where="mid", label=f"{label(path)} calibrated")
    ax.set_xlabel("per-token forget loss")
    ax.set_ylabel("tokens")


def attack(ax, paths):
    for path in paths:
        df = pd.read_csv(path)
        ax.plot(df["step"], df["forget_loss"], label=label(path))
    ax.set_xlabel("fine-tuning step")
    ax.set_ylabel("forget loss")


PLOTS = {f.__name__: f for f in (tradeoff, sweep, leakage, gradnorms, pertoken, attack)}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("kind", choices=sorted(PLOTS))
    ap.add_argument("csv", nargs="+")
    ap.add_argument("-o", "--output", default="figure.png")
    args = ap.parse_args()
    fig, ax = plt.subplots(figsize=(6, 4))
    PLOTS[args.kind](ax, args.csv)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)


if __name__ == "__main__":
    main()
