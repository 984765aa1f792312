"""Draw a `rollsim run-sim --timeline` CSV as a Gantt chart.

usage: python3 plot_timeline.py timeline.csv out.png
"""
import csv
import sys

import matplotlib.pyplot as plt

COLORS = {"rollout": "tab:blue", "reward": "tab:green", "train": "tab:orange", "switch": "tab:red"}


def main(path, out):
    rows = list(csv.DictReader(open(path)))
    workers = sorted({r["worker_id"] for r in rows}, key=lambda w: (w.split("-")[0], int(w.split("-")[1])))
    y = {w: i for i, w in enumerate(workers)}
    fig, ax = plt.subplots(figsize=(12, 0.25 * len(workers) + 1))
    for r in rows:
        if r["activity"] == "idle":
            continue
        start, end = float(r["start"]), float(r["end"])
        ax.barh(y[r["worker_id"]], end - start, left=start, color=COLORS.get(r["activity"], "gray"), height=0.8)
    ax.set_yticks(range(len(workers)), workers, fontsize=6)
    ax.invert_yaxis()
    ax.set_xlabel("seconds")
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in COLORS.values()]
    ax.legend(handles, COLORS.keys(), loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(out, dpi=150)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
