"""CSV tables and figures for a finished study.

Files written by :func:`emit_report` (UTF-8, comma separated, ``.`` decimal,
floats with 12 significant digits):

``transfer_matrix.csv``
    ``target_domain, <source_1>, ..., <source_n>``; cells are mean surface
    Dice (rows are targets, columns are sources).
``transfer_matrix_std.csv``
    Same layout, standard deviations.
``trend.csv``
    ``level, method, mean_d_r, n_pairs, n_undefined``.
``trend_pairs.csv``
    ``level, method, source_domain, target_domain, d_r``.
``winners.csv``
    ``level, method, wins, significant_wins, pairs``.
``winners_pairs.csv``
    ``level, source_domain, target_domain, winner, significant``.
``trend.png`` / ``winners.png``
    Trend lines with per-pair strip plots; stacked win bars (hatched part
    is the non-significant share).
"""

from __future__ import annotations

import csv
from pathlib import Path

__all__ = ["emit_report", "fmt"]


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


def _write(path: Path, header, rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def _write_tables(matrix, trends, winners, out: Path) -> list[Path]:
    files = []
    doms = list(matrix.domains)
    for name, table in (("transfer_matrix.csv", matrix.mean), ("transfer_matrix_std.csv", matrix.std)):
        rows = [[t] + [table[s][t] for s in doms] for t in doms]
        files.append(_write(out / name, ["target_domain"] + doms, rows))

    trend_rows, pair_rows = [], []
    for (level, method), cell in trends.items():
        trend_rows.append([level, method, cell.mean_d_r, len(cell.per_pair), len(cell.excluded)])
        for (s, t), v in sorted(cell.per_pair.items()):
            pair_rows.append([level, method, s, t, v])
    files.append(_write(out / "trend.csv", ["level", "method", "mean_d_r", "n_pairs", "n_undefined"], trend_rows))
    files.append(_write(out / "trend_pairs.csv", ["level", "method", "source_domain", "target_domain", "d_r"], pair_rows))

    win_rows, win_pairs = [], []
    for level, lw in winners.items():
        for method, n in lw.counts.items():
            win_rows.append([level, method, n, lw.significant[method], lw.total])
        for w in lw.pairs:
            win_pairs.append([level, w.source, w.target, w.winner, w.significant])
    files.append(_write(out / "winners.csv", ["level", "method", "wins", "significant_wins", "pairs"], win_rows))
    files.append(_write(
        out / "winners_pairs.csv", ["level", "source_domain", "target_domain", "winner", "significant"], win_pairs,
    ))
    return files


def _plot(trends, winners, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    levels = list(dict.fromkeys(level for level, _ in trends))
    methods = list(dict.fromkeys(method for _, method in trends))
    x = np.arange(len(levels))
    files = []

    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(1, len(methods))
    for i, method in enumerate(methods):
        means = [trends[(lv, method)].mean_d_r for lv in levels]
        ys = [np.nan if m is None else m for m in means]
        line, = ax.plot(x, ys, marker="o", label=method)
        for j, lv in enumerate(levels):
            vals = list(trends[(lv, method)].per_pair.values())
            offset = (i - (len(methods) - 1) / 2) * width
            ax.scatter(np.full(len(vals), x[j] + offset), vals, s=8, alpha=0.4, color=line.get_color())
    ax.set_xticks(x, levels)
    ax.set_xlabel("target data availability")
    ax.set_ylabel("gap closure")
    ax.axhline(0, color="grey", lw=0.5)
    ax.legend()
    fig.tight_layout()
    files.append(out / "trend.png")
    fig.savefig(files[-1], metadata={"Software": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    wlevels = list(winners)
    bottom = np.zeros(len(wlevels))
    for method in methods:
        sig = np.array([winners[lv].significant.get(method, 0) for lv in wlevels], dtype=float)
        tot = np.array([winners[lv].counts.get(method, 0) for lv in wlevels], dtype=float)
        bars = ax.bar(np.arange(len(wlevels)), sig, bottom=bottom, label=method)
        ax.bar(np.arange(len(wlevels)), tot - sig, bottom=bottom + sig,
               color=bars.patches[0].get_facecolor() if bars.patches else None, alpha=0.4, hatch="//")
        bottom += tot
    ax.set_xticks(np.arange(len(wlevels)), wlevels)
    ax.set_ylabel("pairs won")
    ax.legend()
    fig.tight_layout()
    files.append(out / "winners.png")
    fig.savefig(files[-1], metadata={"Software": None})
    plt.close(fig)
    return files


def emit_report(matrix, trends, winners, out_dir, plots: bool = True) -> list[Path]:
    """Write report tables (and figures) into ``out_dir``; returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = _write_tables(matrix, trends, winners, out)
        if plots:
            files += _plot(trends, winners, out)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return files
