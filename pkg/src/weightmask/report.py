"""Report serialization: ``report.json``, flat CSV tables and optional SVG charts."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np


def _plain(x):
    if isinstance(x, Mapping):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def mean_std(values: Iterable[float]) -> tuple[float, float]:
    v = np.asarray(list(values), dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def aggregate_grids(grids: list[Mapping[str, Mapping[str, float]]]) -> dict:
    """Per (variant, split): mean and std in percent across seeds.

    Every seed must report every cell; a hole is an error rather than a blank.
    """
    variants = list(grids[0])
    out = {}
    for v in variants:
        out[v] = {}
        for s in grids[0][v]:
            try:
                vals = [100.0 * g[v][s] for g in grids]
            except KeyError as exc:
                raise ValueError(f"accuracy cell ({v}, {s}) missing for a seed") from exc
            m, sd = mean_std(vals)
            out[v][s] = {"mean": m, "std": sd, "per_seed": vals}
    return out


def accuracy_rows(agg: Mapping) -> list[dict]:
    return [{"variant": v, "split": s, "mean_pct": c["mean"], "std_pct": c["std"], "n": len(c["per_seed"])}
            for v, splits in agg.items() for s, c in splits.items()]


def sharing_rows(per_layer: Mapping[str, Mapping], label: str = "") -> list[dict]:
    """Plot-ready rows: layer index vs shared fraction (plus the raw counts)."""
    rows = []
    for i, (layer, stats) in enumerate(per_layer.items()):
        row = {"pair": label, "layer_index": i, "layer": layer}
        row.update({k: v for k, v in stats.items() if not isinstance(v, (dict, list))})
        rows.append(row)
    return rows


def matrix_rows(matrix, name: str = "delta") -> list[dict]:
    m = np.asarray(matrix)
    return [{"row": i, "col": j, name: float(m[i, j])} for i in range(m.shape[0]) for j in range(m.shape[1])]


def write_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


def write_report(out_dir, report: Mapping, tables: Mapping[str, list[dict]] | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    with path.open("w") as f:
        json.dump(_plain(report), f, indent=2, allow_nan=True)
    for name, rows in (tables or {}).items():
        if rows:
            write_csv(out / f"{name}.csv", _plain(rows))
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def render_svgs(out_dir) -> list[Path]:
    """Simple SVG charts for every sharing / confusion CSV in ``out_dir``.

    Needs matplotlib; returns an empty list if it is not installed.
    """
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return []
    out = Path(out_dir)
    made = []
    for csv_path in sorted(out.glob("*sharing*.csv")):
        rows = read_csv(csv_path)
        if not rows or "shared_fraction" not in rows[0]:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for label in dict.fromkeys(r.get("pair", "") for r in rows):
            pts = [(int(r["layer_index"]), float(r["shared_fraction"])) for r in rows if r.get("pair", "") == label]
            ax.plot(*zip(*pts), marker="o", label=label or None)
        ax.set_xlabel("layer index")
        ax.set_ylabel("shared fraction")
        ax.set_ylim(0, 1.05)
        if len(ax.lines) > 1:
            ax.legend(fontsize=7)
        made.append(_save(fig, csv_path.with_suffix(".svg"), plt))
    for csv_path in sorted(out.glob("*confusion*.csv")):
        rows = read_csv(csv_path)
        if not rows or "delta" not in rows[0]:
            continue
        n = max(int(r["row"]) for r in rows) + 1
        m = np.zeros((n, n))
        for r in rows:
            m[int(r["row"]), int(r["col"])] = float(r["delta"])
        lim = max(abs(m).max(), 1e-12)
        fig, ax = plt.subplots(figsize=(4, 3.5))
        im = ax.imshow(m, cmap="RdBu", vmin=-lim, vmax=lim)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        fig.colorbar(im, ax=ax)
        made.append(_save(fig, csv_path.with_suffix(".svg"), plt))
    return made


def _save(fig, path, plt) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def finite_or_none(x: float):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x
