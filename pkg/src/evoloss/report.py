"""CSV tables behind the figures: weight trajectories, final-genome heatmap,
fitness scatter with correlations, and a per-strategy summary."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .container import atomic_write_text
from .model import TaskKey


class HistoryError(ValueError):
    pass


def _num(v):
    if isinstance(v, str) and v in ("inf", "-inf", "nan"):
        return float(v)
    return v


def read_history(path) -> list[dict]:
    records = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise HistoryError(f"{path}:{n}: not valid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict) or not {"round", "genome", "fitness"} <= rec.keys():
            raise HistoryError(f"{path}:{n}: record needs round, genome and fitness")
        if not isinstance(rec["genome"], list):
            raise HistoryError(f"{path}:{n}: genome must be a list")
        records.append({k: _num(v) for k, v in rec.items()})
    return records


def ranks(x) -> np.ndarray:
    """1-based ranks with ties averaged."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    r = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        r[order[i:j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    return r


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("pearson needs two equal-length samples of size >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    return float(dx @ dy / denom) if denom > 0 else math.nan


def spearman(x, y) -> float:
    return pearson(ranks(x), ranks(y))


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def trajectory_rows(history, keys):
    rows = []
    for e, rec in enumerate(history):
        if len(rec["genome"]) != len(keys):
            raise HistoryError(f"record {e + 1}: genome length {len(rec['genome'])} != {len(keys)} keys")
        for key, w in zip(keys, rec["genome"]):
            rows.append([e, rec["round"], key, repr(float(w)), repr(float(rec["fitness"]))])
    return rows


def heatmap_rows(genome, keys):
    rows = []
    for key, w in zip(keys, genome):
        k = TaskKey.parse(key)
        task = f"distill{k.layer}" if k.task == "distill" else k.task
        rows.append([k.modality, task, key, repr(float(w))])
    return rows


def scatter_rows(history):
    return [[e, repr(float(r["weak_fitness"])), repr(float(r["elo_fitness"]))]
            for e, r in enumerate(history)
            if "weak_fitness" in r and "elo_fitness" in r
            and math.isfinite(r["weak_fitness"]) and math.isfinite(r["elo_fitness"])]


def summary_rows(histories):
    rows = []
    for hist in histories:
        if not hist:
            continue
        f = np.array([r["fitness"] for r in hist], dtype=np.float64)
        finite = f[np.isfinite(f)]
        strategy = hist[0].get("strategy", "unknown")
        seed = hist[0].get("seed", "")
        rows.append([strategy, seed, len(f), repr(float(f.max())),
                     repr(float(finite.mean())) if len(finite) else "nan",
                     repr(float(finite.std())) if len(finite) else "nan"])
    return rows


def write_report(out_dir, history, keys, extra_histories=()) -> dict:
    """Write report/*.csv under ``out_dir``; returns {name: path}."""
    if not history:
        raise HistoryError("history is empty")
    out = Path(out_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted(keys)
    best = max(history, key=lambda r: r["fitness"])
    files = {
        "weights_trajectory.csv": _csv(trajectory_rows(history, keys),
                                       ["evaluation", "round", "key", "weight", "fitness"]),
        "heatmap.csv": _csv(heatmap_rows(best["genome"], keys), ["modality", "task", "key", "weight"]),
        "strategy_summary.csv": _csv(summary_rows([history, *extra_histories]),
                                     ["strategy", "seed", "evaluations", "best", "mean", "std"]),
    }
    pairs = scatter_rows(history)
    files["scatter.csv"] = _csv(pairs, ["evaluation", "weak_fitness", "elo_fitness"])
    if len(pairs) >= 2:
        weak = [float(p[1]) for p in pairs]
        elo = [float(p[2]) for p in pairs]
        corr = [[len(pairs), repr(pearson(elo, weak)), repr(spearman(elo, weak))]]
    else:
        corr = [[len(pairs), "nan", "nan"]]
    files["correlation.csv"] = _csv(corr, ["n", "pearson", "spearman"])
    paths = {}
    for name, text in files.items():
        atomic_write_text(out / name, text)
        paths[name] = out / name
    return paths
