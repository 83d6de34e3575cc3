"""Plot data: training curves, score bars and meta-training efficiency, as CSV plus SVG."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

CONVERGENCE_TOL = 0.01


def read_log(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        return {}
    header, body = rows[0], rows[1:]
    return {h: np.array([float(r[i]) for r in body]) for i, h in enumerate(header)}


def rolling_mean(x, window: int) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` entries average what is available."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _within(value, target, tol) -> np.ndarray:
    return value >= target - tol * abs(target)


def max_sustained(returns, window: int = 10) -> float:
    return float(rolling_mean(returns, window).max())


def convergence_iteration(returns, window: int = 10, tol: float = CONVERGENCE_TOL) -> int | None:
    """First iteration whose rolling mean is within ``tol`` (relative) of the max rolling mean."""
    r = rolling_mean(returns, window)
    if r.size == 0:
        return None
    return int(np.flatnonzero(_within(r, r.max(), tol))[0])


def match_iteration(returns, target: float, window: int = 10, tol: float = CONVERGENCE_TOL) -> int | None:
    r = rolling_mean(returns, window)
    hit = np.flatnonzero(_within(r, target, tol))
    return int(hit[0]) if hit.size else None


def efficiency_fraction(returns_a, returns_b, window: int = 10, tol: float = CONVERGENCE_TOL) -> dict:
    """Iterations A needs to reach B's converged return, divided by B's iterations to converge."""
    conv_b = convergence_iteration(returns_b, window, tol)
    target = max_sustained(returns_b, window) if conv_b is not None else float("nan")
    match_a = match_iteration(returns_a, target, window, tol) if conv_b is not None else None
    frac = float("nan") if match_a is None or not conv_b else match_a / conv_b
    return {"match_iteration": match_a, "baseline_convergence": conv_b, "target": target, "fraction": frac}


def curves_csv(logs: dict[str, dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    names = sorted(logs)
    w.writerow(["iteration"] + names)
    n = max((len(l.get("mean_return", [])) for l in logs.values()), default=0)
    for i in range(n):
        row = [i]
        for name in names:
            r = logs[name].get("mean_return", [])
            row.append(repr(float(r[i])) if i < len(r) else "")
        w.writerow(row)
    return buf.getvalue()


def scores_csv(reports: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["name", "mean", "standard_error", "oracle_fraction", "n"])
    for name in sorted(reports):
        r = reports[name]
        w.writerow([name, repr(r.mean), repr(r.standard_error), repr(r.oracle_fraction), r.n])
    return buf.getvalue()


def efficiency_csv(logs: dict[str, dict], baseline: str | None, window: int = 10) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["algorithm", "baseline", "match_iteration", "baseline_convergence", "fraction"])
    if baseline in logs:
        b = logs[baseline].get("mean_return", [])
        for name in sorted(logs):
            if name != baseline:
                e = efficiency_fraction(logs[name].get("mean_return", []), b, window)
                w.writerow([name, baseline, e["match_iteration"], e["baseline_convergence"], e["fraction"]])
    return buf.getvalue()


def _svg_curves(logs, path, window):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    plotted = False
    for name in sorted(logs):
        r = logs[name].get("mean_return", [])
        if len(r):
            ax.plot(np.arange(len(r)), rolling_mean(r, window), label=name)
            plotted = True
    ax.set_xlabel("PPO iteration")
    ax.set_ylabel(f"mean meta-episode return (rolling {window})")
    if plotted:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _svg_scores(reports, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = sorted(reports)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, [reports[n].mean for n in names], yerr=[reports[n].standard_error for n in names])
    ax.set_ylabel("mean return")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_plots(logs: dict[str, str | Path], reports: dict | None = None, out_dir="plots",
               baseline: str | None = "rl2", window: int = 10) -> list[Path]:
    """Write training_curves.csv, scores.csv, efficiency.csv and SVG renderings to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = {name: read_log(p) for name, p in logs.items()}
    reports = reports or {}
    written = []
    for fname, text in (("training_curves.csv", curves_csv(data)), ("scores.csv", scores_csv(reports)),
                        ("efficiency.csv", efficiency_csv(data, baseline, window))):
        (out / fname).write_text(text)
        written.append(out / fname)
    _svg_curves(data, out / "training_curves.svg", window)
    written.append(out / "training_curves.svg")
    if reports:
        _svg_scores(reports, out / "scores.svg")
        written.append(out / "scores.svg")
    return written
