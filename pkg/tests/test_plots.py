import numpy as np
import pytest

from rl3lab.plots import (convergence_iteration, curves_csv, efficiency_fraction, emit_plots, match_iteration,
                          read_log, rolling_mean)
from rl3lab.training import LOG_FIELDS


def test_rolling_mean():
    np.testing.assert_allclose(rolling_mean([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
    assert rolling_mean([], 3).size == 0


def test_efficiency_half():
    i = np.arange(60)
    b = np.minimum(i / 20, 1.0)
    a = np.minimum(i / 10, 1.0)
    e = efficiency_fraction(a, b, window=1)
    assert e["baseline_convergence"] == 20 and e["match_iteration"] == 10 and e["fraction"] == 0.5


def test_never_matching_gives_nan():
    e = efficiency_fraction(np.zeros(30), np.ones(30) * 5, window=1)
    assert e["match_iteration"] is None and np.isnan(e["fraction"])
    assert match_iteration([0, 1], 10.0) is None


def test_convergence_of_synthetic_curve():
    r = np.concatenate([np.linspace(0, 10, 50), np.full(100, 10.0)])
    for w in (1, 5, 10):
        means = [np.mean(r[max(0, j - w + 1):j + 1]) for j in range(len(r))]
        expect = next(j for j, m in enumerate(means) if m >= 0.99 * max(means))
        assert convergence_iteration(r, window=w) == expect
    assert convergence_iteration(r, window=10) == 56
    assert convergence_iteration([], window=3) is None


def test_empty_log_gives_header_only_csv(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text(",".join(LOG_FIELDS) + "\n")
    log = read_log(p)
    assert log["mean_return"].size == 0
    files = emit_plots({"rl3": p}, out_dir=tmp_path / "plots", baseline=None)
    assert (tmp_path / "plots" / "training_curves.csv").read_text().strip() == "iteration,rl3"
    assert all(f.exists() for f in files)


def test_emit_plots_with_logs(tmp_path):
    paths = {}
    for name, slope in (("rl2", 0.05), ("rl3", 0.1)):
        p = tmp_path / f"{name}.csv"
        r = np.minimum(np.arange(80) * slope, 1.0)
        p.write_text(",".join(LOG_FIELDS) + "\n" + "".join(
            ",".join([str(i), repr(float(v))] + ["0"] * (len(LOG_FIELDS) - 2)) + "\n" for i, v in enumerate(r)))
        paths[name] = p
    emit_plots(paths, out_dir=tmp_path / "out", window=1)
    eff = (tmp_path / "out" / "efficiency.csv").read_text().splitlines()
    assert eff[1].split(",")[:2] == ["rl3", "rl2"]
    assert float(eff[1].split(",")[-1]) == pytest.approx(10 / 20)
    assert (tmp_path / "out" / "training_curves.svg").read_text().startswith("<?xml")
    assert curves_csv({}).strip() == "iteration"
