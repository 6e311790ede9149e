import numpy as np
import pytest

from scoreapprox.bounds import (
    check_instance,
    diagonal_instance,
    kappa_growth,
    powerlaw_line_instance,
    verify_bounds_suite,
)
from scoreapprox.report import format_table, parse_report


def by_check(rows):
    return {r[0]: r for r in rows}


def test_suite_passes():
    rows = verify_bounds_suite(n=8, N=4, seeds=(0, 1))
    assert rows and all(r[-1] for r in rows)


def test_diagonal_instance():
    rows = by_check(check_instance(diagonal_instance(8), 2))
    assert rows["diagonal-J-zero"][2] < 1e-12
    assert all(r[-1] for r in rows.values())


def test_powerlaw_slack():
    rows = by_check(check_instance(powerlaw_line_instance(8), 4))
    assert rows["efficiency-bound-psd"][-1]
    assert rows["efficiency-bound-slack"][2] > 1


def test_size_limit():
    with pytest.raises(ValueError):
        verify_bounds_suite(n=13)


def test_kappa_grows_faster():
    rows = kappa_growth()
    ns, kap, nrm = map(np.array, zip(*rows))
    assert np.all(np.diff(kap) > 0)
    kap_slope = np.polyfit(np.log(ns), np.log(kap), 1)[0]
    nrm_slope = np.polyfit(np.log(ns), np.log(nrm), 1)[0]
    assert nrm_slope < kap_slope
    assert np.all(nrm < kap)


def test_table_and_report_parsing():
    text = format_table(["a", "b"], [("x", 1.5), ("y", 2)])
    assert text.splitlines() == ["a\tb", "x\t1.5", "y\t2"]
    rep = parse_report("# header\n[s]\nk = v w\n")
    assert rep == {"s": {"k": "v w"}}
    with pytest.raises(ValueError):
        parse_report("k = v\n")
