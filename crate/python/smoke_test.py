#!/usr/bin/env python3
"""Smoke test for the atd_py bindings.

Builds nothing itself: it picks up the cdylib from a prior
`cargo build -p atd-py` (debug or release), imports it, and exercises the
module surface end to end. Run from anywhere:

    cargo build -p atd-py
    python3 python/smoke_test.py
"""

import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def import_module():
    candidates = [
        ROOT / "target" / profile / "libatd_py.so"
        for profile in ("debug", "release")
    ]
    built = [c for c in candidates if c.exists()]
    if not built:
        sys.exit("no libatd_py.so found; run `cargo build -p atd-py` first")
    src = max(built, key=lambda c: c.stat().st_mtime)
    tmp = Path(tempfile.mkdtemp(prefix="atd_py_"))
    shutil.copy2(src, tmp / "atd_py.so")
    sys.path.insert(0, str(tmp))
    import atd_py

    return atd_py


def main():
    atd_py = import_module()

    inst = atd_py.Instance.power(d=10, m=20, p=2, seed=7, target_norm=1.0)
    assert inst.label() == "power_d10_m20_p2_s7"
    desc = inst.descriptor()
    assert desc["family"] == "power"
    assert desc["L_p"] == 40.0
    assert desc["f_star"] == 0.0

    report = atd_py.run(inst, method="atd", iters=60, epsilon=1e-300, strict=True)
    assert report["violations"] == [], report["violations"]
    assert report["final_gap"] < 1e-9, report["final_gap"]
    assert report["max_probes"] <= report["probe_cap"]
    assert report["termination"]["kind"] == "CompletedIterations"

    rows = report["records"]
    assert len(rows) == 61 and rows[0]["k"] == 0
    for row in rows[1:]:
        assert row["gap"] <= row["certificate"] * (1 + 1e-6)
        assert 0.5 - 1e-9 <= row["zeta_k"] <= 2.0 / 3.0 + 1e-9

    est = atd_py.slope(rows, k_min=10, k_max=60)
    assert est["slope"] <= -3.0, est
    assert est["points"] >= 10

    tensor = atd_py.run(inst, method="tensor", iters=60, epsilon=1e-300)
    assert tensor["final_gap"] > 3.0 * report["final_gap"], (
        "unaccelerated tensor steps should trail the accelerated run: "
        f'{tensor["final_gap"]} vs {report["final_gap"]}'
    )

    first = atd_py.Instance.power(d=10, m=20, p=1, seed=7, target_norm=1.0)
    agd = atd_py.run(first, method="agd", iters=60, epsilon=1e-300)
    gd = atd_py.run(first, method="gd", iters=60, epsilon=1e-300)
    assert agd["final_gap"] < gd["final_gap"], "momentum should beat plain descent"

    check = atd_py.validate(inst, radius=1.0, samples=100, seed=0)
    assert check["ok"], check["failures"]
    assert check["fd_gradient_error"] <= 1e-5

    lse = atd_py.Instance.logsumexp(d=6, m=12, p=3, seed=2)
    third = atd_py.run(lse, method="atd", iters=30, epsilon=1e-300, strict=True)
    assert third["violations"] == []
    assert third["final_gap"] <= 1e-8

    assert atd_py.envelope(100, 2, 40.0, 1.0) < atd_py.envelope(10, 2, 40.0, 1.0)
    assert atd_py.probe_cap(2, 40.0, 1e-8 * 40.0, norm_bound=1.0) >= 8

    try:
        atd_py.Instance.power(p=5)
    except ValueError:
        pass
    else:
        raise AssertionError("order 5 should be rejected")

    print(
        "smoke test passed: atd gap {:.3e}, tensor gap {:.3e}, slope {:.2f}".format(
            report["final_gap"], tensor["final_gap"], est["slope"]
        )
    )


if __name__ == "__main__":
    main()
