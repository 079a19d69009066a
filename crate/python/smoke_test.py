# SPDX-License-Identifier: Apache-2.0
"""Smoke test for the prlsim_py extension module.

Build first:  maturin develop -m crates/py/Cargo.toml --release
"""

import prlsim_py as ps


def main():
    trace = ps.generate("rwrw", 64, iters=2, seed=3)
    assert len(trace) == 2 * 64 * 2
    assert trace[0] == (0, 0, 0, "R") and trace[1][3] == "W"
    assert ps.oracle_wss(trace, 4) == 64
    assert ps.oracle_wss(trace, 5) == 0

    t = ps.Tracker(mode="paml", buffer_entries=4, handler_latency_ns=0)
    outcomes = [t.observe(g, g)[0] for g in range(5)]
    assert outcomes == ["logged", "logged", "logged", "full", "dropped"], outcomes
    t.reset_index()
    assert t.index == 3
    stats = t.stats()
    assert (stats["logged"], stats["full_events"], stats["missed_gpas"]) == (3, 1, 1)

    pml = ps.Tracker(mode="pml", buffer_entries=512)
    assert pml.observe(1, 0, op="R")[0] == "ignored"
    assert pml.observe(1, 1, op="W", dirty_set=True)[0] == "logged"

    s = ps.Scenario(pattern="rrww", pages=1000, hot_pages=100, cold_prefix=True,
                    iters=100, mu="0.2ms", omega="0.8ms")
    rows = {r["estimator"]: r for r in s.compare()}
    assert rows["Pml"]["wss_pages"] == 1000, rows
    assert abs(rows["Prl"]["wss_pages"] - 100) <= 1, rows
    assert rows["Oracle"]["error_pages"] == 0

    report = s.run()
    assert report["overhead_percent"] == 0.0
    series = s.dist()["series"]
    assert all(a["dist"] <= b["dist"] for a, b in zip(series, series[1:]))

    mb = 1024.0 * 1024.0
    eps = ps.estimate_epsilon(lambda m: m >= 300 * mb, 2048 * mb)
    assert abs(eps / mb - 2048 * 0.95 ** 37) < 0.01

    try:
        ps.Scenario(pattern="zigzag")
    except ValueError:
        pass
    else:
        raise AssertionError("bad pattern accepted")

    print("prlsim_py smoke test passed")


if __name__ == "__main__":
    main()
