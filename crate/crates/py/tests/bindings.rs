// SPDX-License-Identifier: Apache-2.0

use pyo3::ffi::c_str;
use pyo3::prelude::*;

fn with_module<F: FnOnce(Python<'_>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "prlsim_py").unwrap();
        prlsim_py::prlsim_py(&m).unwrap();
        py.import("sys").unwrap().getattr("modules").unwrap().set_item("prlsim_py", m).unwrap();
        f(py)
    });
}

#[test]
fn module_round_trip() {
    with_module(|py| {
        py.run(
            c_str!(
                r#"
import prlsim_py as ps
trace = ps.generate("wwrr", 10, iters=3)
assert [op for (_, _, _, op) in trace[:20]] == ["W"] * 10 + ["R"] * 10
assert ps.oracle_wss(trace, 6) == 10

s = ps.Scenario(pattern="wi", wi=100, pages=2000, iters=2, mode="pml")
r = s.run()
assert r["tracker"]["full_events"] == 3 and r["overhead_percent"] > 0
assert "mode = pml" in s.render()

try:
    ps.Scenario.load("/nonexistent/x.scn")
except OSError:
    pass
else:
    raise AssertionError("missing file accepted")

def flaky(m):
    raise RuntimeError("boom")
try:
    ps.estimate_epsilon(flaky, 100.0)
except RuntimeError:
    pass
else:
    raise AssertionError("callback error swallowed")
"#
            ),
            None,
            None,
        )
        .unwrap_or_else(|e| panic!("{e}"));
    });
}
