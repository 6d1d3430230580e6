"""Prints one pass/fail line per acceptance criterion after the run.

Any test named test_criterion_NN_* feeds the line for criterion NN; the
criterion passes only if every one of its tests passed.
"""

import re
from collections import defaultdict

_CRITERIA = {
    1: "quantizer algebra: idempotence, symmetry, monotonicity, "
       "error bound, grid membership (10^4 cases each, < 5 s)",
    2: "level arithmetic: 2^b - 1 level counts and effective bit widths",
    3: "averaging grid exactness and distinct-level budget",
    4: "plane math: orthonormal basis, anchor reconstruction, "
       "collinear rejection",
    5: "quantized surface grid residency and anchor-loss agreement",
    6: "analytic gradients match finite differences in both regimes",
    7: "shadow-weight semantics: applied = quantize(shadow) after "
       "every step; tiny steps leave applied unchanged",
    8: "schedule rules: cycle bounds, capture spacing, fine-tune decay",
    9: "end-to-end trends over 3 seeds at desk scale",
    10: "determinism and persistence: byte-identical reruns, exact "
        "round trips, tamper rejection",
    11: "IDX conformance: byte-level fixtures and distinct errors",
}

_results: dict[int, list[bool]] = defaultdict(list)
_NAME = re.compile(r"test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    num = int(m.group(1))
    if report.when == "call":
        _results[num].append(report.passed)
    elif report.failed or report.skipped:
        _results[num].append(False)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        if num not in _results:
            status = "NOT RUN"
        elif all(_results[num]):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {num:2d}: {status:7s} {_CRITERIA[num]}")
