"""Collects one summary line per acceptance criterion for the terminal report."""

LINES = {}


def record(criterion, passed, detail, status=None):
    status = status or ("PASS" if passed else "FAIL")
    LINES[criterion] = f"criterion {criterion:>2}: {status}  {detail}"
