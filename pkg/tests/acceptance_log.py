"""Collects one PASS/FAIL line per acceptance criterion for the end-of-run summary."""

LINES = {}


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    LINES[number] = line
    print(line)
    return ok
