"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

RESULTS: dict = {}


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    RESULTS[number] = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {title}: {detail}"
    print(RESULTS[number])
    return ok
