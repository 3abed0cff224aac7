"""Acceptance verdicts: one PASS/FAIL line per criterion in the terminal summary."""

import pytest

N_CRITERIA = 10
_verdicts: dict[int, list[tuple[bool, str]]] = {}
_acceptance_ran = False


@pytest.fixture
def criterion(request):
    """Record one part of a criterion; a criterion passes only if every part does."""
    global _acceptance_ran
    _acceptance_ran = True

    def record(n: int, ok: bool, detail: str = "") -> bool:
        _verdicts.setdefault(n, []).append((bool(ok), detail))
        print(f"criterion {n} {'PASS' if ok else 'FAIL'} {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        parts = _verdicts.get(n)
        if not parts:
            terminalreporter.write_line(f"criterion {n:2d} FAIL  not reached")
            continue
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts if d)
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {detail}")
