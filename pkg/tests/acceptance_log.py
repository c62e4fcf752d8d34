"""Pass/fail lines of the acceptance criteria, printed at the end of the run."""

RESULTS: dict[int, tuple[str, bool, str]] = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[number] = (title, bool(ok), detail)


def summary_lines() -> list[str]:
    return [f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
            for n, (title, ok, detail) in sorted(RESULTS.items())]
