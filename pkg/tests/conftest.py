import contextlib
import time

# criterion number -> (passed, summary line); filled by the acceptance tests
ACCEPTANCE = {}


@contextlib.contextmanager
def criterion(number, title):
    """Record a pass/fail line for one acceptance criterion."""
    start = time.perf_counter()
    notes = []
    try:
        yield notes
    except BaseException as exc:
        detail = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        ACCEPTANCE[number] = (False, f"FAIL  {number:>2}. {title} ({detail})")
        raise
    else:
        extra = "; ".join(notes)
        elapsed = time.perf_counter() - start
        ACCEPTANCE[number] = (True, f"PASS  {number:>2}. {title} [{elapsed:.2f} s]"
                              + (f" {extra}" if extra else ""))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number][1])
