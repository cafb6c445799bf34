"""One line per acceptance criterion, printed in the pytest terminal summary."""
from contextlib import contextmanager

LINES: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    details: list[str] = []
    try:
        yield details
    except BaseException:
        LINES.append(f"criterion {number:2d} FAIL  {title}: {'; '.join(details)}")
        raise
    LINES.append(f"criterion {number:2d} PASS  {title}: {'; '.join(details)}")
