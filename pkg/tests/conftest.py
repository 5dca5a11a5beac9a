import csv
from pathlib import Path

import pytest

VECTORS = Path(__file__).parent / "vectors" / "crypto_vectors.csv"


@pytest.fixture(scope="session")
def crypto_vectors():
    with VECTORS.open() as fh:
        return [
            (row["op"], bytes.fromhex(row["key_hex"]), bytes.fromhex(row["input_hex"]), bytes.fromhex(row["output_hex"]))
            for row in csv.DictReader(fh)
        ]


FORMULA_GRID = Path(__file__).parent / "vectors" / "formula_grid.csv"


def load_formula_grid():
    """Rows of (n, m, d, p_prime, p, p1) frozen from the extended-precision oracle."""
    with FORMULA_GRID.open() as fh:
        return [
            (int(r["n"]), int(r["m"]), int(r["d"]), float(r["p_prime"]), float(r["p"]), float(r["p1"]))
            for r in csv.DictReader(fh)
        ]


# Acceptance criteria append (number, passed, detail) here; the summary hook
# prints one line per criterion at the end of the run.
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
