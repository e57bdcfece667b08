from pathlib import Path

import pytest

DATA = Path(__file__).resolve().parents[1] / "data"


@pytest.fixture(scope="session")
def mutag_dir() -> Path:
    path = DATA / "MUTAG"
    if not (path / "MUTAG_A.txt").exists():
        pytest.skip("MUTAG text files not present under data/MUTAG")
    return path


@pytest.fixture(scope="session")
def cora_dir() -> Path:
    path = DATA / "cora"
    if not all((path / f).exists() for f in ("edges.txt", "features.txt", "labels.txt")):
        pytest.skip("Cora in node format (edges/features/labels.txt) not present under data/cora")
    return path


def write_files(root: Path, files: dict[str, str]) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (root / name).write_text(text, encoding="utf-8")
    return root


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
