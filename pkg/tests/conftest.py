import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def desk_run():
    from cogdet.experiment import run_desk_experiment

    return run_desk_experiment()


@pytest.fixture(scope="session")
def tiny_backbone():
    from cogdet.backbone import build_backbone

    return build_backbone("small-conv", seed=3, widths=(4, 6, 8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> list of (passed, detail); printed once per criterion at the end
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE.setdefault(number, []).append((bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        results = ACCEPTANCE[number]
        failed = [d for ok, d in results if not ok]
        status = "PASS" if not failed else "FAIL"
        detail = "; ".join(failed) if failed else "; ".join(d for _, d in results)
        terminalreporter.write_line(f"criterion {number}: {status} - {detail}")
