import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")
torch.set_num_threads(1)

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, (title, ok, detail, secs) in sorted(acceptance.RESULTS.items(), key=lambda kv: str(kv[0]).zfill(3 if str(kv[0]).isdigit() else 4)):
        terminalreporter.write_line(f"criterion {str(number):>3s} {'PASS' if ok else 'FAIL'}  {title}  ({detail}; {secs:.1f} s)")
