import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

# acceptance verdicts, filled by test_acceptance and echoed after the run
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[k])
