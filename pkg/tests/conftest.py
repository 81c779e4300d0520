import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    import helpers
    if not helpers.AC_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(helpers.AC_RESULTS, key=lambda n: int(n.split("-")[1])):
        ok, detail = helpers.AC_RESULTS[name]
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
