import json
import os

import pytest

from pacolab import flowgen as fg
from pacolab import toyworld as tw
from pacolab.numcore import RngStream


@pytest.fixture(scope="session")
def prompt_pool():
    root = RngStream(0).split(3)
    return [tw.random_prompt(root.split(i)) for i in range(64)]


@pytest.fixture(scope="session")
def base_policy(prompt_pool):
    """Flow policy pretrained for 2000 steps on loosely consistent sets (about 20 s)."""
    model, _ = fg.pretrain(prompt_pool, 2000, RngStream(0).split(4))
    return model


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criterion(request):
    """Record a pass/fail verdict for an acceptance criterion, then assert it."""
    table = request.config.stash.setdefault(_VERDICTS, {})

    def record(cid: str, ok: bool, detail: str) -> None:
        table[cid] = {"status": "PASS" if ok else "FAIL", "detail": detail}
        print(f"{cid} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"{cid}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_VERDICTS, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(table, key=lambda c: int(c[1:])):
        v = table[cid]
        terminalreporter.write_line(f"{cid:<4} {v['status']}  {v['detail']}")
    path = os.environ.get("PACOLAB_ACCEPTANCE_JSON")
    if path:
        with open(path, "w") as fh:
            json.dump(table, fh, indent=2, sort_keys=True)
            fh.write("\n")
