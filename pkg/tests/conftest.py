from __future__ import annotations

import pytest

from mptlab.keys import indexing_from_hex
from mptlab.state import WorldState
from mptlab.trie import Trie

FIG3_KEYS = ("111234d", "111d12f")
# Transfer endpoints plus filler accounts shaping the paths to 5 and 6 nodes.
FIG5_KEYS = ("aab3e", "abc6d", "acd3f", "aab00", "aa000", "abc00", "abc60")


def ix(text: str):
    return indexing_from_hex(text)


@pytest.fixture
def fig3_trie() -> Trie:
    t = Trie()
    for k in FIG3_KEYS:
        t.insert(ix(k), k.encode())
    return t


def build_fig5_state() -> WorldState:
    s = WorldState()
    for k in FIG5_KEYS:
        s.create_account(ix(k), 10**18)
    s.finalize_setup()
    return s


@pytest.fixture
def fig5_state() -> WorldState:
    return build_fig5_state()


# -- acceptance result lines ----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(label: str, ok: bool, detail: str = "") -> bool:
    line = f"criterion {label}: {'PASS' if ok else 'FAIL'}" + (f"  {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
