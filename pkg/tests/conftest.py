import re

import numpy as np
import pytest

from capattack.captioner import Vocabulary, train
from capattack.data import generate, render_manifest, template_words


@pytest.fixture(scope="session")
def quick_model():
    """A plain captioner trained for a few epochs: far from the gate, but its
    greedy captions are well-formed, which is all the unit tests need."""
    m = generate(0, n_train=300, n_val=20)
    vocab = Vocabulary.build(template_words())
    images = render_manifest(m)
    caps = [vocab.encode(e.caption) for e in m.examples]
    model, _ = train("plain", vocab, images[:300], caps[:300], epochs=6)
    return model, images[300:]


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with its measured detail."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if not m or (rep.when != "call" and rep.passed):
                continue
            detail = dict(rep.user_properties).get("detail", f"{outcome} during {rep.when}")
            lines[int(m.group(1))] = f"criterion {int(m.group(1)):2d}: {'PASS' if rep.passed else 'FAIL'}  {detail}"
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
