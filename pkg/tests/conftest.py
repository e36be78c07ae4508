import numpy as np
import pytest

from colprune.model import ArchSpec, build_model


def jitter_norms(model, seed=0):
    """Random norm gains/offsets so tests do not rely on identity norms."""
    rng = np.random.default_rng(seed)
    for blk in model.blocks:
        for key, val in blk.norms.items():
            base = 1.0 if key.endswith("weight") else 0.0
            blk.norms[key] = (base + 0.2 * rng.standard_normal(val.shape)).astype(np.float32)
    return model


def make_model(family="opt", d=16, hidden=32, heads=2, blocks=2, vocab=50, max_seq=32, seed=0):
    spec = ArchSpec(family, d, hidden, heads, blocks, vocab, max_seq)
    return jitter_norms(build_model(spec, seed), seed)


@pytest.fixture(params=["opt", "llama"])
def family(request):
    return request.param


@pytest.fixture
def small_model(family):
    return make_model(family)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def record_acceptance(number: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {name}"
    if detail:
        line += f": {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
