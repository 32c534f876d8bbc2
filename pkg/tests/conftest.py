import numpy as np
import pytest

from dafnet.evaluator import EditRecord
from dafnet.lm import EditableLM, LmConfig, Vocab, make_seq

WORDS = ("the capital of city is paris rome oslo lima river near flows through "
         "nile seine danube alice bob carol lives in works at").split()


@pytest.fixture
def vocab():
    return Vocab(WORDS)


def tiny_lm(vocab, seed=0, **kw):
    cfg = dict(vocab_size=len(vocab), d_model=16, n_layers=2, n_heads=2, d_ff=24,
               max_seq_len=12, edit_layer_count=2, init_std=0.3)
    cfg.update(kw)
    return EditableLM(LmConfig(**cfg), vocab, seed=seed)


@pytest.fixture
def lm(vocab):
    return tiny_lm(vocab)


PROMPTS = ["the capital of alice is", "bob lives in", "carol works at", "the river near rome is",
           "alice lives in", "the capital of bob is", "carol lives in", "bob works at"]
TARGETS = ["paris", "oslo lima", "rome", "nile", "seine danube", "lima", "oslo", "paris"]


def make_records(vocab, n=4, rng=None):
    rng = rng or np.random.default_rng(0)
    out = []
    for i in range(n):
        j = int(rng.integers(len(PROMPTS)))
        k = int(rng.integers(len(PROMPTS)))
        out.append(EditRecord(
            f"r{i}", make_seq(vocab, PROMPTS[j], TARGETS[(j + i) % len(TARGETS)]),
            [make_seq(vocab, "the " + PROMPTS[j], TARGETS[(j + i) % len(TARGETS)])],
            [make_seq(vocab, PROMPTS[k], TARGETS[k])], "recent"))
    return out


@pytest.fixture
def records(vocab):
    return make_records(vocab)


# -- acceptance summary ---------------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
