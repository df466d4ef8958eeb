import pytest
import torch

from tokcon.data import Utterance
from tokcon.encoder import EncoderConfig
from tokcon.synth import generate_suite
from tokcon.text import tokenize

TINY_ENCODER = EncoderConfig(n_mels=8, n_layers=3, n_pyramid=3, hidden=4, d=8, n_heads=2)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def suite_utterances(n=12, seed=3, noise=0.1, n_mels=8, d=8):
    suite = generate_suite(n, seed=seed, n_types=8, n_intents=2, d=d, n_mels=n_mels, noise=noise)
    label_ids = {name: i for i, name in enumerate(suite.labels)}
    utts = [
        Utterance(uid=u.uid, features=u.features,
                  token_ids=tokenize(u.transcript, suite.vocab).ids, teacher=u.teacher,
                  label=label_ids[u.label], spans=u.spans)
        for u in suite.utterances
    ]
    return suite, utts


@pytest.fixture(scope="session")
def tiny_suite():
    return suite_utterances()


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict line; returns ``record(number, ok, detail)``."""

    def record(number, ok, detail):
        line = f"criterion {str(number):>3}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_KEY].append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        def order(item):
            label = str(item[0])
            digits = "".join(c for c in label if c.isdigit())
            return int(digits), label

        for _, line in sorted(lines, key=order):
            terminalreporter.write_line(line)
