import pytest

from weakalign.data import CorpusSpec, align_corpus, generate_corpus
from weakalign.model import DecoderConfig, EncoderConfig
from weakalign.train import build_model


def tiny_corpus(n=40, seed=0):
    c = generate_corpus(CorpusSpec(num_utterances=n, num_merges=4), seed=seed)
    align_corpus(c)
    return c


def tiny_model(corpus, loss, seed=0, hidden=4):
    enc = EncoderConfig(input_dim=corpus.spec.feature_dim, num_layers=2, hidden_dim=hidden, attention_dim=3)
    dec = DecoderConfig(vocab_size=len(corpus.bpe) + 1, embed_dim=3, state_dim=4, beam_size=2, max_output_length=12)
    return build_model(corpus, loss, enc, dec, seed)


@pytest.fixture(scope="session")
def corpus():
    return tiny_corpus()


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
