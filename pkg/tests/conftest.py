import math

import numpy as np
import pytest

from sapo import autodiff as ad
from sapo.autodiff import Tensor
from sapo.model import PolicyModel

ACCEPTANCE_LINES: list[str] = []


class ScalarLM(PolicyModel):
    """One parameter: the logit of repeating the previous token (all others 0)."""

    kind = "scalar"

    def __init__(self, vocab_size=4, theta=0.0):
        self.vocab_size = vocab_size
        self.context_window = 1
        self.params = [Tensor(np.array([theta]), requires_grad=True, name="theta")]

    def logits(self, contexts):
        prev = contexts[:, -1]
        onehot = np.zeros((len(prev), self.vocab_size))
        onehot[np.arange(len(prev)), prev] = 1.0
        return ad.mul(Tensor(onehot), self.params[0])

    def _blank(self):
        return ScalarLM(self.vocab_size)


def ff_forward_logprob(model, context, token):
    """Independent step-by-step FeedForwardLM forward: log P(token | context)."""
    embed, w1, b1, w2, b2 = (p.data for p in model.params)
    W = model.context_window
    ctx = [0] * max(0, W - len(context)) + list(context)[-W:] if W else []
    x = np.concatenate([embed[t] for t in ctx])
    hidden = [math.tanh(sum(x[i] * w1[i, j] for i in range(len(x))) + b1[j])
              for j in range(w1.shape[1])]
    logits = [sum(hidden[j] * w2[j, v] for j in range(len(hidden))) + b2[v]
              for v in range(w2.shape[1])]
    m = max(logits)
    lse = m + math.log(sum(math.exp(l - m) for l in logits))
    return logits[token] - lse


def bigram_forward_logprob(model, context, token):
    row = model.params[0].data[context[-1] if context else 0]
    m = max(row)
    return row[token] - (m + math.log(sum(math.exp(v - m) for v in row)))


def brute_sum_logprob(model, prompt, response):
    fn = bigram_forward_logprob if model.kind == "bigram" else ff_forward_logprob
    total = 0.0
    for i, tok in enumerate(response):
        total += fn(model, list(prompt) + list(response[:i]), tok)
    return total


@pytest.fixture
def scalar_lm():
    return ScalarLM


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
