import time
from types import SimpleNamespace

import pytest

from rnnt.model import ModelConfig, RNNTModel
from rnnt.tooling.data import ToyTaskSpec, gen_toy_data
from rnnt.tooling.train import TrainConfig, train

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def toy_spec():
    return ToyTaskSpec()


@pytest.fixture(scope="session")
def trained_toy(toy_spec):
    """The reference toy recognizer: 2000 training utterances, default hyperparameters."""
    config = ModelConfig.toy(frame_period=toy_spec.frame_period)
    train_set = gen_toy_data(toy_spec, 2000, stream=0)
    start = time.perf_counter()
    result = train(train_set, config, TrainConfig(log_every=0))
    return SimpleNamespace(
        config=config,
        params=result.params,
        model=RNNTModel(config, result.params),
        result=result,
        seconds=time.perf_counter() - start,
        test=gen_toy_data(toy_spec, 200, stream=1),
    )


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
