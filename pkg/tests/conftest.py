import pytest
import torch

from pise import data as datasets


def toy_dataset(n_train=1000, n_test=100, size=28, seed=0):
    """Ten classes, each a bright square in its own cell of a 4x4 grid, plus noise."""
    gen = torch.Generator().manual_seed(seed)

    def split(n):
        labels = torch.arange(n) % 10
        images = 0.1 * torch.rand(n, size, size, generator=gen)
        cell = size // 4
        for i, k in enumerate(labels.tolist()):
            r, c = divmod(k, 4)
            images[i, r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] += 0.8
        return images.clamp(0, 1), labels

    tr, trl = split(n_train)
    te, tel = split(n_test)
    return datasets.Dataset("toy", tr, trl, te, tel)


@pytest.fixture(scope="session")
def toy():
    return toy_dataset()


@pytest.fixture(scope="session")
def toy_clf(toy):
    from pise.models import train_classifier
    return train_classifier(toy, "plaincnn", seed=0, epochs=4)


@pytest.fixture(scope="session")
def fashion():
    try:
        return datasets.load("fashion-mnist")
    except datasets.DatasetError as e:
        pytest.skip(f"Fashion-MNIST not ingested: {e}")


@pytest.fixture(scope="session")
def classifiers(fashion):
    from pise.training import TrainConfig, get_classifiers
    return get_classifiers(TrainConfig(), fashion)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
