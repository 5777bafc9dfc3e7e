import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

MNIST_DIR = os.environ.get("DRSL_MNIST_DIR", "/root/data/mnist")
CIFAR_DIR = os.environ.get("DRSL_CIFAR_DIR", "/root/data/cifar10")


def _have(name, directory):
    from drsl.data import dataset_files

    try:
        dataset_files(name, directory, "train")
        dataset_files(name, directory, "test")
        return True
    except FileNotFoundError:
        return False


@pytest.fixture(scope="session")
def mnist_dir():
    if not _have("MNIST", MNIST_DIR):
        pytest.skip(f"MNIST files not found in {MNIST_DIR} (set DRSL_MNIST_DIR)")
    return MNIST_DIR


@pytest.fixture(scope="session")
def cifar_dir():
    if not _have("CIFAR10", CIFAR_DIR):
        pytest.skip(f"CIFAR-10 binary batches not found in {CIFAR_DIR} (set DRSL_CIFAR_DIR)")
    return CIFAR_DIR


@pytest.fixture(scope="session")
def mnist_small(mnist_dir):
    from drsl.data import load_dataset

    return load_dataset("MNIST", mnist_dir, "train").take(1000), load_dataset("MNIST", mnist_dir, "test").take(500)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[n])
