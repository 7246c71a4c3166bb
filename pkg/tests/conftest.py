import os

import pytest

from myoscan.pipeline import STAGES

# small enough that every verb finishes in seconds
TINY_INI = """\
[experiment]
seed = 3

[phantom]
dims = 64 64 48
n_seg_train = 1
n_cae_train = 1
n_classify = 8

[segmentation]
filters = 2 2 2
units = 8
epochs = 1
minibatches = 2
batch_size = 16
near_distance = 8
max_iters = 3

[cae]
d = 128
epochs = 1
train_minibatches = 2
val_minibatches = 1
batch_size = 16
learning_rate = 0.01
patch_step = 50
encode_step = 50
mask_source = reference

[svm]
c_exponents = -1 1
gamma_exponents = -3 -1
exponent_step = 2
inner_folds = 2

[cv]
folds = 2
repeats = 2

[sweep]
k_values = 1 10
cluster_seeds = 0 1
cutoffs = 0.78 0.80
"""

VERBS = tuple(STAGES)


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY_INI)
    return str(path)


def run_all(config, out):
    from myoscan.cli import main

    codes = {verb: main([verb, "--config", config, "--out", str(out)]) for verb in VERBS}
    return codes


@pytest.fixture(scope="session")
def tiny_workspace(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("ws")
    codes = run_all(tiny_config, out)
    assert all(c == 0 for c in codes.values()), codes
    return os.fspath(out)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
