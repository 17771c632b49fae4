"""Shared fixtures: an on-disk synthetic dataset and a small trained model."""

import numpy as np
import pytest

_acceptance_results = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance_results.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if _acceptance_results:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for name, outcome in _acceptance_results:
            terminalreporter.write_line(f"  {outcome.upper():6s} {name}")

from snowseg.cli import main
from snowseg.synth import synthetic_samples, write_png_dataset

TRAIN_CONFIG = """\
# tiny end-to-end config used by the CLI tests
num_classes = 20
width_scale = 1/64
input_h = 32
input_w = 32
seed = 5
learn_upsampling = true
batch_size = 2
epochs = 2
lr = 0.001
momentum = 0.9
eval_every = 1
train_manifest = train.txt
val_manifest = val.txt
"""


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    write_png_dataset(root, "train", synthetic_samples(4, 32, 32, 20, seed=100))
    write_png_dataset(root, "val", synthetic_samples(2, 32, 32, 20, seed=101))
    # the test split never uses class 11, so oracle evaluation reports it NaN
    test_samples = []
    for rgb, label in synthetic_samples(3, 32, 32, 20, seed=102):
        label = label.copy()
        label[label == 11] = 12
        test_samples.append((rgb, label))
    write_png_dataset(root, "test", test_samples)
    (root / "train.cfg").write_text(TRAIN_CONFIG)
    return root


@pytest.fixture(scope="session")
def trained_model(synth_root, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("model_out")
    code = main(["train", "--config", str(synth_root / "train.cfg"), "--out", str(out_dir)])
    assert code == 0
    model = out_dir / "model.snwseg"
    assert model.is_file()
    return model
