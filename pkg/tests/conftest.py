from dataclasses import replace

import numpy as np
import pytest

from crossexam.config import ExperimentConfig
from crossexam.data import PoisonConfig, make_synthetic_dataset, make_trigger, poison_dataset
from crossexam.training import TrainConfig, train_model

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def bundle():
    """Default desk dataset: K=5, n=2000, 3x16x16."""
    return make_synthetic_dataset(5, 2000, 3, 16, 16, seed=0)


@pytest.fixture(scope="session")
def clean_models(bundle):
    return [train_model(bundle, TrainConfig(seed=s)) for s in (101, 102)]


@pytest.fixture(scope="session")
def patch_setup(bundle):
    """Patch-backdoored model (alpha = 0.1, target 1) with its trigger and poisoned bundle."""
    trigger = make_trigger("patch", bundle.image_shape, seed=5)
    poisoned = poison_dataset(bundle, PoisonConfig(0.1, 1, trigger, seed=5))
    ckpt = train_model(poisoned, TrainConfig(seed=201), trigger=trigger)
    return ckpt, trigger, 1, poisoned


@pytest.fixture(scope="session")
def second_patch(bundle):
    """A second backdoored model with an independent trigger and target."""
    trigger = make_trigger("patch", bundle.image_shape, seed=9, position=(0, 0))
    poisoned = poison_dataset(bundle, PoisonConfig(0.1, 3, trigger, seed=9))
    return train_model(poisoned, TrainConfig(seed=202), trigger=trigger), trigger, 3


@pytest.fixture(scope="session")
def small_bundle():
    return make_synthetic_dataset(5, 400, 3, 16, 16, seed=1)


@pytest.fixture(scope="session")
def small_models(small_bundle):
    cfg = TrainConfig(epochs=3)
    return [train_model(small_bundle, replace(cfg, seed=s)) for s in (1, 2)]


def tiny_config(**overrides) -> ExperimentConfig:
    """Cheap experiment used for plumbing tests; detection quality is not asserted on it."""
    d = {"seed": 3, "dataset": {"n": 400}, "train": {"epochs": 3},
         "population": {"n_clean": 1, "n_backdoored": 1, "rates": [0.05, 0.2], "metrics": ["cka", "cos"]},
         "inversion": {"epochs": 4, "num_probe_samples": 40, "pilot_epochs": 2},
         "finetune": {"repeats": 1, "epochs": 1}}
    for key, value in overrides.items():
        if isinstance(value, dict):
            d.setdefault(key, {}).update(value)
        else:
            d[key] = value
    return ExperimentConfig.from_dict(d)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
