import os
import sys

# Tests never touch the on-disk registry unless they ask for one
os.environ['SKIDSTEER_REGISTRY_URI'] = 'none'
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from src.services.data import SyntheticTerrainSpec, command_script, load_suite, split_dataset, synth_generate
from src.services.dynamics import DynamicParams
from src.services.ensemble import TerrainGpBank
from src.services.gpr import build_residual_dataset, train_terrain_gp

TRUE_C = (5.0, 1.0, 0.2, 4.0, 0.5, 3.0)
DT = 0.1


@pytest.fixture(scope='session')
def true_params():
    return DynamicParams(TRUE_C)


@pytest.fixture(scope='session')
def specs():
    return load_suite('default')


def clean_spec(label='clean', disturbance=None, noise_std=(0.0, 0.0), seed=0):
    return SyntheticTerrainSpec(label, DynamicParams(TRUE_C), disturbance or {}, noise_std, seed)


def synthesize(spec, duration=60.0, seed=0, script='pseudo_random'):
    commands = command_script(script, duration, DT, seed=seed)
    return synth_generate(spec, commands, DT)


@pytest.fixture(scope='session')
def suite(specs, true_params):
    """Synthetic default suite: chronological splits and a GP bank trained on the train splits"""
    train, test, hidden = {}, {}, {}
    entries = []
    for index, spec in enumerate(specs):
        run = synthesize(spec, seed=index)
        train[spec.label], test[spec.label] = split_dataset(run.dataset)
        hidden[spec.label] = run.hidden
        residuals = build_residual_dataset(train[spec.label], true_params, DT)
        entries.append(train_terrain_gp(residuals, spec.label, k_clusters=100, max_iters=200,
                                        restarts=1, seed=index))
    return {'train': train, 'test': test, 'hidden': hidden, 'bank': TerrainGpBank(tuple(entries))}


@pytest.fixture(scope='session')
def small_bank(specs, true_params):
    """A quickly trained two-terrain bank for persistence and HTTP tests"""
    entries = []
    for index, spec in enumerate(specs[:2]):
        run = synthesize(spec, duration=20.0, seed=index)
        residuals = build_residual_dataset(run.dataset, true_params, DT)
        entries.append(train_terrain_gp(residuals, spec.label, k_clusters=20, max_iters=30,
                                        restarts=0, seed=index))
    return TerrainGpBank(tuple(entries))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
