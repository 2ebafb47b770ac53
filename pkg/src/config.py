"""
Configuration for the CLI and the HTTP service.

Both surfaces share a flask.Config so that keys, file loading and environment
overrides behave the same way everywhere.
"""

import hashlib
import json
import os
from typing import Any, Dict, Mapping, Optional

from flask import Config

ENV_PREFIX = 'SKIDSTEER'

DEFAULTS: Dict[str, Any] = {
    # Time discretization and nominal model
    'DT': 0.1,
    'INTEGRATOR': 'rk4',
    'COM_OFFSET': 0.0,
    'IDENT_FILTER_BETA': 0.2,
    'DERIVE_FILTER_BETA': 0.5,
    # Gaussian process training
    'GP_K_CLUSTERS': 100,
    'GP_MAX_ITERS': 200,
    'GP_RESTARTS': 3,
    # Ensemble weighting
    'ENSEMBLE_K': 10,
    'ENSEMBLE_ALPHA': 1e-3,
    'SOLVER_TOL': 1e-8,
    'SOLVER_MAX_ITERS': 10000,
    # Uncertainty propagation
    'SIGMA_LAMBDA': 1.0,
    'HORIZON_S': 1.0,
    'N_MC': 250,
    # Command envelope and wheel geometry
    'V_REF_MAX': 2.0,
    'OMEGA_REF_MAX': 4.0,
    'WHEEL_RADIUS': 0.098,
    'TRACK_WIDTH': 0.37,
    # Benchmark harness
    'HEATMAP_BINS': 8,
    'SEED': 0,
    'SYNTH_DURATION_S': 60.0,
    'SYNTH_SCRIPT': 'pseudo_random',
    'SUITE': 'default',
    'REGISTRY_URI': 'sqlite:///' + os.path.join(os.getcwd(), 'runs', 'registry.db'),
}


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> Config:
    """Build a Config from defaults, an optional JSON file, SKIDSTEER_* env vars and overrides"""
    config = Config(os.getcwd())
    config.from_mapping(DEFAULTS)
    if path:
        config.from_file(os.path.abspath(path), load=json.load)
    config.from_prefixed_env(ENV_PREFIX)
    if overrides:
        config.from_mapping({key: value for key, value in overrides.items() if value is not None})
    return config


def config_hash(config: Mapping[str, Any]) -> str:
    # REGISTRY_URI points at a local file and must not change the hash
    payload = {key: config[key] for key in sorted(config) if key.isupper() and key != 'REGISTRY_URI'}
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
