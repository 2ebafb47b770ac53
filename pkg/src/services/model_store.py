"""
Versioned JSON persistence for trained artefacts.

Every file is an envelope {"format", "version", "kind", "payload"}; the
payload dicts are also what the run registry stores.
"""

import json
import logging
import os
from typing import Dict, Mapping

from src.errors import ValidationError
from src.services.baselines import JacobianModel
from src.services.dynamics import DynamicParams
from src.services.ensemble import TerrainGpBank

logger = logging.getLogger(__name__)

FORMAT = 'skidsteer-motion'
VERSION = 1
KINDS = ('params', 'gp_bank', 'baseline')


def params_to_payload(params: DynamicParams) -> Dict:
    return params.to_dict()


def params_from_payload(payload: Mapping) -> DynamicParams:
    return DynamicParams.from_dict(payload)


def bank_to_payload(bank: TerrainGpBank) -> Dict:
    return bank.to_dict()


def bank_from_payload(payload: Mapping) -> TerrainGpBank:
    try:
        return TerrainGpBank.from_dict(payload)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f'malformed GP bank payload: {exc}') from exc


def baselines_to_payload(models: Mapping[str, JacobianModel]) -> Dict:
    return {variant: model.to_dict() for variant, model in models.items()}


def baselines_from_payload(payload: Mapping) -> Dict[str, JacobianModel]:
    try:
        return {variant: JacobianModel.from_dict(data) for variant, data in payload.items()}
    except (KeyError, TypeError) as exc:
        raise ValidationError(f'malformed baseline payload: {exc}') from exc


def envelope(kind: str, payload: Mapping) -> Dict:
    if kind not in KINDS:
        raise ValidationError(f'unknown model kind {kind!r}, expected one of {KINDS}')
    return {'format': FORMAT, 'version': VERSION, 'kind': kind, 'payload': payload}


def _write(path: str, kind: str, payload: Mapping):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(envelope(kind, payload), f, sort_keys=True, indent=2)
    logger.debug('Wrote %s to %s', kind, path)


def read_envelope(path: str, kind: str) -> Mapping:
    if not os.path.isfile(path):
        raise ValidationError(f'model file not found: {path}')
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ValidationError(f'{path} is not valid JSON: {exc}') from exc
    if not isinstance(data, dict) or data.get('format') != FORMAT:
        raise ValidationError(f'{path} is not a {FORMAT} model file')
    if data.get('version') != VERSION:
        raise ValidationError(f'{path} has unsupported version {data.get("version")!r}')
    if data.get('kind') != kind:
        raise ValidationError(f'{path} holds {data.get("kind")!r}, expected {kind!r}')
    return data['payload']


def save_params(params: DynamicParams, path: str):
    _write(path, 'params', params_to_payload(params))


def load_params(path: str) -> DynamicParams:
    return params_from_payload(read_envelope(path, 'params'))


def save_bank(bank: TerrainGpBank, path: str):
    _write(path, 'gp_bank', bank_to_payload(bank))


def load_bank(path: str) -> TerrainGpBank:
    return bank_from_payload(read_envelope(path, 'gp_bank'))


def save_baselines(models: Mapping[str, JacobianModel], path: str):
    _write(path, 'baseline', baselines_to_payload(models))


def load_baselines(path: str) -> Dict[str, JacobianModel]:
    return baselines_from_payload(read_envelope(path, 'baseline'))


PAYLOAD_READERS = {
    'params': params_from_payload,
    'gp_bank': bank_from_payload,
    'baseline': baselines_from_payload,
}
