"""Versioned JSON checkpoints for every model kind."""

import json
import logging
from dataclasses import dataclass

import numpy as np

from biomarker_data import BiomarkerSchema
from errors import CheckpointError
from nn_layers import named_params, replace_params

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Checkpoint:
    model_kind: str
    config: dict
    extra: dict
    arrays: dict


def save_checkpoint(path, model_kind: str, params, config: dict, schema: BiomarkerSchema, extra=None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "model_kind": model_kind,
        "schema_hash": schema.schema_hash(),
        "config": config,
        "extra": extra or {},
        "params": {
            name: {"shape": list(value.shape), "data": value.ravel().tolist()}
            for name, value in named_params(params).items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")
    logger.info(f"Saved {model_kind} checkpoint to {path}")


def load_checkpoint(path, schema: BiomarkerSchema) -> Checkpoint:
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path} is not a valid checkpoint: {e}") from None
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    if payload.get("schema_hash") != schema.schema_hash():
        raise CheckpointError("checkpoint was trained on a different biomarker schema")
    try:
        arrays = {
            name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload["params"].items()
        }
        return Checkpoint(payload["model_kind"], payload["config"], payload.get("extra", {}), arrays)
    except (KeyError, ValueError, TypeError) as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e}") from None


def restore_params(template, arrays: dict):
    """Swap checkpoint arrays into a freshly initialized container, checking names and shapes."""
    expected = named_params(template)
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        unexpected = sorted(set(arrays) - set(expected))
        raise CheckpointError(f"parameter names differ (missing {missing}, unexpected {unexpected})")
    for name, value in expected.items():
        if arrays[name].shape != value.shape:
            raise CheckpointError(f"{name} has shape {arrays[name].shape}, expected {value.shape}")
    return replace_params(template, arrays)
