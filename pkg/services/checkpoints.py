# services/checkpoints.py
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import torch
from pydantic import ValidationError

from .error_handler import CheckpointError
from .features import FeatureStats
from .models.params import ModelParams
from .models.speech_gesture import SpeechGestureModel
from .tensor_io import load_checkpoint, save_checkpoint
from .text_frontend import SymbolInventory

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'duetgen-1'


@dataclass
class LoadedModel:
    model: SpeechGestureModel
    inventory: SymbolInventory
    stats: Optional[FeatureStats]
    lexicon: Optional[Dict[str, List[str]]] = None
    step: int = 0
    manifest: Dict[str, Any] = field(default_factory=dict)


def model_tensors(model: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {name: value.detach().cpu().float().numpy() for name, value in model.state_dict().items()}


def save_model(path: str, model: SpeechGestureModel, inventory: SymbolInventory,
               stats: Optional[FeatureStats] = None, step: int = 0,
               lexicon: Optional[Dict[str, List[str]]] = None,
               train_config: Optional[Dict[str, Any]] = None) -> None:
    manifest = {
        'format': CHECKPOINT_FORMAT,
        'step': int(step),
        'model_params': model.params.model_dump(mode='json'),
        'inventory': list(inventory.symbols),
        'inventory_fingerprint': inventory.fingerprint(),
        'stats': stats.to_dict() if stats is not None else None,
        'lexicon': lexicon,
        'train_config': train_config,
    }
    save_checkpoint(path, model_tensors(model), manifest)


def load_model(path: str, device: str = 'cpu') -> LoadedModel:
    tensors, manifest = load_checkpoint(path)
    if manifest.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")

    try:
        params = ModelParams(**manifest['model_params'])
        inventory = SymbolInventory(manifest['inventory'])
    except (KeyError, ValidationError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid manifest: {e}") from e

    if inventory.fingerprint() != manifest.get('inventory_fingerprint'):
        raise CheckpointError(f"{path}: symbol inventory does not match its fingerprint")

    model = SpeechGestureModel(params, len(inventory))
    expected = model.state_dict()
    missing = sorted(set(expected) - set(tensors))
    unexpected = sorted(set(tensors) - set(expected))
    if missing or unexpected:
        raise CheckpointError(f"{path}: parameter mismatch (missing {missing[:5]}, unexpected {unexpected[:5]})")

    state = {}
    for name, reference in expected.items():
        array = tensors[name]
        if tuple(array.shape) != tuple(reference.shape):
            raise CheckpointError(f"{path}: {name} has shape {array.shape}, model expects {tuple(reference.shape)}")
        state[name] = torch.from_numpy(np.ascontiguousarray(array)).to(reference.dtype)

    model.load_state_dict(state, strict=True)
    model.to(device)
    model.eval()

    stats = FeatureStats.from_dict(manifest['stats']) if manifest.get('stats') else None
    return LoadedModel(model=model, inventory=inventory, stats=stats, lexicon=manifest.get('lexicon'),
                       step=int(manifest.get('step', 0)), manifest=manifest)
