# services/trainer.py
import hashlib
import logging
import math
import os
import time
from dataclasses import dataclass
from threading import Lock
from typing import Any, Dict, List, Literal, Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, Field, field_validator

from .checkpoints import load_model, save_model
from .corpus import Utterance
from .error_handler import ErrorHandler, FeatureError, NonFiniteError, TrainingDivergedError
from .features import FeatureStats, fit_stats
from .models.params import LOSS_TERMS, ModelParams
from .models.speech_gesture import SpeechGestureModel
from .performance_monitor import PerformanceMonitor
from .text_frontend import SymbolInventory, tokenize

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    batch_size: int = Field(2, gt=0)
    lr: float = Field(1e-4, gt=0)
    max_updates: int = Field(3000, gt=0)
    seed: int = 1234
    mode: Literal['joint', 'tts_only', 'motion_on_frozen_tts'] = 'joint'
    loss_weights: Dict[str, float] = Field(default_factory=lambda: {term: 1.0 for term in LOSS_TERMS})
    val_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    grad_clip: Optional[float] = Field(1.0, gt=0)
    checkpoint_interval: int = Field(1000, gt=0)
    validation_interval: int = Field(500, gt=0)
    log_interval: int = Field(50, gt=0)
    synthetic_utterances: int = Field(2, ge=0)
    init_checkpoint: Optional[str] = None

    @field_validator('loss_weights')
    @classmethod
    def _check_weights(cls, weights: Dict[str, float]) -> Dict[str, float]:
        unknown = sorted(set(weights) - set(LOSS_TERMS))
        if unknown:
            raise ValueError(f"Unknown loss terms {unknown}, expected a subset of {LOSS_TERMS}")
        negative = sorted(term for term, value in weights.items() if value < 0)
        if negative:
            raise ValueError(f"Loss weights must be non-negative: {negative}")
        return {term: float(weights.get(term, 1.0)) for term in LOSS_TERMS}

    @classmethod
    def from_config(cls, config_manager, profile: str = 'desk', overrides: Optional[Dict[str, Any]] = None,
                    **kwargs) -> 'TrainConfig':
        values = config_manager.get_training_config(profile)
        values.setdefault('log_interval', config_manager.get_logging_config('log_interval', 50))
        values.update(overrides or {})
        values.update({key: value for key, value in kwargs.items() if value is not None})
        return cls(**values)


@dataclass
class Batch:
    x: torch.Tensor           # [B x P]
    x_lengths: torch.Tensor   # [B]
    y: torch.Tensor           # [B x 80 x T]
    y_lengths: torch.Tensor   # [B]
    pose: torch.Tensor        # [B x 45 x T]
    texts: List[str]


def collate(utterances: Sequence[Utterance], inventory: SymbolInventory,
            lexicon: Optional[Dict[str, List[str]]] = None, stats: Optional[FeatureStats] = None) -> Batch:
    """Tokenize, normalize and zero-pad a list of utterances"""
    ids = [tokenize(u.text, lexicon, inventory).ids for u in utterances]
    mels = [u.mel.frames if stats is None else stats.normalize_mel(u.mel.frames) for u in utterances]
    poses = [u.pose.frames if stats is None else stats.normalize_pose(u.pose.frames) for u in utterances]

    batch_size = len(utterances)
    max_symbols = max(len(seq) for seq in ids)
    max_frames = max(mel.shape[0] for mel in mels)

    x = torch.full((batch_size, max_symbols), inventory.pad_id, dtype=torch.long)
    y = torch.zeros(batch_size, mels[0].shape[1], max_frames)
    pose = torch.zeros(batch_size, poses[0].shape[1], max_frames)
    for b in range(batch_size):
        x[b, :len(ids[b])] = torch.from_numpy(ids[b])
        y[b, :, :mels[b].shape[0]] = torch.from_numpy(np.ascontiguousarray(mels[b].T, dtype=np.float32))
        pose[b, :, :poses[b].shape[0]] = torch.from_numpy(np.ascontiguousarray(poses[b].T, dtype=np.float32))

    return Batch(
        x=x,
        x_lengths=torch.tensor([len(seq) for seq in ids], dtype=torch.long),
        y=y,
        y_lengths=torch.tensor([mel.shape[0] for mel in mels], dtype=torch.long),
        pose=pose,
        texts=[u.text for u in utterances],
    )


def compute_losses(model: SpeechGestureModel, batch: Batch, config: TrainConfig,
                   generator: Optional[torch.Generator] = None, reduction: str = 'mean') -> Dict[str, torch.Tensor]:
    return model.compute_loss(batch.x, batch.x_lengths, batch.y, batch.y_lengths, pose=batch.pose,
                              weights=config.loss_weights, mode=config.mode, generator=generator,
                              reduction=reduction)


def set_train_mode(model: SpeechGestureModel, mode: str) -> None:
    model.train()
    if mode == 'motion_on_frozen_tts':
        for module in model.tts_modules():
            module.eval()


def joint_step(model: SpeechGestureModel, batch: Batch, optimizer: torch.optim.Optimizer,
               config: TrainConfig, generator: Optional[torch.Generator] = None,
               step: Optional[int] = None) -> Dict[str, float]:
    """One optimizer update on the weighted sum of the active loss terms"""
    set_train_mode(model, config.mode)
    losses = compute_losses(model, batch, config, generator)
    total = losses['total']
    if not torch.isfinite(total):
        values = {term: float(value) for term, value in losses.items()}
        raise NonFiniteError(f"Non-finite training loss at step {step}: {values}", step=step)

    optimizer.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
        if config.grad_clip is not None:
            params = [p for group in optimizer.param_groups for p in group['params'] if p.grad is not None]
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        optimizer.step()

    return {term: float(value.detach()) for term, value in losses.items()}


@torch.no_grad()
def validation_losses(model: SpeechGestureModel, batches: Sequence[Batch], config: TrainConfig,
                      seed: int) -> Dict[str, float]:
    """Mean per-term losses with a fixed noise seed, so equal weights give equal numbers"""
    was_training = model.training
    model.eval()
    generator = torch.Generator().manual_seed(seed)
    totals: Dict[str, float] = {}
    try:
        for batch in batches:
            for term, value in compute_losses(model, batch, config, generator).items():
                totals[term] = totals.get(term, 0.0) + float(value)
    finally:
        model.train(was_training)
    return {term: value / len(batches) for term, value in totals.items()}


def parameter_digest(modules: Sequence[torch.nn.Module]) -> str:
    """sha256 over the raw bytes of every parameter, in registration order"""
    digest = hashlib.sha256()
    for module in modules:
        for name, tensor in module.state_dict().items():
            digest.update(name.encode('utf-8'))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class Trainer:
    """Runs joint_step to max_updates with periodic validation and checkpoints"""

    def __init__(self, config: TrainConfig, model_params: Optional[ModelParams] = None,
                 checkpoint_dir: str = 'checkpoints', inventory: Optional[SymbolInventory] = None,
                 lexicon: Optional[Dict[str, List[str]]] = None, monitor: Optional[PerformanceMonitor] = None,
                 error_handler: Optional[ErrorHandler] = None):
        self.config = config
        self.checkpoint_dir = checkpoint_dir
        self.lexicon = lexicon
        self.monitor = monitor or PerformanceMonitor()
        self.error_handler = error_handler or ErrorHandler()
        self.lock = Lock()
        self.stats: Optional[FeatureStats] = None

        torch.manual_seed(config.seed)
        if config.init_checkpoint:
            loaded = load_model(config.init_checkpoint)
            self.model = loaded.model
            self.inventory = loaded.inventory
            self.stats = loaded.stats
            self.lexicon = lexicon or loaded.lexicon
            logger.info(f"Initialised from {config.init_checkpoint} (step {loaded.step})")
        else:
            self.inventory = inventory or SymbolInventory.default()
            self.model = SpeechGestureModel(model_params or ModelParams(), len(self.inventory))
            if config.mode == 'motion_on_frozen_tts':
                logger.warning("Frozen-TTS mode without an initial checkpoint; the TTS part stays at its random init")

        if config.mode == 'motion_on_frozen_tts':
            for param in self.model.tts_parameters():
                param.requires_grad_(False)
            trainable = list(self.model.gesture_parameters())
        else:
            trainable = list(self.model.parameters())
        self.optimizer = torch.optim.Adam(trainable, lr=config.lr)
        self.generator = torch.Generator().manual_seed(config.seed)

        self.status = {
            'update': 0,
            'max_updates': config.max_updates,
            'mode': config.mode,
            'is_running': False,
            'last_losses': {},
            'validation_history': [],
            'best_validation_loss': None,
            'last_checkpoint': None,
            'error': None
        }
        self.loss_history: List[Dict[str, float]] = []

    def _update_status(self, **values):
        with self.lock:
            self.status.update(values)

    def get_status(self) -> Dict[str, Any]:
        with self.lock:
            return dict(self.status)

    def split(self, corpus: Sequence[Utterance]):
        """Deterministic train/validation split; tiny corpora validate on the training set"""
        order = np.random.default_rng(self.config.seed).permutation(len(corpus))
        n_val = int(math.floor(self.config.val_fraction * len(corpus)))
        if n_val == 0 or n_val == len(corpus):
            return list(corpus), list(corpus)
        val = [corpus[i] for i in order[:n_val]]
        train = [corpus[i] for i in order[n_val:]]
        return train, val

    def _batches(self, utterances: Sequence[Utterance]) -> List[Batch]:
        size = self.config.batch_size
        return [collate(utterances[i:i + size], self.inventory, self.lexicon, self.stats)
                for i in range(0, len(utterances), size)]

    def save(self, path: str, step: int) -> str:
        save_with_retry = self.error_handler.retry_on_error(max_retries=3, delay=0.5)(save_model)
        with self.monitor.track('checkpoint'):
            save_with_retry(path, self.model, self.inventory, self.stats, step=step, lexicon=self.lexicon,
                            train_config=self.config.model_dump(mode='json'))
        self._update_status(last_checkpoint=path)
        return path

    def validate(self, batches: Sequence[Batch], step: int) -> Dict[str, float]:
        with self.monitor.track('validation'):
            losses = validation_losses(self.model, batches, self.config, seed=self.config.seed + 1)

        with self.lock:
            self.status['validation_history'].append({'update': step, **losses})
            best = self.status['best_validation_loss']
            if best is None or losses['total'] < best:
                self.status['best_validation_loss'] = losses['total']
        logger.info(f"Validation at update {step}: " + ', '.join(f"{k}={v:.4f}" for k, v in losses.items()))
        return losses

    def train(self, corpus: Sequence[Utterance]) -> str:
        """Train on corpus and return the path of the final checkpoint"""
        if len(corpus) == 0:
            raise FeatureError("Training corpus is empty")

        train_set, val_set = self.split(corpus)
        if self.stats is None:
            self.stats = fit_stats([(u.mel, u.pose) for u in train_set])
        val_batches = self._batches(val_set)
        os.makedirs(self.checkpoint_dir, exist_ok=True)

        config = self.config
        rng = np.random.default_rng(config.seed)
        logger.info(f"Training ({config.mode}) on {len(train_set)} utterances, {len(val_set)} for validation, "
                    f"{config.max_updates} updates at batch {config.batch_size}")
        self._update_status(is_running=True, error=None)

        try:
            for step in range(1, config.max_updates + 1):
                picks = rng.choice(len(train_set), size=config.batch_size, replace=len(train_set) < config.batch_size)
                batch = collate([train_set[i] for i in picks], self.inventory, self.lexicon, self.stats)

                start = time.perf_counter()
                try:
                    losses = joint_step(self.model, batch, self.optimizer, config, self.generator, step=step)
                except NonFiniteError as e:
                    self.monitor.record_operation('train_step', time.perf_counter() - start, False)
                    snapshot = self.error_handler.handle_training_error(
                        e, {'step': step, 'mode': config.mode, 'texts': batch.texts,
                            'last_losses': self.status['last_losses']},
                        snapshot_dir=self.checkpoint_dir,
                        save_params=lambda path: save_model(path, self.model, self.inventory, self.stats, step=step),
                    )
                    self._update_status(error=str(e))
                    raise TrainingDivergedError(f"Training diverged at update {step}",
                                                snapshot_path=snapshot) from e
                self.monitor.record_operation('train_step', time.perf_counter() - start, True)

                self.loss_history.append(losses)
                self._update_status(update=step, last_losses=losses)
                if step % config.log_interval == 0 or step == 1:
                    logger.info(f"Update {step}/{config.max_updates}: "
                                + ', '.join(f"{k}={v:.4f}" for k, v in losses.items()))

                if step % config.validation_interval == 0:
                    self.validate(val_batches, step)
                if step % config.checkpoint_interval == 0:
                    self.save(os.path.join(self.checkpoint_dir, f"step-{step:07d}.zip"), step)

            final_path = self.save(os.path.join(self.checkpoint_dir, 'final.zip'), config.max_updates)
            logger.info(f"Training finished; final checkpoint {final_path}")
            return final_path
        finally:
            self._update_status(is_running=False)
