# services/synthesizer.py
import io
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field

from .checkpoints import LoadedModel, load_model
from .error_handler import ArtifactIOError, FeatureError
from .features import POSE_CHANNEL_NAMES, MelSpectrogram, PoseSequence, resample_pose, save_mel
from .performance_monitor import PerformanceMonitor
from .tensor_io import atomic_write_bytes
from .text_frontend import tokenize

logger = logging.getLogger(__name__)

FPS_PREFIX = '# fps='


class SynthesisRequest(BaseModel):
    text: str = Field(..., min_length=1)
    checkpoint: Optional[str] = None
    speech_steps: int = Field(50, ge=1)
    motion_steps: int = Field(500, ge=1)
    temperature: float = Field(1.5, gt=0)
    duration_scale: float = Field(1.0, gt=0)
    seed: int = 0
    sampler: Literal['ode', 'sde'] = 'ode'
    playback_fps: Optional[float] = Field(60.0, gt=0)
    num_samples: int = Field(1, ge=1)

    @classmethod
    def from_config(cls, config_manager, **values) -> 'SynthesisRequest':
        defaults = config_manager.get_synthesis_config()
        defaults.update({key: value for key, value in values.items() if value is not None})
        return cls(**defaults)


@dataclass
class SynthesisResult:
    mel: MelSpectrogram          # denormalized log-mel at the model frame rate
    pose: PoseSequence           # at the model frame rate, same T as mel
    playback_pose: PoseSequence  # resampled to the requested playback rate
    durations: np.ndarray        # frames per input symbol
    seed: int


class Synthesizer:
    """Text to (mel, pose) with a loaded checkpoint"""

    def __init__(self, loaded: LoadedModel, monitor: Optional[PerformanceMonitor] = None):
        self.loaded = loaded
        self.model = loaded.model
        self.monitor = monitor or PerformanceMonitor()
        self.model.eval()

    @classmethod
    def from_checkpoint(cls, path: str, monitor: Optional[PerformanceMonitor] = None) -> 'Synthesizer':
        return cls(load_model(path), monitor=monitor)

    def synthesize(self, request: SynthesisRequest, seed: Optional[int] = None) -> SynthesisResult:
        seed = request.seed if seed is None else seed
        with self.monitor.track('synthesize'):
            return self._synthesize(request, seed)

    def synthesize_many(self, request: SynthesisRequest) -> List[SynthesisResult]:
        """num_samples realisations with seeds seed, seed + 1, ..."""
        return [self.synthesize(request, request.seed + i) for i in range(request.num_samples)]

    def _synthesize(self, request: SynthesisRequest, seed: int) -> SynthesisResult:
        sequence = tokenize(request.text, self.loaded.lexicon, self.loaded.inventory)
        logger.info(f"Synthesising {len(sequence)} symbols (seed {seed}, {request.sampler}, "
                    f"tau {request.temperature}, steps {request.speech_steps}/{request.motion_steps})")

        x = torch.from_numpy(sequence.ids).unsqueeze(0)
        x_lengths = torch.tensor([len(sequence)], dtype=torch.long)
        generator = torch.Generator().manual_seed(seed)
        output = self.model.synthesise(x, x_lengths, speech_steps=request.speech_steps,
                                       motion_steps=request.motion_steps, temperature=request.temperature,
                                       length_scale=request.duration_scale,
                                       stochastic=request.sampler == 'sde', generator=generator)

        length = int(output.mask[0, 0].sum())
        mel = output.mel[0, :, :length].T.cpu().numpy()
        pose = output.pose[0, :, :length].T.cpu().numpy()
        stats = self.loaded.stats
        if stats is not None:
            mel = stats.denormalize_mel(mel)
            pose = stats.denormalize_pose(pose)

        mel = MelSpectrogram(mel)
        pose = PoseSequence(pose, mel.frame_rate_hz)
        playback = resample_pose(pose, request.playback_fps) if request.playback_fps else pose
        logger.info(f"Synthesised {mel.num_frames} frames ({mel.duration_s:.2f} s); "
                    f"pose {playback.num_frames} frames at {playback.frame_rate_hz} fps")

        return SynthesisResult(mel=mel, pose=pose, playback_pose=playback,
                               durations=output.durations[0, :len(sequence)].cpu().numpy(), seed=seed)

    def write_outputs(self, result: SynthesisResult, out_dir: str, stem: str) -> Dict[str, str]:
        mel_path = os.path.join(out_dir, f"{stem}.mel.ftz")
        pose_path = os.path.join(out_dir, f"{stem}.pose.csv")
        export_mel(result.mel, mel_path)
        export_pose_csv(result.playback_pose, pose_path)
        return {'mel': mel_path, 'pose': pose_path}


def synthesize(request: SynthesisRequest) -> SynthesisResult:
    """One-shot synthesis from request.checkpoint"""
    if not request.checkpoint:
        raise ValueError("SynthesisRequest.checkpoint is required for one-shot synthesis")
    return Synthesizer.from_checkpoint(request.checkpoint).synthesize(request)


def export_mel(mel: MelSpectrogram, path: str) -> None:
    save_mel(path, mel)


def export_pose_csv(pose: PoseSequence, path: str) -> None:
    """fps comment line, header of channel names, one row per frame"""
    if pose.num_frames == 0:
        logger.warning(f"Exporting an empty pose sequence to {path}; the file holds only the header")

    frame = pd.DataFrame(pose.frames, columns=list(POSE_CHANNEL_NAMES))
    buffer = io.StringIO()
    buffer.write(f"{FPS_PREFIX}{pose.frame_rate_hz!r}\n")
    frame.to_csv(buffer, index=False)
    atomic_write_bytes(path, buffer.getvalue().encode('utf-8'))
    logger.debug(f"Wrote {pose.num_frames} pose frames to {path}")


def read_pose_csv(path: str) -> PoseSequence:
    try:
        with open(path, 'r', encoding='utf-8') as file:
            first = file.readline().strip()
            if not first.startswith(FPS_PREFIX):
                raise FeatureError(f"{path}: missing '{FPS_PREFIX}' metadata line")
            fps = float(first[len(FPS_PREFIX):])
            frame = pd.read_csv(file)
    except OSError as e:
        raise ArtifactIOError(f"Failed to read {path}: {e}", path=path) from e

    if list(frame.columns) != list(POSE_CHANNEL_NAMES):
        raise FeatureError(f"{path}: header does not name the {len(POSE_CHANNEL_NAMES)} pose channels")
    values = frame.to_numpy(dtype=np.float32).reshape(-1, len(POSE_CHANNEL_NAMES))
    return PoseSequence(values, fps)


def result_summary(result: SynthesisResult, paths: Optional[Dict[str, str]] = None) -> Dict[str, Any]:
    return {
        'seed': result.seed,
        'mel_frames': result.mel.num_frames,
        'pose_frames': result.playback_pose.num_frames,
        'playback_fps': result.playback_pose.frame_rate_hz,
        'duration_s': result.mel.duration_s,
        'durations': result.durations.tolist(),
        'paths': paths or {},
    }
