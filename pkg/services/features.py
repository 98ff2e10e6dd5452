# services/features.py
import logging
import math
import re
from dataclasses import dataclass
from typing import Dict, Any, List, Optional, Sequence, Tuple, Union

import librosa
import numpy as np
from scipy.spatial.transform import Rotation

from .error_handler import ArtifactIOError, FeatureError
from .tensor_io import read_ftz, write_ftz

logger = logging.getLogger(__name__)

SAMPLE_RATE = 22050
HOP_LENGTH = 256
N_MELS = 80
POSE_CHANNELS = 45
MEL_FRAME_RATE = SAMPLE_RATE / HOP_LENGTH  # 86.1328125, exact in binary

DEFAULT_FEATURE_CONFIG: Dict[str, Any] = {
    'sample_rate': SAMPLE_RATE,
    'n_fft': 1024,
    'win_length': 1024,
    'hop_length': HOP_LENGTH,
    'n_mels': N_MELS,
    'fmin': 0.0,
    'fmax': 8000.0,
    'log_floor': 1e-5,
}

UPPER_BODY_JOINTS = (
    'Spine', 'Spine1', 'Spine2', 'Spine3', 'Neck', 'Neck1', 'Head',
    'RightShoulder', 'RightArm', 'RightForeArm',
    'LeftShoulder', 'LeftArm', 'LeftForeArm',
)

POSE_CHANNEL_NAMES: Tuple[str, ...] = (
    ('root_tx', 'root_ty', 'root_tz', 'root_rx', 'root_ry', 'root_rz')
    + tuple(f"{joint}_r{axis}" for joint in UPPER_BODY_JOINTS for axis in 'xyz')
)

# Channels 0..2 are root translation, everything after is exponential-map rotation
ROTATION_SLICE = slice(3, POSE_CHANNELS)

_STD_FLOOR = 1e-8


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel frames [T x 80] at a fixed frame rate"""
    frames: np.ndarray
    frame_rate_hz: float = MEL_FRAME_RATE

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[1] != N_MELS:
            raise FeatureError(f"Mel frames must be [T x {N_MELS}], got {frames.shape}")
        if frames.shape[0] < 1:
            raise FeatureError("Mel spectrogram has no frames")
        if not np.all(np.isfinite(frames)):
            raise FeatureError("Mel spectrogram contains non-finite values")
        if not self.frame_rate_hz > 0:
            raise FeatureError(f"Frame rate must be positive, got {self.frame_rate_hz}")
        object.__setattr__(self, 'frames', frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return self.num_frames / self.frame_rate_hz


@dataclass(frozen=True)
class PoseSequence:
    """Pose frames [T x 45]: root translation, root rotation and 13 joint rotations (exponential map, radians)"""
    frames: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[1] != POSE_CHANNELS:
            raise FeatureError(f"Pose frames must be [T x {POSE_CHANNELS}], got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise FeatureError("Pose sequence contains non-finite values")
        if not self.frame_rate_hz > 0:
            raise FeatureError(f"Frame rate must be positive, got {self.frame_rate_hz}")
        object.__setattr__(self, 'frames', frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return self.num_frames / self.frame_rate_hz


class MelExtractor:
    """Log-mel analysis with a pre-computed filterbank"""

    def __init__(self, feature_config: Optional[Dict[str, Any]] = None):
        config = {**DEFAULT_FEATURE_CONFIG, **(feature_config or {})}
        self.sample_rate = int(config['sample_rate'])
        self.n_fft = int(config['n_fft'])
        self.win_length = int(config['win_length'])
        self.hop_length = int(config['hop_length'])
        self.n_mels = int(config['n_mels'])
        self.log_floor = float(config['log_floor'])

        if self.n_mels != N_MELS:
            raise FeatureError(f"Models consume {N_MELS} mel channels, configuration asks for {self.n_mels}")

        self.mel_basis = librosa.filters.mel(
            sr=self.sample_rate,
            n_fft=self.n_fft,
            n_mels=self.n_mels,
            fmin=float(config['fmin']),
            fmax=float(config['fmax'])
        )

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate / self.hop_length

    def extract(self, waveform: np.ndarray, sample_rate: int) -> MelSpectrogram:
        waveform = np.asarray(waveform, dtype=np.float32)
        if waveform.ndim != 1:
            raise FeatureError(f"Expected a mono waveform, got shape {waveform.shape}")
        if waveform.size == 0:
            raise FeatureError("Empty waveform")
        if int(sample_rate) != self.sample_rate:
            raise FeatureError(
                f"Sample rate {sample_rate} Hz is not supported; resample to {self.sample_rate} Hz first "
                f"(e.g. librosa.resample(y, orig_sr={sample_rate}, target_sr={self.sample_rate}))"
            )
        if waveform.size < self.win_length:
            raise FeatureError(f"Waveform has {waveform.size} samples, shorter than one {self.win_length}-sample window")

        spectrum = np.abs(librosa.stft(
            waveform,
            n_fft=self.n_fft,
            hop_length=self.hop_length,
            win_length=self.win_length,
            window='hann',
            center=True,
            pad_mode='reflect'
        ))
        mel = np.dot(self.mel_basis, spectrum)
        log_mel = np.log(np.maximum(mel, self.log_floor))

        logger.debug(f"Extracted mel with {log_mel.shape[1]} frames from {waveform.size} samples")
        return MelSpectrogram(log_mel.T, self.frame_rate_hz)


def extract_mel(waveform: np.ndarray, sample_rate: int,
                feature_config: Optional[Dict[str, Any]] = None) -> MelSpectrogram:
    return MelExtractor(feature_config).extract(waveform, sample_rate)


def load_wav(path: str) -> Tuple[np.ndarray, int]:
    """Load a mono waveform at its native rate"""
    try:
        waveform, sample_rate = librosa.load(path, sr=None, mono=True)
    except (OSError, ValueError, RuntimeError) as e:
        raise ArtifactIOError(f"Failed to read audio {path}: {e}", path=path) from e
    return waveform, int(sample_rate)


def resample_pose(pose: PoseSequence, target_rate: float) -> PoseSequence:
    """Linearly interpolate every channel onto a uniform grid at target_rate"""
    if not target_rate > 0:
        raise FeatureError(f"Target rate must be positive, got {target_rate}")

    source_rate = pose.frame_rate_hz
    if target_rate == source_rate:
        return PoseSequence(pose.frames.copy(), source_rate)

    num_frames = pose.num_frames
    if num_frames < 2:
        raise FeatureError(f"Need at least 2 frames to resample from {source_rate} to {target_rate} fps")

    target_frames = round_half_up(num_frames * target_rate / source_rate)
    source_times = np.arange(num_frames, dtype=np.float64) / source_rate
    target_times = np.arange(target_frames, dtype=np.float64) / target_rate

    source = pose.frames.astype(np.float64)
    resampled = np.empty((target_frames, source.shape[1]), dtype=np.float64)
    for channel in range(source.shape[1]):
        resampled[:, channel] = np.interp(target_times, source_times, source[:, channel])

    logger.debug(f"Resampled pose {num_frames}@{source_rate} -> {target_frames}@{target_rate}")
    return PoseSequence(resampled, target_rate)


def align_lengths(mel: MelSpectrogram, pose: PoseSequence) -> Tuple[MelSpectrogram, PoseSequence]:
    """Truncate both streams to the shorter one"""
    if not math.isclose(mel.frame_rate_hz, pose.frame_rate_hz, rel_tol=1e-9):
        raise FeatureError(
            f"Frame rates differ (mel {mel.frame_rate_hz}, pose {pose.frame_rate_hz}); resample the pose first"
        )

    length = min(mel.num_frames, pose.num_frames)
    if length < 1:
        raise FeatureError(f"Cannot align empty streams (mel {mel.num_frames}, pose {pose.num_frames} frames)")

    if mel.num_frames != pose.num_frames:
        logger.debug(f"Truncating mel {mel.num_frames} / pose {pose.num_frames} frames to {length}")

    return (MelSpectrogram(mel.frames[:length], mel.frame_rate_hz),
            PoseSequence(pose.frames[:length], mel.frame_rate_hz))


@dataclass(frozen=True)
class FeatureStats:
    """Per-channel mean and standard deviation for both streams"""
    mel_mean: np.ndarray
    mel_std: np.ndarray
    pose_mean: np.ndarray
    pose_std: np.ndarray

    def normalize_mel(self, frames: np.ndarray) -> np.ndarray:
        return _apply(frames, lambda x: (x - self.mel_mean) / self.mel_std)

    def denormalize_mel(self, frames: np.ndarray) -> np.ndarray:
        return _apply(frames, lambda x: x * self.mel_std + self.mel_mean)

    def normalize_pose(self, frames: np.ndarray) -> np.ndarray:
        return _apply(frames, lambda x: (x - self.pose_mean) / self.pose_std)

    def denormalize_pose(self, frames: np.ndarray) -> np.ndarray:
        return _apply(frames, lambda x: x * self.pose_std + self.pose_mean)

    def to_dict(self) -> Dict[str, List[float]]:
        return {
            'mel_mean': self.mel_mean.tolist(),
            'mel_std': self.mel_std.tolist(),
            'pose_mean': self.pose_mean.tolist(),
            'pose_std': self.pose_std.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Sequence[float]]) -> 'FeatureStats':
        try:
            return cls(**{key: np.asarray(data[key], dtype=np.float64)
                          for key in ('mel_mean', 'mel_std', 'pose_mean', 'pose_std')})
        except KeyError as e:
            raise FeatureError(f"Feature statistics missing field {e}") from e


def _apply(frames: np.ndarray, fn) -> np.ndarray:
    # float64 arithmetic, caller's dtype back
    frames = np.asarray(frames)
    result = fn(frames.astype(np.float64))
    return result.astype(frames.dtype if np.issubdtype(frames.dtype, np.floating) else np.float64)


def fit_stats(corpus: Sequence[Tuple[MelSpectrogram, PoseSequence]]) -> FeatureStats:
    if len(corpus) == 0:
        raise FeatureError("Cannot fit feature statistics on an empty corpus")

    mel = np.concatenate([m.frames for m, _ in corpus], axis=0).astype(np.float64)
    pose = np.concatenate([p.frames for _, p in corpus], axis=0).astype(np.float64)

    stats = FeatureStats(mel.mean(axis=0), mel.std(axis=0), pose.mean(axis=0), pose.std(axis=0))

    for stream, std in (('mel', stats.mel_std), ('pose', stats.pose_std)):
        degenerate = np.flatnonzero(std < _STD_FLOOR)
        if degenerate.size:
            raise FeatureError(f"Zero-variance {stream} channels {degenerate.tolist()}; cannot normalize")

    logger.info(f"Fitted feature statistics on {len(corpus)} utterances ({mel.shape[0]} frames)")
    return stats


def normalize(x: Union[MelSpectrogram, PoseSequence], stats: FeatureStats) -> Union[MelSpectrogram, PoseSequence]:
    if isinstance(x, MelSpectrogram):
        return MelSpectrogram(stats.normalize_mel(x.frames), x.frame_rate_hz)
    return PoseSequence(stats.normalize_pose(x.frames), x.frame_rate_hz)


def denormalize(x: Union[MelSpectrogram, PoseSequence], stats: FeatureStats) -> Union[MelSpectrogram, PoseSequence]:
    if isinstance(x, MelSpectrogram):
        return MelSpectrogram(stats.denormalize_mel(x.frames), x.frame_rate_hz)
    return PoseSequence(stats.denormalize_pose(x.frames), x.frame_rate_hz)


def canonicalize_expmap(rotvecs: np.ndarray) -> np.ndarray:
    """Rewrite every rotation vector (last axis, 3 per triple) to an equivalent one with norm <= pi"""
    values = np.asarray(rotvecs, dtype=np.float64)
    if values.shape[-1] % 3:
        raise FeatureError(f"Rotation channels must come in triples, got {values.shape[-1]}")

    triples = values.reshape(values.shape[:-1] + (-1, 3))
    angle = np.linalg.norm(triples, axis=-1, keepdims=True)
    wrapped = np.mod(angle + np.pi, 2.0 * np.pi) - np.pi
    scale = np.divide(wrapped, angle, out=np.ones_like(angle), where=angle > np.pi)
    return (triples * scale).reshape(values.shape)


def canonicalize_pose(pose: PoseSequence) -> PoseSequence:
    frames = pose.frames.astype(np.float64)
    frames[:, ROTATION_SLICE] = canonicalize_expmap(frames[:, ROTATION_SLICE])
    return PoseSequence(frames, pose.frame_rate_hz)


_BVH_ROTATION = re.compile(r'^([XYZ])rotation$', re.IGNORECASE)
_BVH_POSITION = re.compile(r'^([XYZ])position$', re.IGNORECASE)


def _parse_bvh_hierarchy(tokens: List[str]) -> Tuple[List[Tuple[str, str]], int, str]:
    """Return the (joint, channel) column layout, the index where MOTION starts and the root name"""
    columns: List[Tuple[str, str]] = []
    stack: List[str] = []
    current = None
    root = None
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if token in ('ROOT', 'JOINT'):
            current = tokens[i + 1]
            root = root or current
            i += 2
        elif token == 'End':
            current = None
            i += 2
        elif token == '{':
            stack.append(current)
            i += 1
        elif token == '}':
            stack.pop()
            current = stack[-1] if stack else None
            i += 1
        elif token == 'CHANNELS':
            count = int(tokens[i + 1])
            columns.extend((stack[-1], name) for name in tokens[i + 2:i + 2 + count])
            i += 2 + count
        elif token == 'MOTION':
            if root is None:
                raise FeatureError("BVH hierarchy has no ROOT joint")
            return columns, i + 1, root
        else:
            i += 1
    raise FeatureError("BVH file has no MOTION section")


def read_bvh_motion(path: str, joints: Sequence[str] = UPPER_BODY_JOINTS) -> PoseSequence:
    """Read root translation and the named joints' rotations from a BVH file as exponential maps"""
    try:
        with open(path, 'r', encoding='utf-8') as file:
            tokens = file.read().split()
    except OSError as e:
        raise ArtifactIOError(f"Failed to read motion {path}: {e}", path=path) from e

    columns, i, root = _parse_bvh_hierarchy(tokens)

    try:
        if tokens[i] != 'Frames:' or tokens[i + 2] != 'Frame' or tokens[i + 3] != 'Time:':
            raise FeatureError(f"{path}: malformed MOTION header")
        num_frames = int(tokens[i + 1])
        frame_time = float(tokens[i + 4])
        values = np.asarray(tokens[i + 5:], dtype=np.float64)
    except (IndexError, ValueError) as e:
        raise FeatureError(f"{path}: malformed MOTION section: {e}") from e

    if frame_time <= 0 or values.size != num_frames * len(columns):
        raise FeatureError(f"{path}: expected {num_frames} x {len(columns)} motion values, got {values.size}")
    motion = values.reshape(num_frames, len(columns))

    def channel_indices(joint: str, pattern: re.Pattern) -> Tuple[List[int], str]:
        indices, axes = [], ''
        for index, (owner, name) in enumerate(columns):
            match = pattern.match(name)
            if owner == joint and match:
                indices.append(index)
                axes += match.group(1).upper()
        if len(indices) != 3:
            raise FeatureError(f"{path}: joint '{joint}' lacks three {pattern.pattern} channels")
        return indices, axes

    position_indices, position_axes = channel_indices(root, _BVH_POSITION)
    translation = motion[:, position_indices][:, [position_axes.index(a) for a in 'XYZ']]

    rotations = []
    for joint in (root, *joints):
        indices, order = channel_indices(joint, _BVH_ROTATION)
        # BVH channel order is intrinsic, which scipy spells with capitals
        rotvec = Rotation.from_euler(order, motion[:, indices], degrees=True).as_rotvec()
        rotations.append(rotvec)

    frames = np.concatenate([translation] + rotations, axis=1)
    frames[:, ROTATION_SLICE] = canonicalize_expmap(frames[:, ROTATION_SLICE])

    logger.info(f"Read {num_frames} frames at {1.0 / frame_time:.3f} fps from {path}")
    return PoseSequence(frames, 1.0 / frame_time)


def save_mel(path: str, mel: MelSpectrogram) -> None:
    write_ftz(path, mel.frames, 'mel', mel.frame_rate_hz)


def load_mel(path: str) -> MelSpectrogram:
    frames, header = read_ftz(path)
    if header['kind'] != 'mel':
        raise FeatureError(f"{path} holds a {header['kind']} tensor, not a mel spectrogram")
    return MelSpectrogram(frames, header.get('rate_hz') or MEL_FRAME_RATE)


def save_pose(path: str, pose: PoseSequence) -> None:
    write_ftz(path, pose.frames, 'pose', pose.frame_rate_hz)


def load_pose(path: str) -> PoseSequence:
    frames, header = read_ftz(path)
    if header['kind'] != 'pose':
        raise FeatureError(f"{path} holds a {header['kind']} tensor, not a pose sequence")
    if not header.get('rate_hz'):
        raise FeatureError(f"{path}: pose tensor has no frame rate")
    return PoseSequence(frames, header['rate_hz'])
