# services/corpus.py
import csv
import logging
import os
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter1d

from .error_handler import ArtifactIOError, FeatureError
from .features import (
    MEL_FRAME_RATE, N_MELS, POSE_CHANNELS, MelSpectrogram, PoseSequence,
    align_lengths, load_mel, load_pose, resample_pose, round_half_up, save_mel, save_pose,
)
from .text_frontend import SymbolInventory, tokenize

logger = logging.getLogger(__name__)

SYNTHETIC_WORDS = (
    'go', 'we', 'move', 'hand', 'wave', 'speak', 'point', 'here', 'there', 'slow',
    'fast', 'left', 'right', 'up', 'down', 'now', 'you', 'me', 'this', 'that',
)
SOURCE_POSE_FPS = 120.0
MIN_SYMBOL_FRAMES = 3
MAX_SYMBOL_FRAMES = 8
METADATA_FILE = 'metadata.csv'


@dataclass(frozen=True)
class Utterance:
    """Text with time-aligned mel and pose streams of equal length"""
    stem: str
    text: str
    mel: MelSpectrogram
    pose: PoseSequence
    durations: Optional[np.ndarray] = None  # generator ground truth per symbol, synthetic data only

    def __post_init__(self):
        if self.mel.num_frames != self.pose.num_frames:
            raise FeatureError(f"{self.stem}: mel has {self.mel.num_frames} frames, pose {self.pose.num_frames}")


# Synthetic utterances are plain utterances whose durations are known
SyntheticUtterance = Utterance


@dataclass(frozen=True)
class SymbolTemplate:
    mel: np.ndarray          # [80]
    pose_offset: np.ndarray  # [45]
    pose_freq: np.ndarray    # [45] Hz
    pose_phase: np.ndarray   # [45]
    frames: int


def symbol_template(symbol: str) -> SymbolTemplate:
    """Deterministic per-symbol mel band pattern, pose segment and duration"""
    rng = np.random.default_rng(zlib.crc32(symbol.encode('utf-8')))
    bins = np.arange(N_MELS, dtype=np.float64)

    centers = rng.choice(N_MELS, size=3, replace=False)
    mel = -7.0 + rng.normal(0.0, 0.3, N_MELS)
    for center in centers:
        mel += 5.0 * np.exp(-0.5 * ((bins - center) / 4.0) ** 2)

    return SymbolTemplate(
        mel=mel,
        pose_offset=rng.uniform(-0.4, 0.4, POSE_CHANNELS),
        pose_freq=rng.uniform(0.5, 3.0, POSE_CHANNELS),
        pose_phase=rng.uniform(0.0, 2 * np.pi, POSE_CHANNELS),
        frames=int(rng.integers(MIN_SYMBOL_FRAMES, MAX_SYMBOL_FRAMES + 1)),
    )


def _render(symbols: Sequence[str]) -> tuple:
    templates = [symbol_template(symbol) for symbol in symbols]
    durations = np.asarray([template.frames for template in templates], dtype=np.int64)
    owner = np.repeat(np.arange(len(templates)), durations)

    mel = np.stack([templates[p].mel for p in owner]).astype(np.float32)

    num_frames = owner.size
    # one spare frame so the resampled stream never ends short of the mel
    pose_frames = round_half_up(num_frames * SOURCE_POSE_FPS / MEL_FRAME_RATE) + 1
    times = np.arange(pose_frames, dtype=np.float64) / SOURCE_POSE_FPS
    pose_owner = owner[np.minimum((times * MEL_FRAME_RATE).astype(np.int64), num_frames - 1)]

    pose = np.empty((pose_frames, POSE_CHANNELS), dtype=np.float64)
    for i, p in enumerate(pose_owner):
        template = templates[p]
        pose[i] = template.pose_offset + 0.2 * np.sin(2 * np.pi * template.pose_freq * times[i]
                                                      + template.pose_phase)
    pose = gaussian_filter1d(pose, sigma=2.0, axis=0, mode='nearest')

    return MelSpectrogram(mel), PoseSequence(pose.astype(np.float32), SOURCE_POSE_FPS), durations


def make_synthetic_corpus(n_utts: int, seed: int = 0,
                          inventory: Optional[SymbolInventory] = None) -> List[Utterance]:
    """Utterances of 2-4 words whose streams follow fixed per-symbol templates"""
    if n_utts < 1:
        raise ValueError(f"n_utts must be positive, got {n_utts}")
    inventory = inventory or SymbolInventory.default()
    rng = np.random.default_rng(seed)

    corpus = []
    for index in range(n_utts):
        words = rng.choice(SYNTHETIC_WORDS, size=int(rng.integers(2, 5)))
        text = ' '.join(words)
        symbols = inventory.decode(tokenize(text, inventory=inventory).ids)

        mel, pose, durations = _render(symbols)
        pose = resample_pose(pose, mel.frame_rate_hz)
        mel, pose = align_lengths(mel, pose)
        corpus.append(Utterance(stem=f"synthetic_{seed}_{index:04d}", text=text, mel=mel, pose=pose,
                                durations=durations))

    logger.info(f"Generated {n_utts} synthetic utterances (seed {seed})")
    return corpus


def write_corpus_dir(corpus: Sequence[Utterance], path: str) -> None:
    """metadata.csv (stem|text) plus <stem>.mel.ftz and <stem>.pose.ftz"""
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ArtifactIOError(f"Cannot create corpus directory {path}: {e}", path=path) from e

    for utterance in corpus:
        save_mel(os.path.join(path, f"{utterance.stem}.mel.ftz"), utterance.mel)
        save_pose(os.path.join(path, f"{utterance.stem}.pose.ftz"), utterance.pose)

    metadata = pd.DataFrame({'stem': [u.stem for u in corpus], 'text': [u.text for u in corpus]})
    metadata_path = os.path.join(path, METADATA_FILE)
    try:
        metadata.to_csv(metadata_path, sep="|", header=False, index=False,
                        quoting=csv.QUOTE_NONE, escapechar="\\")
    except OSError as e:
        raise ArtifactIOError(f"Failed to write {metadata_path}: {e}", path=metadata_path) from e
    logger.info(f"Wrote {len(corpus)} utterances to {path}")


def load_corpus_dir(path: str) -> List[Utterance]:
    metadata_path = os.path.join(path, METADATA_FILE)
    if not os.path.exists(metadata_path):
        raise ArtifactIOError(f"Corpus metadata not found: {metadata_path}", path=metadata_path)

    metadata = pd.read_csv(metadata_path, sep='|', header=None, names=['stem', 'text'],
                           dtype=str, keep_default_na=False, quoting=csv.QUOTE_NONE, escapechar="\\")
    corpus = []
    for row in metadata.itertuples(index=False):
        mel = load_mel(os.path.join(path, f"{row.stem}.mel.ftz"))
        pose = load_pose(os.path.join(path, f"{row.stem}.pose.ftz"))
        if not np.isclose(pose.frame_rate_hz, mel.frame_rate_hz):
            pose = resample_pose(pose, mel.frame_rate_hz)
        mel, pose = align_lengths(mel, pose)
        corpus.append(Utterance(stem=row.stem, text=row.text, mel=mel, pose=pose))

    logger.info(f"Loaded {len(corpus)} utterances from {path}")
    return corpus


def corpus_summary(corpus: Sequence[Utterance]) -> Dict[str, float]:
    frames = [u.mel.num_frames for u in corpus]
    return {
        'utterances': len(corpus),
        'frames': int(np.sum(frames)) if frames else 0,
        'seconds': float(np.sum(frames) / MEL_FRAME_RATE) if frames else 0.0,
    }
