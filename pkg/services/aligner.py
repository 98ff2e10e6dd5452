# services/aligner.py
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

from .error_handler import AlignmentError

logger = logging.getLogger(__name__)

MAX_BRUTE_FORCE_CANDIDATES = 10 ** 6
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DurationAlignment:
    """Per-symbol frame counts; every count is at least one frame"""
    durations: np.ndarray

    def __post_init__(self):
        durations = np.asarray(self.durations, dtype=np.int64)
        if durations.ndim != 1 or durations.size == 0:
            raise AlignmentError(f"Durations must be a non-empty vector, got shape {durations.shape}")
        if np.any(durations < 1):
            raise AlignmentError(f"Every duration must be >= 1, got {durations.tolist()}")
        object.__setattr__(self, 'durations', durations)

    @property
    def total(self) -> int:
        return int(self.durations.sum())

    def frame_map(self) -> np.ndarray:
        """Symbol index for every frame"""
        return np.repeat(np.arange(self.durations.size), self.durations)

    def to_path(self) -> np.ndarray:
        """Hard alignment matrix [P x T]"""
        path = np.zeros((self.durations.size, self.total), dtype=np.float32)
        path[self.frame_map(), np.arange(self.total)] = 1.0
        return path


def gaussian_loglik(mu_tilde: np.ndarray, y: np.ndarray) -> np.ndarray:
    """values[p, t] = log N(y_t; mu_p, I)"""
    mu_tilde = np.asarray(mu_tilde, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mu_tilde.ndim != 2 or y.ndim != 2:
        raise AlignmentError(f"Expected 2-D inputs, got {mu_tilde.shape} and {y.shape}")
    if mu_tilde.shape[1] != y.shape[1]:
        raise AlignmentError(f"Channel mismatch: means have {mu_tilde.shape[1]}, frames have {y.shape[1]}")

    channels = y.shape[1]
    squared = np.sum((y[None, :, :] - mu_tilde[:, None, :]) ** 2, axis=-1)
    return -0.5 * (channels * _LOG_2PI + squared)


def _check_matrix(L: np.ndarray) -> np.ndarray:
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2:
        raise AlignmentError(f"Log-likelihood matrix must be 2-D, got shape {L.shape}")
    P, T = L.shape
    if P < 1 or P > T:
        raise AlignmentError(f"No monotonic alignment of {P} symbols onto {T} frames")
    if not np.all(np.isfinite(L)):
        raise AlignmentError("Log-likelihood matrix has non-finite entries")
    return L


def _check_alignment(alignment: DurationAlignment, P: int, T: int) -> None:
    if alignment.durations.size != P or alignment.total != T:
        raise AlignmentError(f"Alignment {alignment.durations.tolist()} does not cover {P} symbols / {T} frames")


def mas_search(L: np.ndarray) -> DurationAlignment:
    """Viterbi-style monotonic alignment search; ties stay on the current symbol"""
    L = _check_matrix(L)
    P, T = L.shape

    Q = np.full((P, T), -np.inf)
    Q[0, 0] = L[0, 0]
    for t in range(1, T):
        Q[0, t] = Q[0, t - 1] + L[0, t]
        for p in range(1, min(t + 1, P)):
            Q[p, t] = L[p, t] + max(Q[p, t - 1], Q[p - 1, t - 1])

    frame_map = np.empty(T, dtype=np.int64)
    p = P - 1
    for t in range(T - 1, 0, -1):
        frame_map[t] = p
        if p > 0 and Q[p, t - 1] < Q[p - 1, t - 1]:
            p -= 1
    frame_map[0] = p

    alignment = DurationAlignment(np.bincount(frame_map, minlength=P))
    if __debug__:
        _check_alignment(alignment, P, T)
    return alignment


def alignment_score(L: np.ndarray, alignment: Union[DurationAlignment, Sequence[int]]) -> float:
    """Sum of L[a(t), t] accumulated in time order"""
    L = np.asarray(L, dtype=np.float64)
    if not isinstance(alignment, DurationAlignment):
        alignment = DurationAlignment(alignment)
    _check_alignment(alignment, L.shape[0], L.shape[1])

    score = 0.0
    for t, p in enumerate(alignment.frame_map()):
        score += L[p, t]
    return float(score)


def brute_force_align(L: np.ndarray) -> DurationAlignment:
    """Exhaustive search over every monotone surjective alignment"""
    L = _check_matrix(L)
    P, T = L.shape

    candidates = math.comb(T - 1, P - 1)
    if candidates > MAX_BRUTE_FORCE_CANDIDATES:
        raise AlignmentError(f"{candidates} candidate alignments exceed the {MAX_BRUTE_FORCE_CANDIDATES} limit")

    best_score, best_key, best = -np.inf, None, None
    for boundaries in itertools.combinations(range(1, T), P - 1):
        edges = (0,) + boundaries + (T,)
        alignment = DurationAlignment(np.diff(edges))
        score = alignment_score(L, alignment)
        # Same tie-break as the DP backtrack: latest frames on the highest symbols
        key = tuple(alignment.frame_map()[::-1])
        if score > best_score or (score == best_score and key > best_key):
            best_score, best_key, best = score, key, alignment

    return best


def upsample_means(mu_tilde: np.ndarray, alignment: Union[DurationAlignment, Sequence[int]]) -> np.ndarray:
    """Repeat row p of mu_tilde d_p times"""
    mu_tilde = np.asarray(mu_tilde)
    if not isinstance(alignment, DurationAlignment):
        alignment = DurationAlignment(alignment)
    if mu_tilde.ndim != 2 or mu_tilde.shape[0] != alignment.durations.size:
        raise AlignmentError(
            f"{alignment.durations.size} durations for means of shape {mu_tilde.shape}"
        )
    return np.repeat(mu_tilde, alignment.durations, axis=0)


@torch.no_grad()
def mas_batch(log_prior: torch.Tensor, x_lengths: torch.Tensor, y_lengths: torch.Tensor) -> torch.Tensor:
    """Hard alignment paths [B x P x T] for a padded batch of log-likelihood matrices"""
    values = log_prior.detach().to('cpu', torch.float64).numpy()
    paths = np.zeros(values.shape, dtype=np.float32)

    for b, (p_len, t_len) in enumerate(zip(x_lengths.tolist(), y_lengths.tolist())):
        alignment = mas_search(values[b, :p_len, :t_len])
        paths[b, :p_len, :t_len] = alignment.to_path()

    return torch.from_numpy(paths).to(device=log_prior.device, dtype=log_prior.dtype)
