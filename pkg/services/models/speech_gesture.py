# services/models/speech_gesture.py
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional

import torch
import torch.nn as nn

from ..aligner import mas_batch
from .acoustic_unet import AcousticUNet
from .diffusion import Diffusion
from .encoder import TextEncoder, duration_loss, durations_to_frames, prior_loss
from .gesture_decoder import ConformerPrenet, GestureUNet
from .layers import generate_path, sequence_mask
from .params import LOSS_TERMS, ModelParams

logger = logging.getLogger(__name__)

TRAINING_MODES = ('joint', 'tts_only', 'motion_on_frozen_tts')


@dataclass
class SynthesisOutput:
    mel: torch.Tensor          # [B x 80 x T]
    pose: Optional[torch.Tensor]  # [B x 45 x T]
    mu: torch.Tensor           # upsampled mel means [B x 80 x T]
    mu_pose: Optional[torch.Tensor]
    mask: torch.Tensor         # [B x 1 x T]
    durations: torch.Tensor    # [B x P] integer frame counts
    log_durations: torch.Tensor


class SpeechGestureModel(nn.Module):
    """Text encoder with one shared alignment feeding an acoustic and a gesture diffusion decoder"""

    def __init__(self, params: ModelParams, n_vocab: int):
        super().__init__()
        self.params = params
        self.n_vocab = n_vocab
        self.n_feats = params.encoder.n_feats
        self.n_pose = params.gesture_decoder.n_feats

        self.encoder = TextEncoder(params.encoder, n_vocab)
        self.decoder = Diffusion(AcousticUNet(params.acoustic_decoder), params.diffusion)
        self.prenet = ConformerPrenet(params.prenet)
        self.motion_decoder = Diffusion(GestureUNet(params.gesture_decoder), params.diffusion)

    def tts_modules(self) -> List[nn.Module]:
        return [self.encoder, self.decoder]

    def gesture_modules(self) -> List[nn.Module]:
        return [self.prenet, self.motion_decoder]

    def tts_parameters(self) -> Iterator[nn.Parameter]:
        for module in self.tts_modules():
            yield from module.parameters()

    def gesture_parameters(self) -> Iterator[nn.Parameter]:
        for module in self.gesture_modules():
            yield from module.parameters()

    def align(self, mu_x, x_mask, x_lengths, y, y_lengths):
        """MAS on detached means; returns the hard path [B x P x T]"""
        log_prior = -0.5 * (self.n_feats * math.log(2 * math.pi)
                            + torch.sum((y.unsqueeze(1) - mu_x.detach().transpose(1, 2).unsqueeze(-1)) ** 2, dim=2))
        return mas_batch(log_prior, x_lengths, y_lengths)

    def compute_loss(self, x: torch.Tensor, x_lengths: torch.Tensor, y: torch.Tensor, y_lengths: torch.Tensor,
                     pose: Optional[torch.Tensor] = None, weights: Optional[Dict[str, float]] = None,
                     mode: str = 'joint', generator: Optional[torch.Generator] = None,
                     reduction: str = 'mean') -> Dict[str, torch.Tensor]:
        """Loss terms for a padded batch.

        x: [B x P] symbol ids, y: [B x 80 x T] mel, pose: [B x 45 x T]. A term is
        evaluated only when its weight is positive and the mode uses it; the
        returned dict holds the evaluated terms plus their weighted 'total'.
        """
        if mode not in TRAINING_MODES:
            raise ValueError(f"Unknown training mode '{mode}', expected one of {TRAINING_MODES}")
        weights = {term: 1.0 for term in LOSS_TERMS} | dict(weights or {})
        if mode == 'motion_on_frozen_tts':
            active = {'gesture_diffusion'}
        elif mode == 'tts_only':
            active = {'prior', 'duration', 'acoustic_diffusion'}
        else:
            active = set(LOSS_TERMS)
        active = {term for term in active if weights.get(term, 0.0) > 0}

        wants_gesture = 'gesture_diffusion' in active
        if wants_gesture and pose is None:
            raise ValueError("Gesture loss requested but the batch has no pose targets")

        with torch.set_grad_enabled(torch.is_grad_enabled() and mode != 'motion_on_frozen_tts'):
            enc = self.encoder.encode(x, x_lengths)
            mu_x, x_mask = enc.mu_tilde, enc.mask
            y_mask = sequence_mask(y_lengths, y.shape[-1]).unsqueeze(1).to(y.dtype)

            attn = self.align(mu_x, x_mask, x_lengths, y, y_lengths)
            mu_y = torch.matmul(attn.transpose(1, 2), mu_x.transpose(1, 2)).transpose(1, 2)

            losses: Dict[str, torch.Tensor] = {}
            if 'duration' in active:
                log_d_hat = self.encoder.predict_durations(enc)
                durations = torch.sum(attn.unsqueeze(1), dim=-1)
                losses['duration'] = duration_loss(log_d_hat, durations, x_mask, reduction=reduction)
            if 'prior' in active:
                losses['prior'] = prior_loss(mu_y, y, y_mask, reduction=reduction)
            if 'acoustic_diffusion' in active:
                losses['acoustic_diffusion'] = self.decoder.loss(y, y_mask, mu_y, generator, reduction=reduction)

        if wants_gesture:
            mu_pose = self.prenet(mu_y, y_mask)
            losses['gesture_diffusion'] = self.motion_decoder.loss(pose, y_mask, mu_pose, generator,
                                                                   reduction=reduction)

        total = torch.zeros((), dtype=y.dtype, device=y.device)
        for term, value in losses.items():
            total = total + weights[term] * value
        losses['total'] = total
        return losses

    @torch.no_grad()
    def synthesise(self, x: torch.Tensor, x_lengths: torch.Tensor, speech_steps: int = 50,
                   motion_steps: int = 500, temperature: float = 1.5, length_scale: float = 1.0,
                   stochastic: bool = False, generator: Optional[torch.Generator] = None,
                   with_gestures: bool = True) -> SynthesisOutput:
        enc = self.encoder.encode(x, x_lengths)
        mu_x, x_mask = enc.mu_tilde, enc.mask
        log_d_hat = self.encoder.predict_durations(enc)

        durations = torch.zeros(x.shape[0], x.shape[1], dtype=torch.long, device=x.device)
        for b, length in enumerate(x_lengths.tolist()):
            alignment = durations_to_frames(log_d_hat[b, 0, :length], length_scale)
            durations[b, :length] = torch.from_numpy(alignment.durations)

        y_lengths = durations.sum(dim=1)
        y_mask = sequence_mask(y_lengths, int(y_lengths.max())).unsqueeze(1).to(mu_x.dtype)
        attn_mask = x_mask.unsqueeze(-1) * y_mask.unsqueeze(2)
        attn = generate_path(durations, attn_mask.squeeze(1))
        mu_y = torch.matmul(attn.transpose(1, 2), mu_x.transpose(1, 2)).transpose(1, 2)

        logger.debug(f"Synthesising {int(y_lengths.max())} frames ({speech_steps}/{motion_steps} steps)")
        mel = self.decoder.reverse(mu_y, y_mask, speech_steps, temperature, stochastic, generator)

        pose = mu_pose = None
        if with_gestures:
            mu_pose = self.prenet(mu_y, y_mask)
            pose = self.motion_decoder.reverse(mu_pose, y_mask, motion_steps, temperature, stochastic, generator)

        return SynthesisOutput(mel=mel, pose=pose, mu=mu_y, mu_pose=mu_pose, mask=y_mask,
                               durations=durations, log_durations=log_d_hat)
