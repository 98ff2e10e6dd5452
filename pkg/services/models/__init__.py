# services/models/__init__.py
from .params import (
    AcousticUNetParams, DiffusionParams, EncoderParams, GestureUNetParams, ModelParams, PrenetParams, LOSS_TERMS,
)
from .diffusion import Diffusion, NoiseSchedule, forward_sample, sample_ode, sample_sde, score_matching_loss
from .encoder import TextEncoder, duration_loss, durations_to_frames, prior_loss
from .acoustic_unet import AcousticUNet
from .gesture_decoder import ConformerPrenet, GestureUNet
from .speech_gesture import SpeechGestureModel, SynthesisOutput, TRAINING_MODES

__all__ = [
    'AcousticUNetParams',
    'DiffusionParams',
    'EncoderParams',
    'GestureUNetParams',
    'ModelParams',
    'PrenetParams',
    'LOSS_TERMS',
    'Diffusion',
    'NoiseSchedule',
    'forward_sample',
    'sample_ode',
    'sample_sde',
    'score_matching_loss',
    'TextEncoder',
    'duration_loss',
    'durations_to_frames',
    'prior_loss',
    'AcousticUNet',
    'ConformerPrenet',
    'GestureUNet',
    'SpeechGestureModel',
    'SynthesisOutput',
    'TRAINING_MODES',
]
