# services/models/params.py
from typing import List, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class EncoderParams(BaseModel):
    """Text encoder and duration predictor"""
    n_channels: int = Field(96, gt=0, description="Hidden width H")
    filter_channels: int = Field(384, gt=0, description="Feed-forward width inside attention blocks")
    filter_channels_dp: int = Field(96, gt=0, description="Duration predictor width")
    n_heads: int = Field(2, gt=0)
    n_layers: int = Field(2, gt=0, description="Number of attention blocks")
    kernel_size: int = Field(3, gt=0)
    p_dropout: float = Field(0.1, ge=0.0, lt=1.0)
    window_size: int = Field(4, ge=0, description="Relative position bias window")
    max_length: int = Field(512, gt=0, description="Longest accepted symbol sequence")
    n_feats: int = Field(80, gt=0)

    @model_validator(mode='after')
    def _heads_divide_channels(self):
        if self.n_channels % self.n_heads:
            raise ValueError(f"n_channels {self.n_channels} not divisible by n_heads {self.n_heads}")
        return self


class AcousticUNetParams(BaseModel):
    """2-D U-Net over [mel bins x frames]"""
    dim: int = Field(16, gt=0, description="Base channel width and time-embedding size")
    dim_mults: Tuple[int, ...] = Field((1, 2, 4), description="Width multiplier per resolution level")
    groups: int = Field(8, gt=0, description="Group count of the per-frame group norm")
    attention: bool = Field(True, description="Linear attention at every level")
    pe_scale: float = Field(1000.0, gt=0)
    n_feats: int = Field(80, gt=0)

    @property
    def depth(self) -> int:
        return len(self.dim_mults) - 1

    @model_validator(mode='after')
    def _check_shape(self):
        if not self.dim_mults:
            raise ValueError("dim_mults must not be empty")
        if self.n_feats % (2 ** self.depth):
            raise ValueError(f"n_feats {self.n_feats} must be divisible by 2^{self.depth}")
        for width in (self.dim, *(self.dim * m for m in self.dim_mults)):
            if width % self.groups:
                raise ValueError(f"channel width {width} not divisible by {self.groups} groups")
        return self


class PrenetParams(BaseModel):
    """Conformer mapping upsampled mel means to pose means"""
    d_model: int = Field(96, gt=0)
    n_layers: int = Field(2, gt=0)
    n_heads: int = Field(2, gt=0)
    ff_mult: int = Field(4, gt=0)
    conv_kernel: int = Field(21, gt=0)
    p_dropout: float = Field(0.1, ge=0.0, lt=1.0)
    n_in: int = Field(80, gt=0)
    n_out: int = Field(45, gt=0)

    @field_validator('conv_kernel')
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        return value

    @model_validator(mode='after')
    def _heads_divide_channels(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        return self


class GestureUNetParams(BaseModel):
    """1-D U-Net over pose channels"""
    dim: int = Field(256, gt=0, description="Hidden channels")
    dim_mults: Tuple[int, ...] = Field((1, 1, 1))
    kernel_size: int = Field(5, gt=0)
    groups: int = Field(8, gt=0)
    pe_scale: float = Field(1000.0, gt=0)
    n_feats: int = Field(45, gt=0)

    @property
    def depth(self) -> int:
        return len(self.dim_mults) - 1

    @model_validator(mode='after')
    def _check_shape(self):
        if not self.dim_mults:
            raise ValueError("dim_mults must not be empty")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        for width in (self.dim, *(self.dim * m for m in self.dim_mults)):
            if width % self.groups:
                raise ValueError(f"channel width {width} not divisible by {self.groups} groups")
        return self


class DiffusionParams(BaseModel):
    beta0: float = Field(0.05, gt=0)
    beta1: float = Field(20.0, gt=0)
    t_min: float = Field(1e-4, gt=0, lt=1)

    @model_validator(mode='after')
    def _increasing(self):
        if not self.beta0 < self.beta1:
            raise ValueError(f"beta0 {self.beta0} must be below beta1 {self.beta1}")
        return self


class ModelParams(BaseModel):
    encoder: EncoderParams = Field(default_factory=EncoderParams)
    acoustic_decoder: AcousticUNetParams = Field(default_factory=AcousticUNetParams)
    prenet: PrenetParams = Field(default_factory=PrenetParams)
    gesture_decoder: GestureUNetParams = Field(default_factory=GestureUNetParams)
    diffusion: DiffusionParams = Field(default_factory=DiffusionParams)

    @model_validator(mode='after')
    def _consistent_channels(self):
        n_mels = self.encoder.n_feats
        if self.acoustic_decoder.n_feats != n_mels or self.prenet.n_in != n_mels:
            raise ValueError("encoder, acoustic decoder and prenet disagree on the mel channel count")
        if self.prenet.n_out != self.gesture_decoder.n_feats:
            raise ValueError("prenet output and gesture decoder disagree on the pose channel count")
        return self

    @classmethod
    def from_config(cls, config_manager, overrides: dict = None) -> 'ModelParams':
        """Build from models.yaml, with optional per-component override sections"""
        sections = {}
        for component in cls.model_fields:
            section = config_manager.get_model_config(component)
            section.update((overrides or {}).get(component, {}) or {})
            sections[component] = section
        return cls(**sections)


LOSS_TERMS: List[str] = ['prior', 'duration', 'acoustic_diffusion', 'gesture_diffusion']
