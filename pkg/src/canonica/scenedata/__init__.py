"""Clip ingestion, on-disk formats and the synthetic sprite generator."""

from .clip import ClipError, VideoClip, load_clip, save_clip, temporal_subsample
from .synth import MotionProgram, SpriteScene, SpriteSpec, SynthConfig, default_sprites, synth_generate

__all__ = [
    "ClipError", "VideoClip", "load_clip", "save_clip", "temporal_subsample",
    "MotionProgram", "SpriteScene", "SpriteSpec", "SynthConfig", "default_sprites",
    "synth_generate",
]
