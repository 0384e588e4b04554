"""Joint-diffusion panorama generation with merged attention."""

from .backbone import (
    AttnBlockDescriptor,
    BackboneAdapter,
    ToyDenoiser,
    ToyDenoiserConfig,
    enumerate_attention_layers,
    make_toy_model,
    predict_eps,
    train_toy_denoiser,
)
from .codec import DecoderSpec, RunManifest, decode, load_manifest, write_manifest
from .conditioning import PromptEmbedding, ToyTextEmbedder
from .mad import MergeSchedule, is_merged, mad_attention, route_attention
from .metrics import ScoreReport, evaluate_run
from .sampler import (
    ConsistencyParam,
    NoiseSchedule,
    SamplerConfig,
    generate_panorama,
    replay_run,
)
from .tiling import PanoramaSpec, ViewLayout, ViewStack, merge, plan_views, split

__version__ = "0.1.0"

__all__ = [
    "AttnBlockDescriptor",
    "BackboneAdapter",
    "ConsistencyParam",
    "DecoderSpec",
    "MergeSchedule",
    "NoiseSchedule",
    "PanoramaSpec",
    "PromptEmbedding",
    "RunManifest",
    "SamplerConfig",
    "ScoreReport",
    "ToyDenoiser",
    "ToyDenoiserConfig",
    "ToyTextEmbedder",
    "ViewLayout",
    "ViewStack",
    "decode",
    "enumerate_attention_layers",
    "evaluate_run",
    "generate_panorama",
    "is_merged",
    "load_manifest",
    "mad_attention",
    "make_toy_model",
    "merge",
    "plan_views",
    "predict_eps",
    "replay_run",
    "route_attention",
    "split",
    "train_toy_denoiser",
    "write_manifest",
    "__version__",
]
