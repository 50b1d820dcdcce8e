"""slicevol: slice-wise latent Gaussian models for 3D volume synthesis.

Volumes are cut into 2D slices, each slice is compressed by a slice codec
(linear or VAE), and the sequence of codes along the slicing axis is modelled
by one Gaussian per latent dimension. Sampling that model and decoding gives
slice-coherent volumes. Evaluation tools (MMD, MS-SSIM, registration-based
atlas scoring) and a synthetic phantom generator come along for desk-scale
experiments.
"""

__version__ = "0.1.0"

from .errors import FormatError, LengthError, RegistrationError, SlicevolError, TrainingError, ValidationError
from .volume import LabelMap, Slice, Volume, load_labels, load_volume, save_labels, save_volume
from .phantom import PhantomParams, generate_cohort, generate_phantom, philox
from .codec import CodecModel, TrainConfig, train_linear_codec, train_vae_codec
from .latent import SliceLatentModel, fit_latent_model, fit_pipeline, sample_latent, synthesize_volume
from .metrics import MmdConfig, MsSsimConfig, dice, mmd2_batch, ms_ssim, ms_ssim_diversity
from .registration import AffineTransform, RegConfig, register_affine, warp_labels, warp_volume
from .ras import IntensitySegmenter, ras_score, segment, train_segmenter

__all__ = [
    "AffineTransform", "CodecModel", "FormatError", "IntensitySegmenter", "LabelMap", "LengthError", "MmdConfig",
    "MsSsimConfig", "PhantomParams", "RegConfig", "RegistrationError", "Slice", "SliceLatentModel", "SlicevolError",
    "TrainConfig", "TrainingError", "ValidationError", "Volume", "dice", "fit_latent_model", "fit_pipeline",
    "generate_cohort", "generate_phantom", "load_labels", "load_volume", "mmd2_batch", "ms_ssim",
    "ms_ssim_diversity", "philox", "ras_score", "register_affine", "sample_latent", "save_labels", "save_volume",
    "segment", "synthesize_volume", "train_linear_codec", "train_segmenter", "train_vae_codec", "warp_labels",
    "warp_volume",
]
