from .backend import DiffusionBackend, TinyBackend, image_to_tensor, tensor_to_image
from .extractor import (
    ExtractionConfig,
    add_noise,
    denoise_window,
    dump_block_activations,
    encode_to_latent,
    extract,
    preprocess_geometry,
    preprocess_image,
)
from .schedule import NoiseSchedule

__all__ = [
    "DiffusionBackend",
    "ExtractionConfig",
    "NoiseSchedule",
    "TinyBackend",
    "add_noise",
    "denoise_window",
    "dump_block_activations",
    "encode_to_latent",
    "extract",
    "image_to_tensor",
    "preprocess_geometry",
    "preprocess_image",
    "tensor_to_image",
]
