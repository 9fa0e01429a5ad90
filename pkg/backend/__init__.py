# public api of the denoising backend

from backend.baselines_metrics import NlmParams, nlm_denoise, psnr, ssim
from backend.errors import ConfigError, DataError, DenoiseError
from backend.neural_denoiser import (
    ArchSpec, DenoiserModel, OptimState, adam_step, backward, cosine_lr, forward,
    gradient_check, load_model, save_model
)
from backend.noise_sim import NoiseKind, NoiseSpec, add_gaussian, add_poisson
from backend.sim_search import (
    NearestImages, PairingMethod, construct_similar_pair, knn_similar_pixels,
    load_neighbors, materialize_nearest_image, patch_distance, save_neighbors
)
from backend.tensor_io import Domain, Tensor, load_tensor, save_tensor
from backend.training import (
    DatasetHandle, TrainConfig, TrainMode, Trainer, augment, denoise, estimate_zcd,
    iterative_refine, train
)
from backend.volume_pairing import (
    DissimilarMask, LossKind, SliceSampler, dissimilar_mask, distance_map, masked_loss,
    sample_similar_slice
)

__version__ = "1.0.0"

__all__ = [
    'ArchSpec', 'ConfigError', 'DataError', 'DatasetHandle', 'DenoiseError',
    'DenoiserModel', 'DissimilarMask', 'Domain', 'LossKind', 'NearestImages',
    'NlmParams', 'NoiseKind', 'NoiseSpec', 'OptimState', 'PairingMethod',
    'SliceSampler', 'Tensor', 'TrainConfig', 'TrainMode', 'Trainer',
    'adam_step', 'add_gaussian', 'add_poisson', 'augment', 'backward',
    'construct_similar_pair', 'cosine_lr', 'denoise', 'dissimilar_mask',
    'distance_map', 'estimate_zcd', 'forward', 'get_version', 'gradient_check',
    'iterative_refine', 'knn_similar_pixels', 'load_model', 'load_neighbors',
    'load_tensor', 'masked_loss', 'materialize_nearest_image', 'nlm_denoise',
    'patch_distance', 'psnr', 'sample_similar_slice', 'save_model',
    'save_neighbors', 'save_tensor', 'ssim', 'train'
]


def get_version() -> str:
    return __version__
