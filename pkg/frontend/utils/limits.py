# parameter limits and range checks for the command line

from typing import Optional


class DenoiseLimits:
    """Limits for denoising parameters"""
    # gaussian noise std in image units (HU allowed)
    STD_MIN = 0.0
    STD_MAX = 1000.0

    # poisson photon scale
    LAMBDA_MIN = 1e-3
    LAMBDA_MAX = 1e6
    LAMBDA_DEFAULT = 30.0

    # similar pixels per pixel (2D) or slice range (volume)
    K_MIN = 1
    K_MAX = 64
    K_DEFAULT = 8

    # patch side, odd
    PATCH_MIN = 1
    PATCH_MAX = 31
    PATCH_DEFAULT = 3
    MASK_PATCH_DEFAULT = 7

    # mask threshold in HU
    DTH_MIN = 0.0
    DTH_MAX = 4000.0
    DTH_DEFAULT = 30.0

    # optimisation
    STEPS_MIN = 1
    STEPS_MAX = 10_000_000
    STEPS_DEFAULT = 1000
    BATCH_MIN = 1
    BATCH_MAX = 512
    BATCH_DEFAULT = 4
    LR_MIN = 1e-8
    LR_MAX = 1.0
    LR_DEFAULT = 5e-4
    CROP_MIN = 4
    CROP_MAX = 4096

    # network widths
    WIDTH_MIN = 1
    WIDTH_MAX = 512

    # worker threads
    THREADS_MIN = 1
    THREADS_MAX = 256
    THREADS_DEFAULT = 1

    # zcd draws
    ZCD_M_MIN = 1
    ZCD_M_MAX = 100_000_000

    # procedural image size
    SIZE_MIN = 8
    SIZE_MAX = 4096
    SIZE_DEFAULT = 64

    # inference tiles
    TILE_MIN = 34

    @staticmethod
    def _range(name: str, value: float, lo: float, hi: float) -> tuple[bool, str]:
        if value < lo:
            return False, f"{name} too small (min: {lo})"
        if value > hi:
            return False, f"{name} too large (max: {hi})"
        return True, ""

    @staticmethod
    def validate_std(value: float) -> tuple[bool, str]:
        if value < 0:
            return False, "Std must be non-negative (>= 0)"
        return DenoiseLimits._range("Std", value, DenoiseLimits.STD_MIN, DenoiseLimits.STD_MAX)

    @staticmethod
    def validate_lambda(value: float) -> tuple[bool, str]:
        if value <= 0:
            return False, "Lambda must be positive (> 0)"
        return DenoiseLimits._range("Lambda", value, DenoiseLimits.LAMBDA_MIN,
                                    DenoiseLimits.LAMBDA_MAX)

    @staticmethod
    def validate_k(value: int) -> tuple[bool, str]:
        return DenoiseLimits._range("k", value, DenoiseLimits.K_MIN, DenoiseLimits.K_MAX)

    @staticmethod
    def validate_patch_size(value: int) -> tuple[bool, str]:
        if value % 2 == 0:
            return False, "Patch size must be odd"
        return DenoiseLimits._range("Patch size", value, DenoiseLimits.PATCH_MIN,
                                    DenoiseLimits.PATCH_MAX)

    @staticmethod
    def validate_dth(value: float) -> tuple[bool, str]:
        return DenoiseLimits._range("Threshold", value, DenoiseLimits.DTH_MIN,
                                    DenoiseLimits.DTH_MAX)

    @staticmethod
    def validate_steps(value: int) -> tuple[bool, str]:
        return DenoiseLimits._range("Steps", value, DenoiseLimits.STEPS_MIN,
                                    DenoiseLimits.STEPS_MAX)

    @staticmethod
    def validate_batch(value: int) -> tuple[bool, str]:
        return DenoiseLimits._range("Batch", value, DenoiseLimits.BATCH_MIN,
                                    DenoiseLimits.BATCH_MAX)

    @staticmethod
    def validate_lr(value: float) -> tuple[bool, str]:
        if value <= 0:
            return False, "Learning rate must be positive (> 0)"
        return DenoiseLimits._range("Learning rate", value, DenoiseLimits.LR_MIN,
                                    DenoiseLimits.LR_MAX)

    @staticmethod
    def validate_crop(value: Optional[int]) -> tuple[bool, str]:
        if value is None:
            return True, ""
        return DenoiseLimits._range("Crop", value, DenoiseLimits.CROP_MIN,
                                    DenoiseLimits.CROP_MAX)

    @staticmethod
    def validate_width(value: int) -> tuple[bool, str]:
        return DenoiseLimits._range("Width", value, DenoiseLimits.WIDTH_MIN,
                                    DenoiseLimits.WIDTH_MAX)

    @staticmethod
    def validate_threads(value: int) -> tuple[bool, str]:
        return DenoiseLimits._range("Threads", value, DenoiseLimits.THREADS_MIN,
                                    DenoiseLimits.THREADS_MAX)

    @staticmethod
    def validate_m(value: int) -> tuple[bool, str]:
        return DenoiseLimits._range("M", value, DenoiseLimits.ZCD_M_MIN, DenoiseLimits.ZCD_M_MAX)

    @staticmethod
    def validate_size(value: int) -> tuple[bool, str]:
        return DenoiseLimits._range("Size", value, DenoiseLimits.SIZE_MIN, DenoiseLimits.SIZE_MAX)

    @staticmethod
    def validate_peak(value: Optional[float]) -> tuple[bool, str]:
        if value is not None and value <= 0:
            return False, "Peak must be positive (> 0)"
        return True, ""

    @staticmethod
    def validate_seed(value: int) -> tuple[bool, str]:
        if value < 0 or value >= 1 << 64:
            return False, "Seed must be an unsigned 64-bit integer"
        return True, ""

    @staticmethod
    def validate_tile(value: Optional[int]) -> tuple[bool, str]:
        if value is None:
            return True, ""
        if value % 2:
            return False, "Tile must be even"
        if value < DenoiseLimits.TILE_MIN:
            return False, f"Tile too small (min: {DenoiseLimits.TILE_MIN})"
        return True, ""
