"""
随机噪声基线 - 在相同补丁区域内加入 PSNR 匹配的正态噪声
"""
import logging

import numpy as np
from scipy.optimize import brentq

from src.core.geometry import rasterize
from src.core.types import PIXEL_MAX, PIXEL_MIN, ImageBuffer, PatchSet
from src.evaluation.metrics import psnr, rms_for_psnr

logger = logging.getLogger(__name__)

PSNR_TOLERANCE = 0.1
MAX_SIGMA = 1e4


def _noisy(img: ImageBuffer, noise: np.ndarray, mask: np.ndarray, sigma: float) -> ImageBuffer:
    pixels = img.copy_pixels()
    pixels[mask] = np.clip(pixels[mask] + sigma * noise[mask], PIXEL_MIN, PIXEL_MAX)
    return ImageBuffer(pixels)


def random_baseline(
    img: ImageBuffer,
    patches: PatchSet,
    target_psnr: float,
    seed: int,
) -> ImageBuffer:
    """
    补丁掩码内加入零均值正态噪声，使掩码区域 PSNR 与 target_psnr 相差不超过 0.1 dB

    噪声方向由种子固定，只对幅度 σ 做求根；裁剪导致目标无法达到时返回能达到的最接近结果，
    并在日志中给出实际 PSNR。

    Raises:
        ValueError: 补丁集合为空
    """
    if len(patches) == 0:
        raise ValueError("随机基线需要非空的补丁集合")
    if not np.isfinite(target_psnr):
        # 攻击没有修改任何像素
        return img

    mask = rasterize(patches, img.dims)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(img.pixels.shape)

    def gap(sigma: float) -> float:
        return psnr(img, _noisy(img, noise, mask, sigma), mask) - target_psnr

    lo = rms_for_psnr(target_psnr) * 1e-3
    hi = rms_for_psnr(target_psnr)
    while gap(hi) > 0 and hi < MAX_SIGMA:
        hi *= 2.0

    if gap(hi) > 0:
        result = _noisy(img, noise, mask, hi)
        logger.warning(
            f"⚠️  裁剪后无法达到目标 PSNR {target_psnr:.2f}dB，实际 {psnr(img, result, mask):.2f}dB"
        )
        return result

    sigma = brentq(gap, lo, hi, xtol=1e-9)
    result = _noisy(img, noise, mask, sigma)
    achieved = psnr(img, result, mask)
    if abs(achieved - target_psnr) > PSNR_TOLERANCE:
        logger.warning(f"⚠️  随机基线 PSNR 偏差过大: 目标 {target_psnr:.2f}dB, 实际 {achieved:.2f}dB")
    else:
        logger.debug(f"随机基线: σ={sigma:.4f}, PSNR={achieved:.2f}dB")
    return result
