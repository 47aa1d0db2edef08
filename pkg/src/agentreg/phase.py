"""Fourier phase texture extraction and fusion into coarse image features.

The texture map keeps only the phase spectrum of each channel: the
amplitude spectrum is flattened to its spatial mean before the inverse
transform, which strips illumination/contrast content and leaves the
structural layout. Frequencies with zero modulus carry no phase and
contribute nothing to the reconstruction (a constant image therefore maps
back to a constant, not to an impulse).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError
from .numerics import (
    ConvStackWeights, conv_stack_backward, conv_stack_forward_cached, dft2,
    idft2,
)

_IMAG_RESIDUE_TOL = 1e-9


@dataclass
class PhaseMap:
    """Per-channel phase texture plus the amplitude constant that scaled it."""

    texture: np.ndarray             # (H, W, 3)
    amplitude_constant: np.ndarray  # (3,)


def extract_phase_map(image: np.ndarray) -> PhaseMap:
    """Phase-only reconstruction of an H x W x 3 image.

    Per channel: take the 2D DFT, replace the amplitude spectrum by its
    spatial mean c, keep the phase, and invert. The result is real up to
    floating-point residue, which is asserted below 1e-9 and discarded.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    if h < 2 or w < 2:
        raise DimensionError("image must be at least 2 x 2")

    texture = np.empty_like(image)
    constants = np.empty(3)
    for ch in range(3):
        spectrum = dft2(image[:, :, ch])
        amplitude = np.abs(spectrum)
        peak = amplitude.max()
        if peak == 0.0:
            raise DegenerateInputError(f"channel {ch} is all zero; phase undefined")
        c = float(amplitude.mean())
        # Unit phasor e^{i*phase}; frequencies with no energy stay silent.
        phasor = np.zeros_like(spectrum)
        live = amplitude > 1e-12 * peak
        phasor[live] = spectrum[live] / amplitude[live]
        recon = idft2(c * phasor)
        residue = float(np.max(np.abs(recon.imag)))
        if residue >= _IMAG_RESIDUE_TOL:
            raise DegenerateInputError(
                f"channel {ch}: imaginary residue {residue:.3e} exceeds tolerance")
        texture[:, :, ch] = recon.real
        constants[ch] = c
    return PhaseMap(texture=texture, amplitude_constant=constants)


def area_downsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Block-mean downsampling; input dims must be integer multiples."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[:2]
    if h % out_h or w % out_w:
        raise DimensionError(
            f"cannot area-average {h}x{w} down to {out_h}x{out_w}: "
            "non-integer block size")
    bh, bw = h // out_h, w // out_w
    return x.reshape(out_h, bh, out_w, bw, *x.shape[2:]).mean(axis=(1, 3))


def fuse_phase_features(base_features: np.ndarray, phase_map: PhaseMap,
                        adaptor: ConvStackWeights) -> np.ndarray:
    """base + adaptor(phase texture at coarse resolution)."""
    out, _ = fuse_phase_features_cached(base_features, phase_map, adaptor)
    return out


def fuse_phase_features_cached(base_features: np.ndarray, phase_map: PhaseMap,
                               adaptor: ConvStackWeights):
    """Fusion forward that keeps the adaptor cache for the backward pass."""
    base = np.asarray(base_features, dtype=np.float64)
    if base.ndim != 3:
        raise DimensionError(f"base features must be H' x W' x C, got {base.shape}")
    coarse = area_downsample(phase_map.texture, base.shape[0], base.shape[1])
    encoded, cache = conv_stack_forward_cached(coarse, adaptor)
    if encoded.shape[2] != base.shape[2]:
        raise DimensionError(
            f"adaptor emits {encoded.shape[2]} channels, features have {base.shape[2]}")
    return base + encoded, cache


def fuse_phase_backward(adaptor: ConvStackWeights, cache: dict,
                        d_fused: np.ndarray):
    """Gradients of the fused output w.r.t. adaptor weights and base features.

    The fusion is additive, so d(base) equals d_fused; the adaptor branch
    is pushed through the conv stack.
    """
    grads, _ = conv_stack_backward(adaptor, cache, d_fused)
    return grads, d_fused
