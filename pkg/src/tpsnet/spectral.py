"""Phase-only image reconstruction and the convolutional phase encoder."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

# Bins whose magnitude is below this fraction of the spectral peak are treated
# as exact zeros (phase 0). FFT round-off otherwise hands them a random phase.
ZERO_MAGNITUDE_RTOL = 1e-12


class DegenerateAmplitudeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PhaseImage:
    values: np.ndarray
    source_id: str = ""

    def to_png(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(self.values * 255.0).astype(np.uint8), mode="L").save(path)


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Rescale the last two axes to [0, 1]; constant planes map to all zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=(-2, -1), keepdims=True)
    span = x.max(axis=(-2, -1), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, 0.0)


def phase_spectrum(gray: np.ndarray) -> np.ndarray:
    """Phase of the 2-D DFT over the last two axes, 0 for zero-magnitude bins."""
    f = np.fft.fft2(gray)
    mag = np.abs(f)
    peak = mag.max(axis=(-2, -1), keepdims=True)
    phase = np.angle(f)
    return np.where(mag > ZERO_MAGNITUDE_RTOL * peak, phase, 0.0)


def phase_reconstruct_complex(gray: np.ndarray, R: float = 1.0) -> np.ndarray:
    """Inverse DFT of ``|R| * exp(j * phase)`` before taking the real part.

    Works on a single H x W image or a batch ``... x H x W``.
    """
    g = np.asarray(gray, dtype=np.float64)
    if R == 0 or not np.isfinite(R):
        raise DegenerateAmplitudeError("degenerate amplitude: R must be finite and non-zero")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite values in grayscale input")
    if g.ndim < 2 or g.shape[-1] < 2 or g.shape[-2] < 2:
        raise ValueError(f"need at least a 2x2 image, got shape {g.shape}")
    # An amplitude spectrum is a magnitude, so the sign of R is dropped.
    return np.fft.ifft2(abs(R) * np.exp(1j * phase_spectrum(g)))


def phase_only_reconstruct(gray: np.ndarray, R: float = 1.0, source_id: str = "") -> PhaseImage:
    return PhaseImage(minmax_normalize(phase_reconstruct_complex(gray, R).real), source_id)


def phase_images(grays: np.ndarray, R: float = 1.0) -> np.ndarray:
    """Batched reconstruction: N x H x W grayscale -> N x H x W normalized phase images."""
    return minmax_normalize(phase_reconstruct_complex(grays, R).real)


class PhaseEncoder(nn.Module):
    """Two conv/BN/ReLU/avg-pool blocks (1->16->32 channels) and a linear head."""

    def __init__(self, image_size: int, dim: int, widths: tuple[int, int] = (16, 32)):
        super().__init__()
        if image_size % 4:
            raise ValueError(f"phase encoder needs a size divisible by 4, got {image_size}")
        self.image_size = image_size
        c1, c2 = widths
        self.features = nn.Sequential(
            nn.Conv2d(1, c1, 3, padding=1),
            nn.BatchNorm2d(c1),
            nn.ReLU(),
            nn.AvgPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.BatchNorm2d(c2),
            nn.ReLU(),
            nn.AvgPool2d(2),
        )
        self.fc = nn.Linear(c2 * (image_size // 4) ** 2, dim)

    def forward(self, phase: torch.Tensor) -> torch.Tensor:
        """``phase``: N x H x W (or N x 1 x H x W) -> N x dim."""
        if phase.dim() == 3:
            phase = phase.unsqueeze(1)
        h, w = phase.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"phase image size {h}x{w} is not divisible by 4")
        if (h, w) != (self.image_size, self.image_size):
            raise ValueError(f"encoder built for {self.image_size}px, got {h}x{w}")
        return self.fc(self.features(phase).flatten(1))


def encode_phase(phase_image: PhaseImage | np.ndarray, encoder: PhaseEncoder) -> torch.Tensor:
    values = phase_image.values if isinstance(phase_image, PhaseImage) else phase_image
    h, w = np.shape(values)[-2:]
    if h % 4 or w % 4:
        raise ValueError(f"phase image size {h}x{w} is not divisible by 4")
    dtype = next(encoder.parameters()).dtype
    x = torch.as_tensor(np.asarray(values), dtype=dtype)
    return encoder(x.reshape(1, 1, h, w))[0]
