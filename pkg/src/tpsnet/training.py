"""Optimizer, batching and encoding helpers shared by both training stages."""

from __future__ import annotations

import math
import os

import numpy as np
import torch

from .backbone import EncoderBackend
from .config import RunConfig
from .dataset import AugmentParams, DomainDataset, augment_array

DTYPE = torch.float64


def apply_thread_limit() -> None:
    """Honor ``TPSNET_THREADS`` as a cap on torch intra-op threads."""
    value = os.environ.get("TPSNET_THREADS")
    if value:
        torch.set_num_threads(max(1, int(value)))


def make_optimizer(params, lr: float, total_steps: int, schedule: str):
    opt = torch.optim.Adam(params, lr=lr)
    if schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1))
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)
    return opt, sched


def steps_per_epoch(datasets, batch_size: int) -> int:
    for ds in datasets:
        if len(ds) < batch_size:
            raise ValueError(f"domain {ds.domain_id} has {len(ds)} samples, fewer than batch size {batch_size}")
    return math.ceil(max(len(ds) for ds in datasets) / batch_size)


def epoch_batches(rng: np.random.Generator, n: int, batch_size: int, steps: int) -> np.ndarray:
    """``steps`` x ``batch_size`` indices drawn from back-to-back permutations."""
    need = steps * batch_size
    chunks = []
    while sum(len(c) for c in chunks) < need:
        chunks.append(rng.permutation(n))
    return np.concatenate(chunks)[:need].reshape(steps, batch_size)


def batch_pixels(pixels: np.ndarray, idx: np.ndarray, rng: np.random.Generator, augment: bool,
                 params: AugmentParams = AugmentParams()) -> np.ndarray:
    if not augment:
        return pixels[idx]
    return np.stack([augment_array(pixels[i], rng, params) for i in idx])


def to_tensor(x: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(x), dtype=DTYPE)


@torch.no_grad()
def embed_images(backend: EncoderBackend, pixels: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = [backend.encode_image(to_tensor(pixels[i : i + chunk])) for i in range(0, len(pixels), chunk)]
    return torch.cat(out).numpy()


def resolve_num_categories(config: RunConfig, datasets: tuple[DomainDataset, DomainDataset]) -> int:
    if config.num_categories is not None:
        return config.num_categories
    return max(ds.num_categories for ds in datasets)


def head_generator(config: RunConfig, stage: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(np.random.SeedSequence([config.seed, stage]).generate_state(1)[0]))
