"""Domain prompt generation: image-text re-pairing and the prompt contrastive losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import (DomainPromptBank, EncoderBackend, PromptTemplate, configure_trainable,
                       encode_domain_prompts)
from .config import RunConfig
from .dataset import DomainDataset, label_guard
from .pseudolabel import kmeans_cluster
from .training import (batch_pixels, embed_images, epoch_batches, head_generator, make_optimizer,
                       resolve_num_categories, steps_per_epoch, to_tensor)

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RePairing:
    y: torch.Tensor
    paired_text: torch.Tensor


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def repair_pairs(image_embs: torch.Tensor, text_embs: torch.Tensor) -> RePairing:
    """Pair each image with its most similar prompt (lowest index on ties)."""
    sims = image_embs @ text_embs.T
    # torch.argmax does not promise first-occurrence on CPU ties; numpy does.
    y = torch.as_tensor(np.argmax(sims.detach().cpu().numpy(), axis=1), dtype=torch.long)
    return RePairing(y, text_embs[y])


def _as_labels(pairing) -> torch.Tensor:
    y = pairing.y if isinstance(pairing, RePairing) else pairing
    return torch.as_tensor(np.asarray(y) if not torch.is_tensor(y) else y, dtype=torch.long)


def loss_i2t(image_embs: torch.Tensor, pairing, text_embs: torch.Tensor, tau: float) -> torch.Tensor:
    """Image-to-text InfoNCE over the N in-batch paired texts (duplicates kept)."""
    _check_tau(tau)
    y = _as_labels(pairing)
    paired = text_embs[y]
    logits = image_embs @ paired.T / tau
    return -torch.diagonal(F.log_softmax(logits, dim=1)).mean()


def loss_t2i(image_embs: torch.Tensor, y, text_embs: torch.Tensor, tau: float) -> torch.Tensor:
    """Text-to-image loss: each anchor prompt against all N images, averaged over its positives."""
    _check_tau(tau)
    y = _as_labels(y)
    n = image_embs.shape[0]
    anchors = text_embs[y]                                   # N x d, row i is T_{y_i}
    log_p = F.log_softmax(anchors @ image_embs.T / tau, dim=1)   # over images j
    positive = (y[:, None] == y[None, :]).to(log_p.dtype)
    per_sample = -(log_p * positive).sum(1) / positive.sum(1)
    return per_sample.sum() / n


def prompt_loss(image_embs, y, text_embs, tau):
    return loss_i2t(image_embs, y, text_embs, tau) + loss_t2i(image_embs, y, text_embs, tau)


def initial_pseudo_labels(backend: EncoderBackend, datasets, K: int, seed: int, n_init: int = 10):
    """K-means on frozen image embeddings, one clustering per domain."""
    labels = []
    for ds in datasets:
        feats = embed_images(backend, ds.pixel_array())
        assignment, _ = kmeans_cluster(feats, K, seed=[seed, ds.domain_id], n_init=n_init, domain_id=ds.domain_id)
        labels.append(assignment.labels)
    return labels


@dataclass
class PromptTrainingResult:
    bank: DomainPromptBank
    template: PromptTemplate
    kmeans_labels: list[np.ndarray]
    history: list[dict] = field(default_factory=list)


def init_prompt_bank(config: RunConfig, num_categories: int, d_token: int) -> DomainPromptBank:
    return DomainPromptBank(num_categories, config.M, d_token, generator=head_generator(config, 1))


def train_prompts(datasets: tuple[DomainDataset, DomainDataset], backend: EncoderBackend, config: RunConfig,
                  template: PromptTemplate | None = None) -> PromptTrainingResult:
    """Tune the per-domain prompt slots against a frozen backbone."""
    template = template or PromptTemplate(M=config.M)
    C = resolve_num_categories(config, datasets)
    bank = init_prompt_bank(config, C, backend.d_token)
    history: list[dict] = []
    with label_guard():
        params = configure_trainable({"prompt_tokens"}, backend=backend, prompt_bank=bank)
        km_labels = initial_pseudo_labels(backend, datasets, C, config.seed, config.kmeans_n_init)
        if config.epochs_dpg == 0:
            return PromptTrainingResult(bank, template, km_labels, history)

        rng = np.random.default_rng([config.seed, 11])
        steps = steps_per_epoch(datasets, config.batch_size)
        opt, sched = make_optimizer(params, config.prompt_lr, steps * config.epochs_dpg, config.schedule)
        pixels = [ds.pixel_array() for ds in datasets]

        for epoch in range(config.epochs_dpg):
            order = [epoch_batches(rng, len(ds), config.batch_size, steps) for ds in datasets]
            sums = np.zeros((2, 2))
            for step in range(steps):
                opt.zero_grad()
                total = 0.0
                for d in range(2):
                    idx = order[d][step]
                    with torch.no_grad():
                        img = backend.encode_image(to_tensor(batch_pixels(pixels[d], idx, rng, config.augment, config.augment_params)))
                    txt = encode_domain_prompts(bank, template, d, backend)
                    if epoch < config.warmup_epochs:
                        y = torch.as_tensor(km_labels[d][idx], dtype=torch.long)
                    else:
                        y = repair_pairs(img, txt.detach()).y
                    l_i2t = loss_i2t(img, y, txt, config.tau)
                    l_t2i = loss_t2i(img, y, txt, config.tau)
                    total = total + (l_i2t + l_t2i) / 2
                    sums[d] += [l_i2t.item(), l_t2i.item()]
                total.backward()
                opt.step()
                sched.step()
            for d in range(2):
                row = {"epoch": epoch, "domain": d, "L_i2t": sums[d, 0] / steps, "L_t2i": sums[d, 1] / steps}
                history.append(row)
            log.info("dpg epoch %d: %s", epoch, [round(r["L_i2t"] + r["L_t2i"], 4) for r in history[-2:]])
    return PromptTrainingResult(bank, template, km_labels, history)


def epoch_mean_prompt_loss(history: list[dict]) -> np.ndarray:
    epochs = sorted({r["epoch"] for r in history})
    return np.array([np.mean([r["L_i2t"] + r["L_t2i"] for r in history if r["epoch"] == e]) for e in epochs])
