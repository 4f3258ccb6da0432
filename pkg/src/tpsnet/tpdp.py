"""Text-phase dual-prior network: fusion, cross-attention synergy, losses, training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import (DomainPromptBank, EncoderBackend, PromptTemplate, configure_trainable,
                       encode_domain_prompts, l2_normalize)
from .config import RunConfig
from .dataset import DomainDataset, label_guard, to_grayscale
from .pseudolabel import (PrototypeBank, PseudoLabelAssignment, align_to_prompts, init_prototypes, kmeans_cluster,
                          reassign_by_prototype)
from .dpg import repair_pairs
from .spectral import PhaseEncoder, phase_images
from .training import (DTYPE, batch_pixels, embed_images, epoch_batches, head_generator, make_optimizer,
                       resolve_num_categories, steps_per_epoch, to_tensor)

log = logging.getLogger(__name__)


def _seeded_linear(d: int, g: torch.Generator, zero: bool = False) -> nn.Linear:
    lin = nn.Linear(d, d, dtype=DTYPE)
    with torch.no_grad():
        if zero:
            lin.weight.zero_()
        else:
            lin.weight.copy_(torch.randn(d, d, generator=g, dtype=DTYPE) / d**0.5)
        lin.bias.zero_()
    return lin


class FusionHead(nn.Module):
    """Single-head self-attention over the [rgb, phase] token pair, LayerNorm, mean."""

    def __init__(self, d: int, generator: torch.Generator):
        super().__init__()
        self.q = _seeded_linear(d, generator)
        self.k = _seeded_linear(d, generator)
        self.v = _seeded_linear(d, generator, zero=True)
        self.o = _seeded_linear(d, generator, zero=True)
        self.norm = nn.LayerNorm(d, dtype=DTYPE)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """``tokens``: N x 2 x d -> N x d unit vectors."""
        d = tokens.shape[-1]
        att = torch.softmax(self.q(tokens) @ self.k(tokens).transpose(-1, -2) / d**0.5, dim=-1)
        out = self.norm(tokens + self.o(att @ self.v(tokens)))
        return l2_normalize(out.mean(dim=-2))


class SynergyHead(nn.Module):
    """Text features query the [rgb, phase] tokens; mean over queries, residual on the fused vector."""

    def __init__(self, d: int, generator: torch.Generator):
        super().__init__()
        self.q = _seeded_linear(d, generator)
        self.k = _seeded_linear(d, generator)
        self.v = _seeded_linear(d, generator, zero=True)
        self.o = _seeded_linear(d, generator, zero=True)
        self.norm = nn.LayerNorm(d, dtype=DTYPE)

    def forward(self, text_feats: torch.Tensor, tokens: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        """``text_feats``: C x d, ``tokens``: N x 2 x d, ``fused``: N x d -> N x d."""
        if text_feats.shape[0] == 0:
            raise ValueError("cross-attention needs at least one text query")
        d = tokens.shape[-1]
        q = self.q(text_feats)                                              # C x d
        att = torch.softmax(q @ self.k(tokens).transpose(-1, -2) / d**0.5, dim=-1)  # N x C x 2
        attended = self.o(att @ self.v(tokens)).mean(dim=-2)                # N x d
        return l2_normalize(self.norm(fused + attended))


def fuse_rgb_phase(I_rgb: torch.Tensor, I_phase: torch.Tensor, head: FusionHead) -> torch.Tensor:
    tokens = torch.stack([I_rgb, I_phase], dim=-2)
    if tokens.dim() == 2:
        return head(tokens.unsqueeze(0))[0]
    return head(tokens)


def cross_attend(text_feats: torch.Tensor, token_seq: torch.Tensor, I_f: torch.Tensor,
                 head: SynergyHead) -> torch.Tensor:
    if token_seq.dim() == 2:
        return head(text_feats, token_seq.unsqueeze(0), I_f.unsqueeze(0))[0]
    return head(text_feats, token_seq, I_f)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SmoothedTarget:
    sigma: np.ndarray


def smoothing_labels(y: int, C: int, eps: float) -> SmoothedTarget:
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing constant must lie in [0, 1), got {eps}")
    if not 0 <= y < C:
        raise ValueError(f"label {y} outside [0, {C})")
    sigma = np.full(C, eps / C)
    sigma[y] += 1.0 - eps
    return SmoothedTarget(sigma)


def smoothed_targets(y, C: int, eps: float) -> torch.Tensor:
    """Batch form of :func:`smoothing_labels`: N labels -> N x C."""
    y = torch.as_tensor(y, dtype=torch.long)
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing constant must lie in [0, 1), got {eps}")
    return F.one_hot(y, C).to(DTYPE) * (1.0 - eps) + eps / C


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def loss_pce(I_prime: torch.Tensor, prototypes, y, tau: float) -> torch.Tensor:
    """Prototype cross-entropy; ``prototypes`` is a C x d tensor or a PrototypeBank."""
    _check_tau(tau)
    if isinstance(prototypes, PrototypeBank):
        prototypes = torch.as_tensor(prototypes.prototypes, dtype=I_prime.dtype)
    y = torch.as_tensor(y, dtype=torch.long)
    return F.cross_entropy(I_prime @ prototypes.T / tau, y)


def loss_i2tce(I_prime: torch.Tensor, text_feats: torch.Tensor, targets, tau: float) -> torch.Tensor:
    """Soft-target image-to-text cross-entropy; ``targets`` is N x C or a list of SmoothedTarget."""
    _check_tau(tau)
    if isinstance(targets, (list, tuple)):
        targets = torch.as_tensor(np.stack([t.sigma for t in targets]), dtype=I_prime.dtype)
    log_p = F.log_softmax(I_prime @ text_feats.T / tau, dim=1)
    return -(targets * log_p).sum(dim=1).mean()


def total_loss(L_pce, L_i2tce, alpha: float = 1.0, beta: float = 0.2):
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    return alpha * L_pce + beta * L_i2tce


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class DualPriorHeads(nn.Module):
    """Everything the dual-prior stage adds on top of the backbone."""

    def __init__(self, d: int, image_size: int, generator: torch.Generator,
                 use_phase: bool = True, use_text: bool = True):
        super().__init__()
        self.use_phase, self.use_text = use_phase, use_text
        self.phase_encoder = PhaseEncoder(image_size, d).to(DTYPE)
        with torch.no_grad():
            for m in self.phase_encoder.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    fan_in = m.weight[0].numel()
                    m.weight.copy_(torch.randn(m.weight.shape, generator=generator, dtype=DTYPE) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()
        self.fusion = FusionHead(d, generator)
        self.synergy = SynergyHead(d, generator)

    def forward(self, I_rgb: torch.Tensor, phase: torch.Tensor | None, text_feats: torch.Tensor) -> torch.Tensor:
        if self.use_phase:
            I_phase = l2_normalize(self.phase_encoder(phase))
        else:
            I_phase = I_rgb
        tokens = torch.stack([I_rgb, I_phase], dim=1)
        fused = self.fusion(tokens)
        if not self.use_text:
            return fused
        return self.synergy(text_feats, tokens, fused)


def phase_batch(pixels: np.ndarray, R: float) -> torch.Tensor:
    return to_tensor(phase_images(to_grayscale(pixels), R))


def embed_full(backend: EncoderBackend, heads: DualPriorHeads, text_feats: torch.Tensor,
               pixels: np.ndarray, R: float, chunk: int = 256) -> np.ndarray:
    """Inference-mode embeddings of un-augmented images through the whole pipeline."""
    was_training = heads.training
    heads.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(pixels), chunk):
            px = pixels[i : i + chunk]
            img = backend.encode_image(to_tensor(px))
            ph = phase_batch(px, R) if heads.use_phase else None
            out.append(heads(img, ph, text_feats))
    heads.train(was_training)
    return torch.cat(out).numpy()


@torch.no_grad()
def domain_text_features(bank: DomainPromptBank, template: PromptTemplate, backend: EncoderBackend):
    return [encode_domain_prompts(bank, template, d, backend).detach() for d in range(2)]


@dataclass
class TPDPResult:
    heads: DualPriorHeads
    prototypes: list[PrototypeBank]
    assignments: list[PseudoLabelAssignment]
    history: list[dict] = field(default_factory=list)
    rng_state: dict | None = None


def build_heads(config: RunConfig) -> DualPriorHeads:
    return DualPriorHeads(config.d, config.resolved_image_size, head_generator(config, 2),
                          use_phase=config.use_phase_prior, use_text=config.use_text_prior)


def train_tpdp(datasets: tuple[DomainDataset, DomainDataset], prompt_bank: DomainPromptBank | None,
               backend: EncoderBackend, config: RunConfig, template: PromptTemplate | None = None) -> TPDPResult:
    if prompt_bank is None:
        raise ValueError("dual-prior training needs a prompt bank from the prompt stage")
    template = template or PromptTemplate(M=config.M)
    C = resolve_num_categories(config, datasets)
    if prompt_bank.num_categories != C:
        raise ValueError(f"prompt bank has {prompt_bank.num_categories} categories, expected {C}")
    heads = build_heads(config)
    beta = config.beta if config.use_text_prior else 0.0
    history: list[dict] = []

    with label_guard():
        params = configure_trainable({"image_last_block", "fusion_heads"}, backend=backend,
                                     prompt_bank=prompt_bank, heads=heads)
        text = domain_text_features(prompt_bank, template, backend)
        pixels = [ds.pixel_array() for ds in datasets]
        assignments, banks = [], []
        for d in range(2):
            feats = embed_full(backend, heads, text[d], pixels[d], config.R)
            km, _ = kmeans_cluster(feats, C, seed=[config.seed, d], n_init=config.kmeans_n_init, domain_id=d)
            prompt_y = repair_pairs(torch.as_tensor(embed_images(backend, pixels[d])), text[d]).y.numpy()
            assignments.append(PseudoLabelAssignment(align_to_prompts(km.labels, prompt_y, C), d, 0))
            bank = init_prototypes(feats, assignments[d], C, config.momentum)
            bank.domain_id = d
            banks.append(bank)

        rng = np.random.default_rng([config.seed, 22])
        steps = steps_per_epoch(datasets, config.batch_size)
        opt, sched = make_optimizer(params, config.lr, steps * config.epochs_tpdp, config.schedule)

        for epoch in range(config.epochs_tpdp):
            heads.train()
            order = [epoch_batches(rng, len(ds), config.batch_size, steps) for ds in datasets]
            sums = np.zeros((2, 3))
            for step in range(steps):
                opt.zero_grad()
                total = 0.0
                for d in range(2):
                    idx = order[d][step]
                    px = batch_pixels(pixels[d], idx, rng, config.augment, config.augment_params)
                    img = backend.encode_image(to_tensor(px))
                    ph = phase_batch(px, config.R) if config.use_phase_prior else None
                    feats = heads(img, ph, text[d])
                    y = assignments[d].labels[idx]
                    for f, label in zip(feats.detach().numpy(), y):
                        banks[d].update(int(label), f)
                    protos = torch.as_tensor(banks[d].prototypes, dtype=DTYPE)
                    l_pce = loss_pce(feats, protos, y, config.tau)
                    l_txt = loss_i2tce(feats, text[d], smoothed_targets(y, C, config.epsilon), config.tau)
                    loss = total_loss(l_pce, l_txt, config.alpha, beta)
                    total = total + loss / 2
                    sums[d] += [l_pce.item(), l_txt.item(), loss.item()]
                total.backward()
                opt.step()
                sched.step()
            for d in range(2):
                feats = embed_full(backend, heads, text[d], pixels[d], config.R)
                assignments[d] = reassign_by_prototype(feats, banks[d], epoch + 1)
                history.append({"epoch": epoch, "domain": d, "L_pce": sums[d, 0] / steps,
                                "L_i2tce": sums[d, 1] / steps, "total": sums[d, 2] / steps})
            log.info("tpdp epoch %d: %s", epoch, [round(r["total"], 4) for r in history[-2:]])
    return TPDPResult(heads, banks, assignments, history, rng.bit_generator.state)


def epoch_mean_total_loss(history: list[dict]) -> np.ndarray:
    epochs = sorted({r["epoch"] for r in history})
    return np.array([np.mean([r["total"] for r in history if r["epoch"] == e]) for e in epochs])
