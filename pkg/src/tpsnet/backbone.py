"""Image/text encoder backends and the learnable domain prompts.

Every embedding that leaves an encoder is L2-normalized, so downstream cosine
similarity is a plain dot product.

Trainable state is split into three named groups:

* ``prompt_tokens``: the learnable slots of :class:`DomainPromptBank`
* ``image_last_block``: the final block of the image encoder
* ``fusion_heads``: the phase encoder and the fusion/synergy attention heads

:func:`configure_trainable` switches ``requires_grad`` so exactly the
requested groups receive gradients; everything else stays bit-identical
under an optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch
import torch.nn.functional as F
from torch import nn

TRAINABLE_GROUPS = ("prompt_tokens", "image_last_block", "fusion_heads")

# Fixed word list of the toy backend; ids index its frozen embedding table.
TOY_VOCAB = ("<pad>", "an", "image", "of", "a", ".", "photo", "sketch")
TOY_PREFIX_IDS = (1, 2, 3, 4)  # "an image of a"


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return F.normalize(x, dim=dim, eps=1e-12)


@dataclass(frozen=True)
class PromptTemplate:
    prefix_token_ids: tuple[int, ...] = TOY_PREFIX_IDS
    M: int = 4

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("a prompt needs at least one learnable slot (M >= 1)")

    @property
    def sequence_length(self) -> int:
        return len(self.prefix_token_ids) + self.M


class DomainPromptBank(nn.Module):
    """Learnable prompt slots, shaped (2 domains, C, M, d_token)."""

    def __init__(self, num_categories: int, M: int, d_token: int, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float64, init_std: float = 0.02):
        super().__init__()
        t = torch.randn(2, num_categories, M, d_token, generator=generator, dtype=dtype) * init_std
        self.tokens = nn.Parameter(t)

    @property
    def num_categories(self) -> int:
        return self.tokens.shape[1]

    @property
    def M(self) -> int:
        return self.tokens.shape[2]


class EncoderBackend(nn.Module):
    """Interface shared by the toy network and pretrained adapters."""

    dim: int
    d_token: int

    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        """N x H x W x 3 pixels in [0, 1] -> N x dim unit vectors."""
        raise NotImplementedError

    def encode_text(self, token_embs: torch.Tensor) -> torch.Tensor:
        """B x L x d_token embedded sequences -> B x dim unit vectors."""
        raise NotImplementedError

    def token_embed(self, ids: Iterable[int]) -> torch.Tensor:
        raise NotImplementedError

    def last_block(self) -> nn.Module:
        raise NotImplementedError

    def frozen_parameters(self) -> list[nn.Parameter]:
        last = {id(p) for p in self.last_block().parameters()}
        return [p for p in self.parameters() if id(p) not in last]


class ToyBackend(EncoderBackend):
    """Small random encoder pair standing in for a pretrained VLM.

    Image path: non-overlapping patches -> shared linear -> tanh -> flatten ->
    linear (the "last block"). Text path: mean of token embeddings -> linear.
    """

    def __init__(self, seed: int, dim: int = 64, d_token: int = 32, image_size: int = 32,
                 patch: int | None = None, hidden: int = 32, dtype: torch.dtype = torch.float64):
        super().__init__()
        if dim < 8:
            raise ValueError("toy backend needs dim >= 8")
        patch = patch or max(image_size // 4, 1)
        if image_size % patch:
            raise ValueError(f"image size {image_size} not divisible by patch {patch}")
        self.dim, self.d_token, self.image_size, self.patch = dim, d_token, image_size, patch
        n_patches = (image_size // patch) ** 2
        g = torch.Generator().manual_seed(int(seed))

        def linear(fan_in: int, fan_out: int) -> nn.Linear:
            lin = nn.Linear(fan_in, fan_out, dtype=dtype)
            with torch.no_grad():
                lin.weight.copy_(torch.randn(fan_out, fan_in, generator=g, dtype=dtype) / fan_in**0.5)
                lin.bias.copy_(torch.randn(fan_out, generator=g, dtype=dtype) * 0.1)
            return lin

        self.patch_proj = linear(3 * patch * patch, hidden)
        self.head = linear(n_patches * hidden, dim)
        self.vocab = nn.Embedding(len(TOY_VOCAB), d_token, dtype=dtype)
        with torch.no_grad():
            self.vocab.weight.copy_(torch.randn(len(TOY_VOCAB), d_token, generator=g, dtype=dtype) * 0.02)
        self.text_proj = linear(d_token, dim)

    def _patches(self, pixels: torch.Tensor) -> torch.Tensor:
        n, h, w, c = pixels.shape
        p = self.patch
        x = pixels.reshape(n, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(n, (h // p) * (w // p), p * p * c)

    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(pixels).all():
            raise ValueError("non-finite pixel values")
        # Per-image, per-channel standardization removes global colour and contrast.
        mean = pixels.mean(dim=(1, 2), keepdim=True)
        std = pixels.std(dim=(1, 2), keepdim=True)
        x = (pixels - mean) / (std + 1e-6)
        hid = torch.tanh(self.patch_proj(self._patches(x)))
        return l2_normalize(self.head(hid.flatten(1)))

    def encode_text(self, token_embs: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.text_proj(token_embs.mean(dim=-2)))

    def token_embed(self, ids: Iterable[int]) -> torch.Tensor:
        return self.vocab(torch.as_tensor(list(ids), dtype=torch.long))

    def last_block(self) -> nn.Module:
        return self.head


def make_toy_backend(seed: int, d: int = 64, d_token: int = 32, image_size: int = 32) -> ToyBackend:
    return ToyBackend(seed, dim=d, d_token=d_token, image_size=image_size)


class ClipBackend(EncoderBackend):
    """Adapter over a Hugging Face ``CLIPModel`` (ViT image tower).

    ``image_last_block`` maps to the final vision transformer layer plus the
    post layer-norm and visual projection. Learnable prompt slots are spliced
    into the text tower between BOS/EOS, and the output is taken at EOS.
    """

    MEAN = (0.48145466, 0.4578275, 0.40821073)
    STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, model, bos_token_id: int | None = None, eos_token_id: int | None = None):
        super().__init__()
        self.model = model
        cfg = model.config
        self.dim = cfg.projection_dim
        self.d_token = cfg.text_config.hidden_size
        self.input_size = cfg.vision_config.image_size
        self.bos_token_id = cfg.text_config.bos_token_id if bos_token_id is None else bos_token_id
        self.eos_token_id = cfg.text_config.eos_token_id if eos_token_id is None else eos_token_id
        self.register_buffer("_mean", torch.tensor(self.MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("_std", torch.tensor(self.STD).view(1, 3, 1, 1), persistent=False)

    @classmethod
    def from_pretrained(cls, path: str, dtype: torch.dtype = torch.float32) -> "ClipBackend":
        from transformers import CLIPModel

        return cls(CLIPModel.from_pretrained(path, dtype=dtype))

    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(pixels).all():
            raise ValueError("non-finite pixel values")
        dtype = self.model.visual_projection.weight.dtype
        x = pixels.permute(0, 3, 1, 2).to(dtype)
        if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bicubic", align_corners=False)
        x = (x - self._mean.to(dtype)) / self._std.to(dtype)
        vm = self.model.vision_model
        h = vm.pre_layrnorm(vm.embeddings(x))
        h = vm.encoder(inputs_embeds=h).last_hidden_state
        pooled = vm.post_layernorm(h[:, 0, :])
        return l2_normalize(self.model.visual_projection(pooled))

    def encode_text(self, token_embs: torch.Tensor) -> torch.Tensor:
        tm = self.model.text_model
        b = token_embs.shape[0]
        bos = self.token_embed([self.bos_token_id]).expand(b, 1, -1)
        eos = self.token_embed([self.eos_token_id]).expand(b, 1, -1)
        seq = torch.cat([bos, token_embs.to(bos.dtype), eos], dim=1)
        length = seq.shape[1]
        h = tm.embeddings(inputs_embeds=seq)
        causal = torch.full((length, length), torch.finfo(h.dtype).min, dtype=h.dtype).triu(1)
        h = tm.encoder(inputs_embeds=h, attention_mask=causal.expand(b, 1, length, length)).last_hidden_state
        pooled = tm.final_layer_norm(h)[:, -1, :]
        return l2_normalize(self.model.text_projection(pooled))

    def token_embed(self, ids: Iterable[int]) -> torch.Tensor:
        table = self.model.text_model.embeddings.token_embedding
        return table(torch.as_tensor(list(ids), dtype=torch.long, device=table.weight.device))

    def last_block(self) -> nn.Module:
        vm = self.model.vision_model
        return nn.ModuleList([vm.encoder.layers[-1], vm.post_layernorm, self.model.visual_projection])


def _prompt_sequences(bank: DomainPromptBank, template: PromptTemplate, domain: int,
                      backend: EncoderBackend, categories: torch.Tensor) -> torch.Tensor:
    prefix = backend.token_embed(template.prefix_token_ids).to(bank.tokens.dtype)
    slots = bank.tokens[domain, categories]
    return torch.cat([prefix.expand(slots.shape[0], -1, -1), slots], dim=1)


def encode_prompt(bank: DomainPromptBank, template: PromptTemplate, domain: int, category: int,
                  backend: EncoderBackend) -> torch.Tensor:
    if domain not in (0, 1):
        raise IndexError(f"domain must be 0 or 1, got {domain}")
    if not 0 <= category < bank.num_categories:
        raise IndexError(f"category {category} outside [0, {bank.num_categories})")
    if bank.M != template.M:
        raise ValueError(f"bank has {bank.M} slots, template expects {template.M}")
    seq = _prompt_sequences(bank, template, domain, backend, torch.tensor([category]))
    return backend.encode_text(seq)[0]


def encode_domain_prompts(bank: DomainPromptBank, template: PromptTemplate, domain: int,
                          backend: EncoderBackend) -> torch.Tensor:
    """All C prompts of one domain -> C x dim."""
    if domain not in (0, 1):
        raise IndexError(f"domain must be 0 or 1, got {domain}")
    seq = _prompt_sequences(bank, template, domain, backend, torch.arange(bank.num_categories))
    return backend.encode_text(seq)


def encode_image(pixels, backend: EncoderBackend) -> torch.Tensor:
    """Single H x W x 3 image (array or tensor) -> unit vector."""
    dtype = next(backend.parameters()).dtype
    x = torch.as_tensor(pixels, dtype=dtype)
    if not torch.isfinite(x).all():
        raise ValueError("non-finite pixel values")
    return backend.encode_image(x.unsqueeze(0))[0]


def configure_trainable(subset: Iterable[str], *, backend: EncoderBackend,
                        prompt_bank: DomainPromptBank | None = None,
                        heads: nn.Module | None = None) -> list[nn.Parameter]:
    """Set ``requires_grad`` per group; returns the parameters left trainable."""
    subset = set(subset)
    unknown = subset - set(TRAINABLE_GROUPS)
    if unknown:
        raise ValueError(f"unknown trainable groups {sorted(unknown)}")
    for p in backend.parameters():
        p.requires_grad_(False)
    trainable: list[nn.Parameter] = []
    if "image_last_block" in subset:
        for p in backend.last_block().parameters():
            p.requires_grad_(True)
            trainable.append(p)
    if prompt_bank is not None:
        on = "prompt_tokens" in subset
        prompt_bank.tokens.requires_grad_(on)
        if on:
            trainable.append(prompt_bank.tokens)
    if heads is not None:
        on = "fusion_heads" in subset
        for p in heads.parameters():
            p.requires_grad_(on)
            if on:
                trainable.append(p)
    return trainable
