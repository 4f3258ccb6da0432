"""Checkpoint archives and the inference pipeline rebuilt from them.

An archive is an uncompressed zip holding ``manifest.json`` and one raw
little-endian blob per array. The manifest records every blob's name, dtype
and shape, the config snapshot, loss history and the numpy rng state. Entry
order, timestamps and JSON formatting are fixed, so save -> load -> save
reproduces the same bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .backbone import ClipBackend, DomainPromptBank, EncoderBackend, PromptTemplate, make_toy_backend
from .config import ConfigError, RunConfig
from .dataset import DomainDataset
from .dpg import PromptTrainingResult
from .tpdp import DualPriorHeads, TPDPResult, build_heads, domain_text_features, embed_full
from .training import DTYPE

FORMAT_VERSION = 1
KINDS = ("prompts", "model")
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
_DTYPES = {"<f8": np.float64, "<i8": np.int64}


class CheckpointError(RuntimeError):
    pass


def make_backend(config: RunConfig) -> EncoderBackend:
    """Frozen backend named by the config, in float64."""
    if config.backend == "toy":
        return make_toy_backend(config.seed, config.d, config.d_token, config.resolved_image_size)
    backend = ClipBackend.from_pretrained(config.backend_weights, dtype=torch.float64)
    if backend.dim != config.d:
        raise ConfigError(f"d: pretrained backend embeds to {backend.dim}, config says {config.d}")
    if backend.d_token != config.d_token:
        raise ConfigError(f"d_token: pretrained backend uses {backend.d_token}, config says {config.d_token}")
    return backend


def _blob_dtype(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.floating):
        return "<f8"
    if np.issubdtype(arr.dtype, np.integer):
        return "<i8"
    raise CheckpointError(f"cannot store arrays of dtype {arr.dtype}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


@dataclass(eq=False)
class Checkpoint:
    kind: str
    config: RunConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CheckpointError(f"unknown checkpoint kind {self.kind!r}")

    def to_bytes(self) -> bytes:
        entries = []
        blobs = []
        for name in sorted(self.arrays):
            arr = np.asarray(self.arrays[name])
            dt = _blob_dtype(arr)
            fname = f"arrays/{name}.bin"
            entries.append({"name": name, "file": fname, "dtype": dt, "shape": list(arr.shape)})
            blobs.append((fname, np.ascontiguousarray(arr, dtype=dt).tobytes()))
        manifest = {
            "format_version": self.format_version,
            "kind": self.kind,
            "config": self.config.to_dict(),
            "arrays": entries,
            "meta": _jsonable(self.meta),
        }
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
            for fname, data in [("manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())] + blobs:
                info = zipfile.ZipInfo(fname, date_time=_ZIP_DATE)
                info.external_attr = 0o644 << 16
                zf.writestr(info, data)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        try:
            with zipfile.ZipFile(io.BytesIO(data)) as zf:
                manifest = json.loads(zf.read("manifest.json"))
                if manifest.get("format_version") != FORMAT_VERSION:
                    raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
                arrays = {}
                for e in manifest["arrays"]:
                    raw = zf.read(e["file"])
                    arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint archive: {exc}") from exc
        return cls(manifest["kind"], RunConfig.from_dict(manifest["config"]), arrays, manifest["meta"])

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        p = Path(path)
        if not p.is_file():
            raise CheckpointError(f"checkpoint not found: {p}")
        return cls.from_bytes(p.read_bytes())


def _state_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _load_state(prefix: str, module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    own = module.state_dict()
    state = {}
    for k, ref in own.items():
        key = f"{prefix}.{k}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks array {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{key}: shape {arr.shape} does not match model shape {tuple(ref.shape)}")
        state[k] = torch.as_tensor(arr, dtype=ref.dtype)
    module.load_state_dict(state)


def _template_meta(template: PromptTemplate) -> dict:
    return {"prefix_token_ids": list(template.prefix_token_ids), "M": template.M}


def prompts_checkpoint(config: RunConfig, result: PromptTrainingResult) -> Checkpoint:
    arrays = {"prompt_bank.tokens": result.bank.tokens.detach().numpy().copy()}
    for d, labels in enumerate(result.kmeans_labels):
        arrays[f"kmeans_labels.{d}"] = np.asarray(labels, dtype=np.int64)
    meta = {"template": _template_meta(result.template), "history_dpg": result.history}
    return Checkpoint("prompts", config, arrays, meta)


def restore_prompts(ckpt: Checkpoint) -> PromptTrainingResult:
    tokens = torch.as_tensor(ckpt.arrays["prompt_bank.tokens"], dtype=DTYPE)
    bank = DomainPromptBank(tokens.shape[1], tokens.shape[2], tokens.shape[3])
    with torch.no_grad():
        bank.tokens.copy_(tokens)
    t = ckpt.meta["template"]
    template = PromptTemplate(tuple(t["prefix_token_ids"]), t["M"])
    labels = [ckpt.arrays[f"kmeans_labels.{d}"] for d in range(2) if f"kmeans_labels.{d}" in ckpt.arrays]
    return PromptTrainingResult(bank, template, labels, list(ckpt.meta.get("history_dpg", [])))


def model_checkpoint(config: RunConfig, prompts: PromptTrainingResult, tpdp: TPDPResult,
                     backend: EncoderBackend) -> Checkpoint:
    ckpt = prompts_checkpoint(config, prompts)
    ckpt.kind = "model"
    ckpt.arrays.update(_state_arrays("backend", backend.last_block()))
    ckpt.arrays.update(_state_arrays("heads", tpdp.heads))
    for d, (bank, assignment) in enumerate(zip(tpdp.prototypes, tpdp.assignments)):
        ckpt.arrays[f"prototypes.{d}"] = bank.prototypes.copy()
        ckpt.arrays[f"pseudo_labels.{d}"] = np.asarray(assignment.labels, dtype=np.int64)
    ckpt.meta["history_tpdp"] = tpdp.history
    ckpt.meta["rng_state"] = tpdp.rng_state
    return ckpt


@dataclass(eq=False)
class Pipeline:
    """Full inference path: backbone RGB, phase branch, fusion, and each domain's own prompts."""

    config: RunConfig
    backend: EncoderBackend
    template: PromptTemplate
    bank: DomainPromptBank
    heads: DualPriorHeads
    prototypes: list[np.ndarray] = field(default_factory=list)
    pseudo_labels: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self._text = domain_text_features(self.bank, self.template, self.backend)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, backend: EncoderBackend | None = None) -> "Pipeline":
        if ckpt.kind != "model":
            raise CheckpointError(f"need a trained model checkpoint, got a {ckpt.kind!r} checkpoint")
        config = ckpt.config
        backend = backend or make_backend(config)
        _load_state("backend", backend.last_block(), ckpt.arrays)
        heads = build_heads(config)
        _load_state("heads", heads, ckpt.arrays)
        prompts = restore_prompts(ckpt)
        return cls(config, backend, prompts.template, prompts.bank, heads,
                   [ckpt.arrays[f"prototypes.{d}"] for d in range(2)],
                   [ckpt.arrays[f"pseudo_labels.{d}"] for d in range(2)])

    @property
    def dim(self) -> int:
        return self.config.d

    def embed_pixels(self, pixels: np.ndarray, domain_id: int) -> np.ndarray:
        size = self.config.resolved_image_size
        if pixels.shape[1:3] != (size, size):
            raise ValueError(f"images are {pixels.shape[1]}x{pixels.shape[2]}, checkpoint expects {size}x{size}")
        if domain_id not in (0, 1):
            raise ValueError(f"domain id must be 0 or 1, got {domain_id}")
        return embed_full(self.backend, self.heads, self._text[domain_id], pixels, self.config.R)

    def embed(self, dataset: DomainDataset) -> np.ndarray:
        return self.embed_pixels(dataset.pixel_array(), dataset.domain_id)
