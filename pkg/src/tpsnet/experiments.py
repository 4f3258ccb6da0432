"""End-to-end runs: dataset resolution, the two training stages, evaluation, ablations."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, Pipeline, make_backend, model_checkpoint
from .config import RunConfig
from .dataset import DomainDataset, generate_toy_domain_pair, load_domain_directory, split_holdout
from .dpg import PromptTrainingResult, train_prompts
from .retrieval import MetricsTable, evaluate_scenarios
from .tpdp import TPDPResult, train_tpdp

TOY_DIRS = ("A", "B")

# Variant name -> (use_text_prior, use_phase_prior).
ABLATION_VARIANTS = {
    "none": (False, False),
    "+text": (True, False),
    "+phase": (False, True),
    "both": (True, True),
}


def toy_datasets(config: RunConfig) -> tuple[DomainDataset, DomainDataset]:
    return generate_toy_domain_pair(config.toy_num_classes, config.toy_per_class,
                                    config.resolved_image_size, config.toy_seed)


def load_datasets(config: RunConfig, toy_root: str | Path | None = None) -> tuple[DomainDataset, DomainDataset]:
    """Datasets from ``domain_paths``, else from a gen-toy tree under ``toy_root``."""
    if config.domain_paths is not None:
        paths = [Path(p) for p in config.domain_paths]
    elif toy_root is not None:
        paths = [Path(toy_root) / name for name in TOY_DIRS]
        if not all(p.is_dir() for p in paths):
            raise FileNotFoundError(f"no toy dataset under {toy_root}; run gen-toy first or set domain_paths")
    else:
        raise FileNotFoundError("config has no domain_paths and no toy dataset root was given")
    size = config.resolved_image_size
    return load_domain_directory(paths[0], 0, size), load_domain_directory(paths[1], 1, size)


def split_datasets(config: RunConfig, datasets):
    """(training sets, evaluation sets) under the configured split policy."""
    if config.eval_split == "all":
        return tuple(datasets), tuple(datasets)
    pairs = [split_holdout(ds, config.holdout_fraction, config.seed) for ds in datasets]
    return tuple(p[0] for p in pairs), tuple(p[1] for p in pairs)


@dataclass(eq=False)
class PipelineRun:
    prompts: PromptTrainingResult
    tpdp: TPDPResult
    checkpoint: Checkpoint
    pipeline: Pipeline
    metrics: MetricsTable


def run_pipeline(config: RunConfig, datasets) -> PipelineRun:
    """Both training stages on the training split, then evaluation on the evaluation split."""
    train_sets, eval_sets = split_datasets(config, datasets)
    backend = make_backend(config)
    prompts = train_prompts(train_sets, backend, config)
    tpdp = train_tpdp(train_sets, prompts.bank, backend, config, prompts.template)
    ckpt = model_checkpoint(config, prompts, tpdp, backend)
    pipeline = Pipeline(config, backend, prompts.template, prompts.bank, tpdp.heads,
                        [b.prototypes for b in tpdp.prototypes], [a.labels for a in tpdp.assignments])
    return PipelineRun(prompts, tpdp, ckpt, pipeline, evaluate_scenarios(eval_sets, pipeline, config.eval_ks))


def history_csv(history: list[dict], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    if history:
        w = csv.DictWriter(buf, fieldnames=list(history[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(history)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


@dataclass
class AblationResult:
    rows: list[tuple[str, int, str, int, float]]  # variant, seed, scenario, k, precision

    def mean_p1(self, variant: str) -> float:
        """Seed-averaged P@1 over both retrieval directions."""
        return float(np.mean([p for v, _, _, k, p in self.rows if v == variant and k == 1]))

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "seed", "scenario", "k", "precision"])
        for v, s, sc, k, p in self.rows:
            w.writerow([v, s, sc, k, repr(p)])
        variants = list(dict.fromkeys(r[0] for r in self.rows))
        ks = sorted({r[3] for r in self.rows})
        for v in variants:
            for k in ks:
                mean = float(np.mean([p for vv, _, _, kk, p in self.rows if vv == v and kk == k]))
                w.writerow([v, "mean", "average", k, repr(mean)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def run_ablation(config: RunConfig, datasets, seeds: Sequence[int],
                 variants: Sequence[str] = tuple(ABLATION_VARIANTS)) -> AblationResult:
    rows = []
    for name in variants:
        use_text, use_phase = ABLATION_VARIANTS[name]
        for seed in seeds:
            cfg = config.replace(seed=int(seed), use_text_prior=use_text, use_phase_prior=use_phase)
            table = run_pipeline(cfg, datasets).metrics
            rows.extend((name, int(seed), sc, k, p) for sc, k, p in table.rows)
    return AblationResult(rows)
