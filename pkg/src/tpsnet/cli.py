"""Command-line entry point.

Every command reads ``--config`` and keeps its artifacts under ``--out``::

    gen-toy          toy/A, toy/B             PNG trees for the two domains
    train-prompts    prompts.ckpt, dpg_log.csv
    train            model.ckpt, tpdp_log.csv
    eval             metrics.csv              also printed as a table
    export-phase     phase/...                phase-only reconstructions
    plot-embeddings  embeddings.png

Exit status is 0 on success, 1 for usage or config errors and 2 for
runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (Checkpoint, CheckpointError, Pipeline, make_backend, model_checkpoint,
                         prompts_checkpoint, restore_prompts)
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetError, read_image, to_grayscale, write_domain_directory
from .dpg import train_prompts
from .experiments import TOY_DIRS, history_csv, load_datasets, split_datasets, toy_datasets
from .retrieval import evaluate_scenarios
from .spectral import phase_only_reconstruct
from .tpdp import train_tpdp
from .training import apply_thread_limit

COMMANDS = ("gen-toy", "train-prompts", "train", "eval", "export-phase", "plot-embeddings")
PROMPTS_FILE = "prompts.ckpt"
MODEL_FILE = "model.ckpt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tpsnet", description="Unsupervised cross-domain image retrieval with text and phase priors.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default="runs/default", help="artifact directory (default: %(default)s)")
    p.add_argument("--image", default=None, help="export-phase: a single image instead of the datasets")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    return p


def _datasets(config: RunConfig, out: Path):
    return load_datasets(config, out / "toy")


def cmd_gen_toy(config: RunConfig, out: Path, args) -> None:
    for name, ds in zip(TOY_DIRS, toy_datasets(config)):
        write_domain_directory(ds, out / "toy" / name)
    print(f"wrote toy domains to {out / 'toy'}")


def cmd_train_prompts(config: RunConfig, out: Path, args) -> None:
    train_sets, _ = split_datasets(config, _datasets(config, out))
    result = train_prompts(train_sets, make_backend(config), config)
    prompts_checkpoint(config, result).save(out / PROMPTS_FILE)
    history_csv(result.history, out / "dpg_log.csv")
    print(f"saved prompt bank to {out / PROMPTS_FILE}")


def cmd_train(config: RunConfig, out: Path, args) -> None:
    prompts = restore_prompts(Checkpoint.load(out / PROMPTS_FILE))
    train_sets, _ = split_datasets(config, _datasets(config, out))
    backend = make_backend(config)
    result = train_tpdp(train_sets, prompts.bank, backend, config, prompts.template)
    model_checkpoint(config, prompts, result, backend).save(out / MODEL_FILE)
    history_csv(result.history, out / "tpdp_log.csv")
    print(f"saved model to {out / MODEL_FILE}")


def _pipeline(out: Path) -> Pipeline:
    return Pipeline.from_checkpoint(Checkpoint.load(out / MODEL_FILE))


def cmd_eval(config: RunConfig, out: Path, args) -> None:
    pipeline = _pipeline(out)
    _, eval_sets = split_datasets(config, _datasets(config, out))
    table = evaluate_scenarios(eval_sets, pipeline, config.eval_ks)
    table.to_csv(out / "metrics.csv")
    print(table.render())


def cmd_export_phase(config: RunConfig, out: Path, args) -> None:
    if args.image is not None:
        src = Path(args.image)
        gray = to_grayscale(read_image(src))
        phase_only_reconstruct(gray, config.R, src.stem).to_png(out / "phase" / f"{src.stem}.png")
        print(f"wrote {out / 'phase' / (src.stem + '.png')}")
        return
    count = 0
    for name, ds in zip(TOY_DIRS, _datasets(config, out)):
        for s in ds:
            stem = s.sample_id.rsplit(".", 1)[0]
            phase_only_reconstruct(to_grayscale(s), config.R, s.sample_id).to_png(out / "phase" / name / f"{stem}.png")
            count += 1
    print(f"wrote {count} phase images to {out / 'phase'}")


def cmd_plot_embeddings(config: RunConfig, out: Path, args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from sklearn.manifold import TSNE

    pipeline = _pipeline(out)
    _, eval_sets = split_datasets(config, _datasets(config, out))
    embs = [pipeline.embed(ds) for ds in eval_sets]
    labels = [ds.labels() for ds in eval_sets]
    allx = np.concatenate(embs)
    xy = TSNE(2, perplexity=min(30.0, len(allx) - 1.0), init="pca", random_state=config.seed).fit_transform(allx)
    fig, ax = plt.subplots(figsize=(6, 6))
    start = 0
    for d, (e, y, marker) in enumerate(zip(embs, labels, ("o", "^"))):
        part = xy[start : start + len(e)]
        start += len(e)
        ax.scatter(part[:, 0], part[:, 1], c=y, cmap="tab10", vmin=0, vmax=9, marker=marker, s=14,
                   label=f"domain {TOY_DIRS[d]}", edgecolors="none")
    ax.legend(loc="best")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    out.mkdir(parents=True, exist_ok=True)
    fig.savefig(out / "embeddings.png", dpi=120)
    plt.close(fig)
    print(f"wrote {out / 'embeddings.png'}")


HANDLERS = {
    "gen-toy": cmd_gen_toy,
    "train-prompts": cmd_train_prompts,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-phase": cmd_export_phase,
    "plot-embeddings": cmd_plot_embeddings,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        config = load_config(args.config)
        if args.seed is not None:
            config = config.replace(seed=args.seed)
    except (UsageError, ConfigError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: config file not found: {exc.filename}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    apply_thread_limit()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        HANDLERS[args.command](config, out, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, DatasetError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def dispatch(command: str, config_path: str | Path, seed: int | None = None, out: str | Path | None = None,
             image: str | Path | None = None) -> int:
    """Programmatic form of :func:`main`."""
    argv = [command, "--config", str(config_path)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    if out is not None:
        argv += ["--out", str(out)]
    if image is not None:
        argv += ["--image", str(image)]
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
