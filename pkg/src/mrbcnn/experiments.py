"""Desk-scale end-to-end runs on synthetic pedestrians, including the variant ablation."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import DatasetManifest, ImageSet, synth_dataset
from .evaluation import EvalReport, evaluate_trials, single_shot_trials, write_metrics
from .network import NetworkConfig, embed_numpy, init_params
from .rng import Stream
from .training import train

log = logging.getLogger(__name__)

PROTOCOL = "cuhk03-single-shot"


def desk_network(variant: str = "mr-bcnn") -> NetworkConfig:
    """Half-resolution network: 80x30 input, 40-row parts, 6x4 maps pooled in 3x2 cells."""
    return NetworkConfig(
        variant=variant,
        input_h=80,
        input_w=30,
        part_height=40,
        part_stride=20,
        conv1_channels=8,
        conv2_channels=8,
        cell_h=3,
        cell_w=2,
        embedding_dim=500,
        dropout_p=0.5,
    )


@dataclass(frozen=True)
class DeskSetup:
    n_train_ids: int = 60
    n_test_ids: int = 20
    per_id: int = 8
    noise: float = 0.05
    data_seed: int = 1
    split_seed: int = 3
    n_trials: int = 5
    seed: int = 0
    lr0: float = 3e-3
    batch: int = 64
    max_iters: int = 300

    def train_config(self, variant: str, out_dir) -> TrainConfig:
        return TrainConfig(
            net=desk_network(variant),
            batch=self.batch,
            lr0=self.lr0,
            max_iters=self.max_iters,
            eval_every=10**9,  # no validation split at this scale; the final iterate is kept
            seed=self.seed,
            out_dir=str(out_dir),
        )


@dataclass
class DeskData:
    train: DatasetManifest
    test: DatasetManifest
    trials: list

    def image_sets(self, net: NetworkConfig) -> tuple[ImageSet, ImageSet]:
        return (ImageSet.load(self.train, net.input_h, net.input_w),
                ImageSet.load(self.test, net.input_h, net.input_w))


def make_desk_data(setup: DeskSetup, out_dir) -> DeskData:
    n = setup.n_train_ids + setup.n_test_ids
    manifest = synth_dataset(Stream(setup.data_seed), n, setup.per_id, setup.noise, Path(out_dir))
    train_m = manifest.with_ids(range(setup.n_train_ids))
    test_m = manifest.with_ids(range(setup.n_train_ids, n))
    trials = single_shot_trials(test_m, setup.n_trials, Stream(setup.split_seed))
    return DeskData(train_m, test_m, trials)


@dataclass
class VariantResult:
    variant: str
    untrained: EvalReport
    trained: EvalReport
    seconds: float
    losses: list[float] = field(default_factory=list)

    def row(self) -> dict:
        u, t = self.untrained, self.trained
        return {
            "variant": self.variant,
            "untrained_recall1": u.mean_recall[1],
            "recall1": t.mean_recall[1],
            "recall1_std": t.std_recall1,
            "recall5": t.mean_recall[5],
            "recall10": t.mean_recall[10],
            "mAP": t.mean_map,
            "first_loss": self.losses[0] if self.losses else float("nan"),
            "last_loss": float(np.mean(self.losses[-20:])) if self.losses else float("nan"),
            "seconds": self.seconds,
        }


def run_variant(setup: DeskSetup, data: DeskData, variant: str, out_dir) -> VariantResult:
    out_dir = Path(out_dir)
    cfg = setup.train_config(variant, out_dir)
    train_set, test_set = data.image_sets(cfg.net)
    p0 = init_params(cfg.net, Stream(cfg.seed).split("init"))
    untrained = evaluate_trials(embed_numpy(test_set.images, p0, cfg.net), data.test, data.trials, setup.seed, PROTOCOL)
    t0 = time.perf_counter()
    res = train(cfg, train_set=train_set)
    seconds = time.perf_counter() - t0
    trained = evaluate_trials(embed_numpy(test_set.images, res.params, cfg.net), data.test, data.trials, setup.seed, PROTOCOL)
    write_metrics(trained, out_dir, "test")
    log.info("%s: untrained r@1 %.3f, trained r@1 %.3f (%.0fs)", variant, untrained.mean_recall[1],
             trained.mean_recall[1], seconds)
    return VariantResult(variant, untrained, trained, seconds, res.losses)


def run_ablation(out_dir, variants=("mr-bcnn", "cnn"), setup: DeskSetup | None = None, plot: bool = True) -> list[VariantResult]:
    """Train each variant on the same synthetic split; write ``ablation.csv`` and a recall figure."""
    setup = setup or DeskSetup()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = make_desk_data(setup, out_dir / "synth")
    results = [run_variant(setup, data, v, out_dir / v) for v in variants]
    write_ablation(results, out_dir / "ablation.csv")
    if plot:
        from .plotting import plot_recall_curves

        curves = {}
        for r in results:
            c = r.trained.mean_curve
            curves[r.variant] = (np.arange(1, len(c) + 1), c)
        plot_recall_curves(curves, out_dir / "ablation_recall.png")
    return results


def write_ablation(results: list[VariantResult], path) -> Path:
    path = Path(path)
    rows = [r.row() for r in results]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


def quick_setup(**overrides) -> DeskSetup:
    return dataclasses.replace(DeskSetup(), **overrides)
