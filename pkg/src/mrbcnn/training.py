"""Siamese training loop: SGD with momentum, lr policy, validation and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import ImageSet, epoch_plan, load_manifest
from .errors import ContractError, NonFiniteError
from .evaluation import evaluate_trials, single_shot_trials
from .layers import ParamStore
from .losses import make_loss, pairs_from_embeddings
from .network import embed, embed_numpy, init_params
from .rng import Stream
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

LOG_FIELDS = ("iter", "loss", "lr", "val_recall1")


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss or gradient."""


@contextmanager
def blas_threads(n: int | None):
    """Cap BLAS worker threads; ``n=1`` makes reductions run in a fixed order."""
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


def sgd_step(params: ParamStore, grads: dict[str, np.ndarray], lr: float, momentum: float, weight_decay: float) -> None:
    """``v <- mu*v + lr*(g + wd*p)``, ``p <- p - v``."""
    for name, t in list(params.params.items()):
        g = grads.get(name)
        if g is None:
            g = np.zeros(t.shape)
        v = momentum * params.momentum[name] + lr * (g + weight_decay * t.data)
        params.momentum[name] = v
        params.params[name] = Tensor(t.data - v, requires_grad=True, name=name)


@dataclass
class LrPolicy:
    """Plateau (divide by ``1/factor`` after ``patience`` evaluations without a new
    best) or fixed-step (divide every ``step_every`` iterations)."""

    kind: str
    lr0: float
    factor: float = 0.1
    patience: int = 3
    step_every: int = 100_000
    lr: float = 0.0
    best: float = -np.inf
    stale: int = 0

    def __post_init__(self):
        if not self.lr:
            self.lr = self.lr0

    def on_iteration(self, it: int) -> float:
        if self.kind == "fixed_step":
            self.lr = self.lr0 * self.factor ** (it // self.step_every)
        return self.lr

    def on_eval(self, score: float) -> bool:
        """Record a validation score; return True when it is a new best."""
        improved = score > self.best
        if improved:
            self.best = score
            self.stale = 0
        elif self.kind == "plateau":
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return improved

    def state(self) -> dict:
        best = None if not np.isfinite(self.best) else float(self.best)
        return {"lr": self.lr, "best": best, "stale": self.stale}

    def load(self, st: dict) -> None:
        self.lr = float(st["lr"])
        self.best = -np.inf if st.get("best") is None else float(st["best"])
        self.stale = int(st.get("stale", 0))


def policy_for(cfg: TrainConfig) -> LrPolicy:
    return LrPolicy(cfg.lr_policy, cfg.lr0, cfg.factor, cfg.patience, cfg.step_every)


@dataclass
class TrainResult:
    out_dir: Path
    iterations: int
    losses: list[float] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)
    best_recall1: float | None = None
    params: ParamStore | None = None


def validation_recall1(params: ParamStore, cfg: TrainConfig, val: ImageSet, trials) -> float:
    emb = embed_numpy(val.images, params, cfg.net)
    report = evaluate_trials(emb, val.manifest, trials, cfg.seed, cfg.val_protocol, ks=(1,))
    return report.mean_recall[1]


def train(
    cfg: TrainConfig,
    resume: str | Path | None = None,
    allow_head_reinit: bool = False,
    threads: int | None = 1,
    train_set: ImageSet | None = None,
    val_set: ImageSet | None = None,
) -> TrainResult:
    """Run the loop described by ``cfg`` and write ``latest.ckpt``, ``best.ckpt``
    and ``train_log.csv`` under ``cfg.out_dir``."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = cfg.net
    root = Stream(cfg.seed)
    if train_set is None:
        if not cfg.train_manifest:
            raise ContractError("no training manifest configured")
        train_set = ImageSet.load(load_manifest(cfg.train_manifest), net.input_h, net.input_w)
    if val_set is None and cfg.val_manifest:
        val_set = ImageSet.load(load_manifest(cfg.val_manifest), net.input_h, net.input_w)
    val_trials = None
    if val_set is not None:
        val_trials = single_shot_trials(
            val_set.manifest, 1, root.split("val"), cross_camera=cfg.val_protocol == "cuhk03-single-shot"
        )

    policy = policy_for(cfg)
    start = 0
    if resume:
        ckpt = load_checkpoint(resume, cfg, allow_head_reinit, root.split("init"))
        params, start = ckpt.params, ckpt.iteration
        if start and "policy" in ckpt.state:
            policy.load(ckpt.state["policy"])
        log.info("resumed from %s at iteration %d", resume, start)
    else:
        params = init_params(net, root.split("init"))

    loss_fn = make_loss(cfg.loss, cfg.bins, cfg.deviance)
    ids = train_set.manifest.person_ids
    plans: dict[int, list[np.ndarray]] = {}

    def batch_at(it: int) -> tuple[int, int, np.ndarray]:
        # iteration -> (epoch, position); plans are pure functions of (seed, epoch)
        epoch, pos = 0, it
        while True:
            if epoch not in plans:
                plans[epoch] = epoch_plan(ids, cfg.batch, root.split("batches"), epoch)
            if pos < len(plans[epoch]):
                return epoch, pos, plans[epoch][pos]
            pos -= len(plans[epoch])
            epoch += 1

    log_path = out / "train_log.csv"
    mode = "a" if resume and start > 0 and log_path.exists() else "w"
    result = TrainResult(out, start)
    best_path, latest_path = out / "best.ckpt", out / "latest.ckpt"

    def snapshot(it: int) -> Checkpoint:
        return Checkpoint(cfg, it, params, policy.lr, {"policy": policy.state(), "rng": {"seed": cfg.seed}})

    t0 = time.perf_counter()
    with blas_threads(threads), open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(LOG_FIELDS)
        for it in range(start, cfg.max_iters):
            lr = policy.on_iteration(it)
            epoch, pos, idx = batch_at(it)
            batch = train_set.batch(idx)
            try:
                emb = embed(Tensor(batch.images), params, net, train=True, stream=root.split("dropout", it))
                loss = loss_fn(pairs_from_embeddings(emb, batch.person_ids))
                gm = backward(loss)
                grads = {n: gm.get(t, np.zeros(t.shape)) for n, t in params.params.items()}
                for n, g in grads.items():
                    if not np.isfinite(g).all():
                        raise NonFiniteError(f"non-finite gradient for {n}")
            except NonFiniteError as exc:
                dump = out / "nonfinite_batch.json"
                dump.write_text(
                    json.dumps(
                        {"iteration": it, "epoch": epoch, "position": pos, "indices": idx.tolist(),
                         "person_ids": batch.person_ids.tolist(), "error": str(exc)},
                        indent=2,
                    )
                )
                raise TrainingAborted(f"iteration {it}: {exc}; batch dumped to {dump}") from exc
            sgd_step(params, grads, lr, cfg.momentum, cfg.weight_decay)
            lval = loss.item()
            result.losses.append(lval)
            val_cell = ""
            done = it + 1
            if val_set is not None and done % cfg.eval_every == 0:
                r1 = validation_recall1(params, cfg, val_set, val_trials)
                result.val_history.append((done, r1))
                val_cell = repr(r1)
                if policy.on_eval(r1):
                    save_checkpoint(snapshot(done), best_path)
                save_checkpoint(snapshot(done), latest_path)
                log.info("iter %d loss %.5f lr %.3g val r@1 %.4f (%.1fs)", done, lval, lr, r1, time.perf_counter() - t0)
            writer.writerow([done, repr(lval), repr(lr), val_cell])
        result.iterations = cfg.max_iters
    save_checkpoint(snapshot(max(cfg.max_iters, start)), latest_path)
    if not best_path.exists():
        save_checkpoint(snapshot(max(cfg.max_iters, start)), best_path)
    result.best_recall1 = None if not np.isfinite(policy.best) else float(policy.best)
    result.params = params
    return result
