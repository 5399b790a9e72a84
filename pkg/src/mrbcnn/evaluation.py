"""Identity-level splits, cosine ranking and Recall@K / mAP."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import DatasetManifest
from .errors import ContractError, DimensionError, ProtocolError
from .rng import Stream

PROTOCOLS = ("cuhk03-single-shot", "market-single-query", "generic")
REPORT_KS = (1, 5, 10, 20)


@dataclass(frozen=True)
class SplitSpec:
    protocol: str = "generic"
    n_train: int = 0
    n_val: int = 0
    n_test: int = 0
    n_trials: int = 5

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ContractError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_trials < 1:
            raise ContractError(f"invalid split counts in {self}")

    @classmethod
    def cuhk03(cls, n_trials: int = 5) -> SplitSpec:
        return cls("cuhk03-single-shot", 1160, 100, 100, n_trials)


@dataclass
class Trial:
    """Query and gallery record indices into a test manifest."""

    query: np.ndarray
    gallery: np.ndarray


@dataclass
class Splits:
    train: DatasetManifest
    val: DatasetManifest
    test: DatasetManifest
    trials: list[Trial] = field(default_factory=list)


def single_shot_trials(
    manifest: DatasetManifest, n_trials: int, stream: Stream, cross_camera: bool = True
) -> list[Trial]:
    """Per trial and identity: one gallery image, the rest of the identity as queries.

    With ``cross_camera`` the gallery camera is drawn uniformly among the
    identity's cameras that leave at least one image elsewhere, and queries
    come only from the other cameras.
    """
    pids = manifest.person_ids
    cams = manifest.camera_ids
    by_id: dict[int, np.ndarray] = {}
    for pid in manifest.identities:
        by_id[pid] = np.flatnonzero(pids == pid)
    trials = []
    for t in range(n_trials):
        gen = stream.split("trial", t).gen
        q_idx, g_idx = [], []
        for pid, members in by_id.items():
            if members.size < 2:
                raise ProtocolError(f"identity {pid} has a single image; cannot form query and gallery")
            if cross_camera:
                member_cams = cams[members]
                usable = [c for c in np.unique(member_cams) if np.any(member_cams != c)]
                if not usable:
                    raise ProtocolError(f"identity {pid} is seen by a single camera")
                gcam = usable[int(gen.integers(len(usable)))]
                pool = members[member_cams == gcam]
                g = int(pool[int(gen.integers(pool.size))])
                queries = members[member_cams != gcam]
            else:
                g = int(members[int(gen.integers(members.size))])
                queries = members[members != g]
            g_idx.append(g)
            q_idx.extend(int(q) for q in queries)
        trials.append(Trial(np.array(sorted(q_idx)), np.array(g_idx)))
    return trials


def make_splits(manifest: DatasetManifest, spec: SplitSpec, stream: Stream) -> Splits:
    """Identity-disjoint train/val/test manifests plus query/gallery trials."""
    if spec.protocol == "market-single-query":
        tags = {"train", "query", "gallery"}
        if not any(r.split in tags for r in manifest.records):
            raise ProtocolError("market-single-query needs split tags (train/query/gallery) in the manifest")
        train = DatasetManifest([r for r in manifest.records if r.split == "train"], manifest.root)
        val = DatasetManifest([r for r in manifest.records if r.split == "val"], manifest.root)
        test_records = [r for r in manifest.records if r.split in ("query", "gallery")]
        test = DatasetManifest(test_records, manifest.root)
        q = np.array([i for i, r in enumerate(test_records) if r.split == "query"])
        g = np.array([i for i, r in enumerate(test_records) if r.split == "gallery"])
        return Splits(train, val, test, [Trial(q, g)])

    ids = manifest.identities
    need = spec.n_train + spec.n_val + spec.n_test
    if spec.n_test < 1:
        raise ContractError("split needs at least one test identity")
    if need > len(ids):
        raise ContractError(f"split needs {need} identities, manifest has {len(ids)}")
    order = stream.split("identities").gen.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    tr = shuffled[: spec.n_train]
    va = shuffled[spec.n_train : spec.n_train + spec.n_val]
    te = shuffled[spec.n_train + spec.n_val : need]
    test = manifest.with_ids(te)
    trials = single_shot_trials(
        test, spec.n_trials, stream.split("test"), cross_camera=spec.protocol == "cuhk03-single-shot"
    )
    return Splits(manifest.with_ids(tr), manifest.with_ids(va), test, trials)


# --- ranking --------------------------------------------------------------------


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ContractError("cosine similarity is undefined for a zero embedding")
    return x / norms


def rank_gallery(query_emb, gallery_embs) -> np.ndarray:
    """Gallery indices by descending cosine similarity; ties keep index order."""
    q = _unit_rows(query_emb)
    g = _unit_rows(gallery_embs)
    if q.shape[1] != g.shape[1]:
        raise DimensionError(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    sims = np.clip(g @ q[0], -1.0, 1.0)
    return np.argsort(-sims, kind="stable")


@dataclass
class RankingResult:
    """Per query: gallery indices in rank order and their relevance flags."""

    orders: list[np.ndarray]
    relevant: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.orders)


def rank_queries(
    query_embs,
    query_ids,
    gallery_embs,
    gallery_ids,
    exclude: Callable[[int], np.ndarray] | None = None,
) -> RankingResult:
    """Rank the gallery for every query.

    ``exclude(q)`` may return a boolean mask of gallery items to drop for
    query ``q`` before ranking.
    """
    q = _unit_rows(query_embs)
    g = _unit_rows(gallery_embs)
    sims = np.clip(q @ g.T, -1.0, 1.0)
    gids = np.asarray(gallery_ids)
    orders, relevant = [], []
    for i, qid in enumerate(np.asarray(query_ids)):
        order = np.argsort(-sims[i], kind="stable")
        if exclude is not None:
            drop = exclude(i)
            order = order[~drop[order]]
        orders.append(order)
        relevant.append(gids[order] == qid)
    return RankingResult(orders, relevant)


def _first_hits(results: RankingResult) -> np.ndarray:
    firsts = []
    for i, rel in enumerate(results.relevant):
        hits = np.flatnonzero(rel)
        if hits.size == 0:
            raise ProtocolError(f"query {i} has no relevant gallery item")
        firsts.append(hits[0])
    return np.array(firsts)


def recall_at_k(results: RankingResult, ks: Sequence[int]) -> dict[int, float]:
    """Fraction of queries with a relevant item among the top ``k``."""
    if len(results) == 0:
        raise ProtocolError("no queries to evaluate")
    firsts = _first_hits(results)
    return {int(k): float(np.mean(firsts < k)) for k in ks}


def cmc_curve(results: RankingResult, max_k: int | None = None) -> np.ndarray:
    """Recall@k for ``k = 1 .. max_k`` (defaults to the longest ranking)."""
    firsts = _first_hits(results)
    max_k = max_k or max(len(o) for o in results.orders)
    return np.array([np.mean(firsts < k) for k in range(1, max_k + 1)])


def mean_average_precision(results: RankingResult) -> float:
    aps = []
    for i, rel in enumerate(results.relevant):
        hits = np.flatnonzero(rel)
        if hits.size == 0:
            raise ProtocolError(f"query {i} has no relevant gallery item")
        aps.append(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))
    return float(np.mean(aps))


# --- protocol-level evaluation -------------------------------------------------------


@dataclass
class TrialMetrics:
    recall: dict[int, float]
    mAP: float
    curve: np.ndarray


@dataclass
class EvalReport:
    trials: list[TrialMetrics]
    seed: int
    protocol: str

    @property
    def mean_recall(self) -> dict[int, float]:
        ks = self.trials[0].recall.keys()
        return {k: float(np.mean([t.recall[k] for t in self.trials])) for k in ks}

    @property
    def std_recall1(self) -> float:
        return float(np.std([t.recall[1] for t in self.trials]))

    @property
    def mean_map(self) -> float:
        return float(np.mean([t.mAP for t in self.trials]))

    @property
    def mean_curve(self) -> np.ndarray:
        n = min(len(t.curve) for t in self.trials)
        return np.mean([t.curve[:n] for t in self.trials], axis=0)

    def summary(self) -> dict:
        rec = self.mean_recall
        out = {f"recall@{k}": rec[k] for k in rec}
        out.update({"recall@1_std": self.std_recall1, "mAP": self.mean_map, "trials": len(self.trials)})
        out.update({"seed": self.seed, "protocol": self.protocol})
        return out


def evaluate_trials(
    embeddings: np.ndarray,
    manifest: DatasetManifest,
    trials: list[Trial],
    seed: int,
    protocol: str,
    ks: Sequence[int] = REPORT_KS,
) -> EvalReport:
    """Recall@K, CMC and mAP per trial for precomputed per-record embeddings."""
    pids = manifest.person_ids
    cams = manifest.camera_ids
    out = []
    for trial in trials:
        q, g = trial.query, trial.gallery
        exclude = None
        if protocol == "market-single-query":

            def exclude(i, q=q, g=g):
                return (pids[g] == pids[q[i]]) & (cams[g] == cams[q[i]])

        res = rank_queries(embeddings[q], pids[q], embeddings[g], pids[g], exclude)
        kk = [min(k, len(g)) for k in ks]
        rec = recall_at_k(res, kk)
        out.append(
            TrialMetrics({k: rec[min(k, len(g))] for k in ks}, mean_average_precision(res), cmc_curve(res, len(g)))
        )
    return EvalReport(out, seed, protocol)


def write_metrics(report: EvalReport, out_dir, stem: str = "metrics") -> dict[str, Path]:
    """Write ``<stem>_recall.csv``, ``<stem>_curve.csv`` and ``<stem>.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "recall": out / f"{stem}_recall.csv",
        "curve": out / f"{stem}_curve.csv",
        "summary": out / f"{stem}.json",
    }
    with open(paths["recall"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "k", "recall"])
        for t, tm in enumerate(report.trials):
            for k, r in tm.recall.items():
                w.writerow([t, k, repr(r)])
        for k, r in report.mean_recall.items():
            w.writerow(["mean", k, repr(r)])
    with open(paths["curve"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "recall"])
        for k, r in enumerate(report.mean_curve, start=1):
            w.writerow([k, repr(float(r))])
    paths["summary"].write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    return paths


def read_curve(path) -> tuple[np.ndarray, np.ndarray]:
    ks, rs = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ks.append(int(row["k"]))
            rs.append(float(row["recall"]))
    return np.array(ks), np.array(rs)
