import json

import numpy as np
import pytest

from mrbcnn.data import DatasetManifest, Record
from mrbcnn.errors import ContractError, ProtocolError
from mrbcnn.evaluation import (
    RankingResult,
    SplitSpec,
    cmc_curve,
    evaluate_trials,
    make_splits,
    mean_average_precision,
    rank_gallery,
    rank_queries,
    read_curve,
    recall_at_k,
    single_shot_trials,
    write_metrics,
)
from mrbcnn.rng import Stream
from oracles import average_precision_loops, recall_loops


def fake_manifest(n_ids, per_id=4, n_cams=2, tags=None):
    recs = []
    for pid in range(n_ids):
        for j in range(per_id):
            split = tags(pid, j) if tags else None
            recs.append(Record(f"{pid}_{j}.ppm", pid, j % n_cams, split))
    return DatasetManifest(recs)


def _result(relevance_rows):
    rel = [np.asarray(r, dtype=bool) for r in relevance_rows]
    return RankingResult([np.arange(len(r)) for r in rel], rel)


def test_generic_split_sizes_and_disjoint():
    m = fake_manifest(20)
    s = make_splits(m, SplitSpec("generic", 10, 5, 5), Stream(0))
    tr, va, te = set(s.train.identities), set(s.val.identities), set(s.test.identities)
    assert (len(tr), len(va), len(te)) == (10, 5, 5)
    assert not (tr & va or tr & te or va & te)


def test_split_same_seed_identical():
    m = fake_manifest(20)
    a = make_splits(m, SplitSpec("generic", 10, 5, 5), Stream(3))
    b = make_splits(m, SplitSpec("generic", 10, 5, 5), Stream(3))
    c = make_splits(m, SplitSpec("generic", 10, 5, 5), Stream(4))
    assert a.train.identities == b.train.identities and a.test.identities == b.test.identities
    assert a.train.identities != c.train.identities


def test_cuhk03_counts_on_1360_ids():
    s = make_splits(fake_manifest(1360, per_id=2), SplitSpec.cuhk03(), Stream(0))
    assert (len(s.train.identities), len(s.val.identities), len(s.test.identities)) == (1160, 100, 100)
    assert len(s.trials) == 5


def test_split_too_many_ids():
    with pytest.raises(ContractError):
        make_splits(fake_manifest(10), SplitSpec("generic", 8, 2, 2), Stream(0))
    with pytest.raises(ContractError):
        SplitSpec("cuhk01")


def test_single_shot_trials_cross_camera():
    m = fake_manifest(6, per_id=5)
    pids, cams = m.person_ids, m.camera_ids
    for t in single_shot_trials(m, 5, Stream(1)):
        assert sorted(pids[t.gallery].tolist()) == list(range(6))
        assert not set(t.query) & set(t.gallery)
        for g in t.gallery:
            q_same = t.query[pids[t.query] == pids[g]]
            assert q_same.size > 0
            assert np.all(cams[q_same] != cams[g])


def test_single_shot_needs_two_cameras():
    with pytest.raises(ProtocolError):
        single_shot_trials(fake_manifest(3, n_cams=1), 1, Stream(0))
    trials = single_shot_trials(fake_manifest(3, n_cams=1), 1, Stream(0), cross_camera=False)
    assert len(trials[0].query) == 9


def test_market_split_uses_tags():
    tag = lambda pid, j: "train" if pid < 3 else ("query" if j == 0 else "gallery")  # noqa: E731
    s = make_splits(fake_manifest(6, tags=tag), SplitSpec("market-single-query"), Stream(0))
    assert s.train.identities == [0, 1, 2]
    assert len(s.trials[0].query) == 3 and len(s.trials[0].gallery) == 9
    with pytest.raises(ProtocolError):
        make_splits(fake_manifest(6), SplitSpec("market-single-query"), Stream(0))


def test_rank_gallery_self_first(gen):
    g = gen.standard_normal((6, 4))
    assert rank_gallery(g[3], g)[0] == 3


def test_rank_gallery_orthogonal():
    g = np.eye(4)
    assert rank_gallery(g[2], g)[0] == 2


def test_rank_gallery_ties_by_index():
    g = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 2.0], [1.0, 0.0]])
    assert rank_gallery([0.0, 1.0], g).tolist() == [1, 2, 0, 3]


def test_rank_gallery_full_sort_oracle(gen):
    for _ in range(50):
        g = gen.standard_normal((5, 3))
        q = gen.standard_normal(3)
        sims = [float(np.dot(q, x) / np.linalg.norm(q) / np.linalg.norm(x)) for x in g]
        want = sorted(range(5), key=lambda i: (-sims[i], i))
        assert rank_gallery(q, g).tolist() == want


def test_rank_scale_invariance(gen):
    g = gen.standard_normal((8, 4))
    q = gen.standard_normal(4)
    base = rank_gallery(q, g)
    g2 = g.copy()
    g2[5] *= 7.3
    assert np.array_equal(rank_gallery(q * 0.01, g2), base)


def test_recall_hand():
    assert recall_at_k(_result([[1, 0, 0], [1, 0, 0]]), [1])[1] == 1.0
    r = recall_at_k(_result([[0, 0, 1, 0, 0]]), [1, 5])
    assert r == {1: 0.0, 5: 1.0}


def test_map_hand():
    assert mean_average_precision(_result([[1, 1, 0, 0]])) == 1.0
    assert mean_average_precision(_result([[0, 1, 0, 0]])) == 0.5


def test_no_relevant_item_is_protocol_error():
    with pytest.raises(ProtocolError):
        recall_at_k(_result([[0, 0]]), [1])


def _random_instance(gen, nq=20, ng=8, n_ids=5):
    g_ids = np.r_[np.arange(n_ids), gen.integers(0, n_ids, ng - n_ids)]
    q_ids = gen.integers(0, n_ids, nq)
    q, g = gen.standard_normal((nq, 4)), gen.standard_normal((ng, 4))
    return q, q_ids, g, g_ids


def test_recall_and_map_match_loops(gen):
    for _ in range(20):
        q, q_ids, g, g_ids = _random_instance(gen)
        res = rank_queries(q, q_ids, g, g_ids)
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        gn = g / np.linalg.norm(g, axis=1, keepdims=True)
        sim = qn @ gn.T
        ks = [1, 2, 5, 8]
        assert recall_at_k(res, ks) == recall_loops(sim, q_ids, g_ids, ks)
        assert abs(mean_average_precision(res) - average_precision_loops(sim, q_ids, g_ids)) <= 1e-12


def test_recall_monotone_and_complete(gen):
    for _ in range(20):
        q, q_ids, g, g_ids = _random_instance(gen)
        res = rank_queries(q, q_ids, g, g_ids)
        curve = cmc_curve(res)
        assert np.all(np.diff(curve) >= 0)
        assert curve[-1] == 1.0
        r1 = recall_at_k(res, [1])[1]
        m = mean_average_precision(res)
        assert m >= r1 / len(g)
        assert (m == 1.0) == all(np.all(np.diff(rel.astype(int)) <= 0) for rel in res.relevant)


def test_market_excludes_same_camera():
    # query 0 (id 0, cam 0); gallery: id0 cam0 (identical vector), id0 cam1, id1 cam1
    recs = [Record("q", 0, 0), Record("g0", 0, 0), Record("g1", 0, 1), Record("g2", 1, 1)]
    m = DatasetManifest(recs)
    emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.9, 0.1]])
    from mrbcnn.evaluation import Trial

    trial = Trial(np.array([0]), np.array([1, 2, 3]))
    generic = evaluate_trials(emb, m, [trial], 0, "generic", ks=(1,))
    market = evaluate_trials(emb, m, [trial], 0, "market-single-query", ks=(1,))
    assert generic.mean_recall[1] == 1.0
    assert market.mean_recall[1] == 0.0


def test_evaluate_and_write(tmp_path, gen):
    m = fake_manifest(10, per_id=4)
    trials = single_shot_trials(m, 5, Stream(2))
    emb = gen.standard_normal((len(m), 6))
    rep = evaluate_trials(emb, m, trials, 0, "cuhk03-single-shot")
    assert set(rep.mean_recall) == {1, 5, 10, 20}
    assert rep.mean_recall[20] == 1.0
    assert rep.std_recall1 == pytest.approx(np.std([t.recall[1] for t in rep.trials]))
    paths = write_metrics(rep, tmp_path, "t")
    again = write_metrics(evaluate_trials(emb, m, trials, 0, "cuhk03-single-shot"), tmp_path / "b", "t")
    for key in paths:
        assert paths[key].read_bytes() == again[key].read_bytes()
    ks, rs = read_curve(paths["curve"])
    assert ks.tolist() == list(range(1, 11))
    np.testing.assert_array_equal(rs, rep.mean_curve)
    summary = json.loads(paths["summary"].read_text())
    assert summary["trials"] == 5 and summary["protocol"] == "cuhk03-single-shot"
    lines = paths["recall"].read_text().splitlines()
    assert lines[0] == "trial,k,recall" and len(lines) == 1 + 5 * 4 + 4
