import csv
import json

import numpy as np
import pytest

from partmix import encoder, evaluation
from partmix.data import DatasetSpec, Modality, generate_dataset
from partmix.evaluation import ProtocolError, RetrievalProtocol
from partmix.numerics import DegenerateInputError


def _brute_rank(q, G):
    sims = [float(q @ g / (np.linalg.norm(q) * np.linalg.norm(g))) for g in G]
    idx = list(range(len(G)))
    # selection sort: repeatedly pick the largest similarity, smallest index on ties
    out = []
    while idx:
        best = idx[0]
        for j in idx[1:]:
            if sims[j] > sims[best] + evaluation.TIE_TOL:
                best = j
            elif abs(sims[j] - sims[best]) <= evaluation.TIE_TOL and j < best:
                best = j
        out.append(best)
        idx.remove(best)
    return np.array(out)


@pytest.fixture(scope="module")
def split_params():
    split = generate_dataset(DatasetSpec(num_train_ids=4, num_test_ids=5,
                                         images_per_id_per_modality=3), 2)
    params, _ = encoder.init_params(encoder.ModelDims(3, 4, 3, 4), 0)
    return split, params


class TestRank:
    def test_self_first(self):
        rng = np.random.default_rng(0)
        G = rng.normal(size=(10, 5))
        for i in range(10):
            assert evaluation.rank_gallery(G[i], G)[0] == i

    def test_orthogonal_ties(self):
        G = np.eye(5)
        np.testing.assert_array_equal(evaluation.rank_gallery(G[3], G), [3, 0, 1, 2, 4])

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            G = rng.integers(-2, 3, size=(rng.integers(1, 51), 4)).astype(float)
            G[np.all(G == 0, axis=1)] = 1.0
            q = rng.integers(-2, 3, size=4).astype(float)
            q[0] = q[0] or 1.0
            np.testing.assert_array_equal(evaluation.rank_gallery(q, G), _brute_rank(q, G))

    def test_batched_equals_single(self):
        rng = np.random.default_rng(2)
        Q, G = rng.normal(size=(4, 6)), rng.normal(size=(9, 6))
        batched = evaluation.rank_gallery(Q, G)
        for i in range(4):
            np.testing.assert_array_equal(batched[i], evaluation.rank_gallery(Q[i], G))

    def test_errors(self):
        with pytest.raises(ProtocolError):
            evaluation.rank_gallery(np.ones(3), np.zeros((0, 3)))
        with pytest.raises(DegenerateInputError):
            evaluation.rank_gallery(np.zeros(3), np.ones((2, 3)))


class TestMetrics:
    def test_cmc_perfect(self):
        flags = np.array([[1, 0, 0], [1, 0, 1]], bool)
        assert evaluation.cmc(flags, [1])[1] == 1.0

    def test_cmc_arithmetic(self):
        flags = np.array([[1, 0, 0], [0, 0, 1]], bool)
        assert evaluation.cmc(flags, [1, 3]) == {1: 0.5, 3: 1.0}

    def test_no_match(self):
        with pytest.raises(ProtocolError):
            evaluation.cmc(np.array([[0, 0]], bool), [1])
        with pytest.raises(ProtocolError):
            evaluation.mean_average_precision(np.array([[0, 0]], bool))

    @pytest.mark.parametrize("row,ap", [([1], 1.0), ([0, 1], 0.5), ([1, 0, 1], 5 / 6)])
    def test_ap_examples(self, row, ap):
        assert evaluation.average_precision(row) == pytest.approx(ap, abs=1e-15)

    def test_random_against_scan(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            flags = rng.random((rng.integers(1, 11), rng.integers(1, 51))) < 0.3
            flags[:, -1] |= ~flags.any(axis=1)
            aps = []
            for row in flags:
                hits, total = 0, 0.0
                for r, f in enumerate(row, start=1):
                    if f:
                        hits += 1
                        total += hits / r
                aps.append(total / hits)
            assert evaluation.mean_average_precision(flags) == pytest.approx(np.mean(aps), abs=1e-12)
            ks = list(range(1, flags.shape[1] + 1))
            curve = evaluation.cmc(flags, ks)
            first = [int(np.argmax(r)) + 1 for r in flags]
            for k in ks:
                assert curve[k] == np.mean([f <= k for f in first])
            assert all(curve[a] <= curve[b] for a, b in zip(ks, ks[1:]))

    def test_ap_one_iff_contiguous(self):
        assert evaluation.average_precision([1, 1, 0, 0]) == 1.0
        assert evaluation.average_precision([1, 0, 1, 0]) < 1.0

    def test_gallery_permutation_invariance(self):
        rng = np.random.default_rng(4)
        qd, gd = rng.normal(size=(5, 8)), rng.normal(size=(20, 8))
        ql, gl = rng.integers(0, 4, 5), np.tile(np.arange(4), 5)
        proto = RetrievalProtocol(shot_mode="multi")
        a = evaluation.evaluate_descriptors(qd, ql, gd, gl, proto)
        perm = rng.permutation(20)
        b = evaluation.evaluate_descriptors(qd, ql, gd[perm], gl[perm], proto)
        assert a.map_score == pytest.approx(b.map_score, abs=1e-12)
        assert a.cmc == b.cmc


class TestProtocols:
    def test_validation(self):
        with pytest.raises(ProtocolError):
            RetrievalProtocol(Modality.VISIBLE, Modality.VISIBLE)
        with pytest.raises(ProtocolError):
            RetrievalProtocol(shot_mode="few")
        with pytest.raises(ProtocolError):
            RetrievalProtocol(ranks=(5, 1))

    def test_names(self):
        assert RetrievalProtocol().name == "infrared_to_visible"

    def test_single_shot_gallery_size(self, split_params):
        labels = np.repeat(np.arange(5), 3)
        keep = evaluation.select_gallery(labels, "single", np.random.default_rng(0))
        assert len(keep) == 5 and sorted(set(labels[keep])) == list(range(5))

    def test_run_protocol_deterministic(self, split_params):
        split, params = split_params
        for proto in evaluation.DEFAULT_PROTOCOLS:
            a = evaluation.run_protocol(params, split, proto, seed=3)
            b = evaluation.run_protocol(params, split, proto, seed=3)
            assert a.to_dict() == b.to_dict()
            assert a.num_queries == 15
            ks = sorted(a.cmc)
            assert all(a.cmc[x] <= a.cmc[y] for x, y in zip(ks, ks[1:]))

    def test_gallery_filter(self, split_params):
        split, params = split_params
        keep_ids = set(split.test_ids[:3])
        proto = RetrievalProtocol(shot_mode="multi", gallery_filter=lambda im: im.identity in keep_ids)
        with pytest.raises(ProtocolError):   # queries of filtered-out ids have no match
            evaluation.run_protocol(params, split, proto)

    def test_self_retrieval(self, split_params):
        split, params = split_params
        desc = evaluation.descriptors(params, split.query)
        rep = evaluation.self_retrieval(desc)
        assert rep.map_score == 1.0 and rep.cmc[1] == 1.0

    def test_chance_band(self):
        rng = np.random.default_rng(5)
        qd, gd = rng.normal(size=(30, 6)), rng.normal(size=(30, 6))
        labels = np.repeat(np.arange(10), 3)
        lo, hi, maps = evaluation.permutation_chance_band(qd, labels, gd, labels, n_perm=200)
        assert lo <= np.median(maps) <= hi and len(maps) == 200


class TestFiles:
    def test_metrics_files(self, tmp_path):
        proto = RetrievalProtocol(ranks=(1, 5))
        rep = evaluation.MetricsReport({1: 0.25, 5: 0.75}, 0.4, 8, proto, 0)
        evaluation.write_metrics([rep], tmp_path / "m.csv", tmp_path / "m.json")
        raw = (tmp_path / "m.csv").read_bytes()
        assert b"\r\n" not in raw
        rows = list(csv.DictReader(raw.decode().splitlines()))
        assert rows[0] == {"protocol": "infrared_to_visible", "shot_mode": "single", "k": "1",
                           "cmc": "0.25", "mAP": ""}
        assert rows[-1]["mAP"] == "0.4"
        assert json.loads((tmp_path / "m.json").read_text())[0]["mAP"] == 0.4
