import numpy as np
import pytest

from partmix import data
from partmix.data import DatasetSpec, Modality, SamplingError

SMALL = DatasetSpec(num_train_ids=6, num_test_ids=3, images_per_id_per_modality=4)


@pytest.fixture(scope="module")
def split():
    return data.generate_dataset(SMALL, seed=7)


def _same_split(a, b):
    for name in ("train", "gallery", "query"):
        la, lb = getattr(a, name), getattr(b, name)
        assert len(la) == len(lb)
        for x, y in zip(la, lb):
            assert (x.identity, x.modality, x.nuisance_seed) == (y.identity, y.modality, y.nuisance_seed)
            np.testing.assert_array_equal(x.pixels, y.pixels)


class TestModality:
    def test_two_values(self):
        assert len(Modality) == 2
        assert Modality.parse("visible") is Modality.VISIBLE
        assert Modality.parse("infrared") is Modality.INFRARED

    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            Modality.parse("thermal")


class TestGenerate:
    def test_deterministic(self, split):
        _same_split(split, data.generate_dataset(SMALL, seed=7))

    def test_seed_changes_data(self, split):
        other = data.generate_dataset(SMALL, seed=8)
        assert not np.array_equal(split.train[0].pixels, other.train[0].pixels)

    def test_disjoint_identities(self):
        s = data.generate_dataset(DatasetSpec(images_per_id_per_modality=1), seed=0)
        assert len(s.train_ids) == 64 and len(s.test_ids) == 32
        assert set(s.train_ids) & set(s.test_ids) == set()
        assert {im.identity for im in s.train} == set(s.train_ids)

    def test_gallery_query_cover_test_ids(self, split):
        assert {im.identity for im in split.gallery} == set(split.test_ids)
        assert {im.identity for im in split.query} == set(split.test_ids)
        assert all(im.modality is Modality.VISIBLE for im in split.gallery)
        assert all(im.modality is Modality.INFRARED for im in split.query)

    def test_profile_shared_across_modalities(self, split):
        i = split.train_ids[0]
        prof = split.profiles[i]
        assert prof.attributes.shape == (SMALL.M_gt, SMALL.A)
        mods = {im.modality for im in split.train if im.identity == i}
        assert mods == {Modality.VISIBLE, Modality.INFRARED}

    def test_pixels_in_range(self, split):
        for im in split.train + split.test:
            assert im.pixels.shape == (SMALL.H, SMALL.W, SMALL.C_in)
            assert np.all(np.isfinite(im.pixels))
            assert im.pixels.min() >= 0.0 and im.pixels.max() <= 1.0

    def test_rerender_is_pure(self, split):
        for im in split.train[:5] + split.query[:3]:
            np.testing.assert_array_equal(data.rerender(split, im), im.pixels)

    def test_transforms_well_conditioned(self, split):
        for tr in split.transforms.values():
            assert np.linalg.cond(tr.matrix) < data.MAX_CONDITION

    def test_bands_are_horizontal(self, split):
        # noise-free render: every row is constant across the width
        spec = DatasetSpec(pixel_noise=0.0, num_train_ids=2, num_test_ids=2,
                           images_per_id_per_modality=1)
        s = data.generate_dataset(spec, 1)
        px = s.train[0].pixels
        np.testing.assert_array_equal(px, np.broadcast_to(px[:, :1], px.shape))

    @pytest.mark.parametrize("kw", [dict(H=25), dict(num_test_ids=1), dict(num_train_ids=0)])
    def test_rejects_bad_spec(self, kw):
        with pytest.raises(ValueError):
            data.generate_dataset(DatasetSpec(**kw), 0)


class TestBandRows:
    def test_jitter_bound(self):
        spec = DatasetSpec()
        h = spec.H // spec.M_gt
        for seed in range(50):
            rows = data.band_rows(spec, np.random.default_rng(seed))
            assert np.all(np.diff(rows) >= 0)
            for k in range(1, spec.M_gt):
                first = int(np.argmax(rows == k))
                assert abs(first - k * h) <= spec.jitter


class TestMinibatch:
    def test_full_size(self):
        s = data.generate_dataset(DatasetSpec(images_per_id_per_modality=4), 0)
        b = data.sample_minibatch(s, P=16, K=8, seed=3)
        assert len(b.images) == 128
        ids, counts = np.unique(b.identities, return_counts=True)
        assert len(ids) == 16 and np.all(counts == 8)
        for i in ids:
            mods = b.modalities[b.identities == i]
            assert np.sum(mods == Modality.VISIBLE) == 4

    def test_smallest(self, split):
        b = data.sample_minibatch(split, P=2, K=2, seed=0)
        assert len(b.images) == 4
        assert [m for m in b.modalities] == [0, 1, 0, 1]

    def test_deterministic(self, split):
        a = data.sample_minibatch(split, 3, 4, seed=9)
        b = data.sample_minibatch(split, 3, 4, seed=9)
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_no_repeats(self, split):
        b = data.sample_minibatch(split, 6, 8, seed=1)
        assert len(set(b.indices.tolist())) == len(b.indices)

    @pytest.mark.parametrize("P,K", [(7, 2), (2, 10), (2, 3), (0, 2)])
    def test_errors(self, split, P, K):
        with pytest.raises(SamplingError):
            data.sample_minibatch(split, P, K, seed=0)


class TestPersistence:
    def test_round_trip(self, split, tmp_path):
        data.save_dataset(split, tmp_path / "ds")
        loaded = data.load_dataset(tmp_path / "ds")
        _same_split(split, loaded)
        assert loaded.spec == split.spec
        for t in Modality:
            np.testing.assert_array_equal(loaded.transforms[t].matrix, split.transforms[t].matrix)

    def test_header(self, split, tmp_path):
        data.save_dataset(split, tmp_path / "ds")
        head = (tmp_path / "ds" / "query.bin").read_bytes().split(b"\n", 1)[0]
        assert head.decode() == f"{SMALL.H} {SMALL.W} {SMALL.C_in} {len(split.query)}"
