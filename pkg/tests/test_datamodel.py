import numpy as np
import pytest

from protomatch import adaptation
from protomatch import datamodel as dm


def tiny_dataset(n_subjects=3, trials=5, segs=4, classes=2, dim=3, seed=0, **kw):
    cfg = dm.SynthConfig(
        n_subjects=n_subjects,
        trials_per_subject=trials,
        segments_per_trial=segs,
        n_classes=classes,
        feature_dim=dim,
        seed=seed,
        **kw,
    )
    return dm.synthesize_dataset(cfg)


class TestSynthesize:
    def test_same_seed_is_bitwise_identical(self):
        a = tiny_dataset(seed=9)
        b = tiny_dataset(seed=9)
        assert len(a.segments) == len(b.segments)
        for sa, sb in zip(a.segments, b.segments):
            assert sa.identity() == sb.identity()
            assert sa.label == sb.label
            assert np.array_equal(sa.features, sb.features)

    def test_degenerate_generator_collapses_classes(self):
        ds = tiny_dataset(subject_shift=0.0, trial_drift=0.0, noise=0.0)
        by_class = {}
        for seg in ds.segments:
            by_class.setdefault(seg.label, []).append(seg.features)
        for feats in by_class.values():
            base = feats[0]
            for f in feats[1:]:
                assert np.array_equal(f, base)

    def test_counts_and_per_trial_labels(self):
        ds = tiny_dataset(n_subjects=5, trials=10, segs=20)
        assert len(ds.segments) == 5 * 10 * 20
        for subject in ds.subjects:
            for trial in ds.trials_of(subject):
                labels = {
                    s.label for s in ds.segments
                    if s.subject == subject and s.trial == trial
                }
                assert len(labels) == 1

    def test_subject_shift_increases_between_subject_mmd(self):
        # independent check through the divergence estimator, 5 seeds
        wins = 0
        for seed in range(5):
            shifted = tiny_dataset(dim=6, seed=seed, subject_shift=1.0)
            flat = tiny_dataset(dim=6, seed=seed, subject_shift=0.0)

            def between(ds):
                a = dm.features_matrix(
                    [s for s in ds.segments if s.subject == ds.subjects[0]]
                )
                b = dm.features_matrix(
                    [s for s in ds.segments if s.subject == ds.subjects[1]]
                )
                return adaptation.mmd(a, b, bandwidth=1.0)

            if between(shifted) > between(flat):
                wins += 1
        assert wins == 5


class TestPartition:
    def test_loso_counts_match_protocol(self):
        ds = tiny_dataset(n_subjects=15, trials=15, segs=2, classes=3)
        part = dm.partition_loso(ds, target_subject=1, n_labeled_trials=12)
        trials = lambda rows: {(s.subject, s.trial) for s in rows}
        assert len(trials(part.S)) == 14 * 12
        assert len(trials(part.U)) == 14 * 3
        assert len(trials(part.T)) == 15
        assert all(s.subject == 1 for s in part.T)

    def test_labeled_trials_are_the_first_n(self):
        ds = tiny_dataset(n_subjects=3, trials=6)
        part = dm.partition_loso(ds, target_subject=2, n_labeled_trials=2)
        for seg in part.S:
            assert seg.trial in (1, 2)
        for seg in part.U:
            assert seg.trial not in (1, 2)

    def test_n_equal_to_trial_count_is_rejected(self):
        ds = tiny_dataset(trials=5)
        with pytest.raises(dm.DatasetError, match="unlabeled"):
            dm.partition_loso(ds, target_subject=1, n_labeled_trials=5)

    def test_unknown_subject_rejected(self):
        ds = tiny_dataset()
        with pytest.raises(dm.DatasetError, match="unknown"):
            dm.partition_loso(ds, target_subject=99, n_labeled_trials=2)

    def test_merge_reproduces_segment_multiset(self):
        ds = tiny_dataset()
        part = dm.partition_loso(ds, target_subject=3, n_labeled_trials=2)
        merged = sorted(
            [s.identity() for s in part.S + part.U + part.T]
        )
        assert merged == sorted(s.identity() for s in ds.segments)

    def test_labels_stripped_but_sealed(self):
        ds = tiny_dataset()
        part = dm.partition_loso(ds, target_subject=1, n_labeled_trials=2)
        assert all(s.label is None for s in part.U + part.T)
        assert all(s.label is not None for s in part.S)
        originals = {s.identity(): s.label for s in ds.segments}
        for seg in part.U + part.T:
            assert part.sealed.of(seg) == originals[seg.identity()]


class TestSplitTarget:
    @pytest.mark.parametrize("k,want_head,want_tail", [(3, 3, 12), (12, 12, 3)])
    def test_table_splits(self, k, want_head, want_tail):
        ds = tiny_dataset(n_subjects=2, trials=15, segs=2)
        part = dm.partition_loso(ds, target_subject=1, n_labeled_trials=12)
        head, tail = dm.split_target(part, k)
        assert len({s.trial for s in head}) == want_head
        assert len({s.trial for s in tail}) == want_tail

    def test_partition_property(self):
        ds = tiny_dataset(trials=6)
        part = dm.partition_loso(ds, target_subject=1, n_labeled_trials=2)
        head, tail = dm.split_target(part, 2)
        ids = sorted(s.identity() for s in head + tail)
        assert ids == sorted(s.identity() for s in part.T)
        assert not ({s.identity() for s in head} & {s.identity() for s in tail})

    def test_k_out_of_range(self):
        ds = tiny_dataset(trials=5)
        part = dm.partition_loso(ds, target_subject=1, n_labeled_trials=2)
        with pytest.raises(dm.DatasetError, match="k_trials"):
            dm.split_target(part, 5)


class TestSampleMinibatch:
    def make_partition(self):
        ds = tiny_dataset(n_subjects=3, trials=5, segs=6)
        return dm.partition_loso(ds, target_subject=1, n_labeled_trials=2)

    def test_requested_sizes(self):
        part = self.make_partition()
        batch = dm.sample_minibatch(part, (8, 8, 8), np.random.default_rng(0))
        assert batch.xs.shape[0] == 8
        assert batch.ys.shape == (8, part.n_classes)
        assert batch.xu.shape[0] == 8
        assert batch.xt.shape[0] == 8

    def test_no_label_fields_for_u_and_t(self):
        batch = dm.sample_minibatch(self.make_partition(), (4, 4, 4),
                                    np.random.default_rng(0))
        assert not hasattr(batch, "yu")
        assert not hasattr(batch, "yt")

    def test_one_hot_rows(self):
        batch = dm.sample_minibatch(self.make_partition(), (6, 0, 0),
                                    np.random.default_rng(1))
        assert np.all(batch.ys.sum(axis=1) == 1.0)
        assert set(np.unique(batch.ys)) <= {0.0, 1.0}

    def test_same_seed_same_batch(self):
        part = self.make_partition()
        a = dm.sample_minibatch(part, (5, 5, 5), np.random.default_rng(7))
        b = dm.sample_minibatch(part, (5, 5, 5), np.random.default_rng(7))
        assert np.array_equal(a.xs, b.xs)
        assert np.array_equal(a.xu, b.xu)
        assert np.array_equal(a.xt, b.xt)
        assert a.keys_s == b.keys_s

    def test_group_keys_exist_in_parent_domain(self):
        part = self.make_partition()
        batch = dm.sample_minibatch(part, (8, 8, 8), np.random.default_rng(3))
        s_keys = {s.group_key() for s in part.S}
        u_keys = {s.group_key() for s in part.U}
        t_keys = {s.group_key() for s in part.T}
        assert set(batch.keys_s) <= s_keys
        assert set(batch.keys_u) <= u_keys
        assert set(batch.keys_t) <= t_keys

    def test_oversized_request_flags_replacement(self):
        part = self.make_partition()
        n_t = len(part.T)
        batch = dm.sample_minibatch(part, (4, 4, n_t + 10), np.random.default_rng(0))
        assert batch.replaced["T"] is True
        assert batch.replaced["S"] is False
        assert batch.xt.shape[0] == n_t + 10


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        ds = tiny_dataset(seed=4)
        path = tmp_path / "data.csv"
        dm.write_dataset(ds, path)
        back = dm.load_dataset(path)
        assert back.n_classes == ds.n_classes
        assert back.feature_dim == ds.feature_dim
        assert len(back.segments) == len(ds.segments)
        for a, b in zip(ds.segments, back.segments):
            assert a.identity() == b.identity()
            assert a.label == b.label
            assert np.array_equal(a.features, b.features)

    def test_same_dataset_same_bytes(self, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        dm.write_dataset(tiny_dataset(seed=2), p1)
        dm.write_dataset(tiny_dataset(seed=2), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_small_file_fields(self, tmp_path):
        path = tmp_path / "mini.csv"
        path.write_text(
            "#classes=2\n"
            "subject,session,trial,segment,label,f0,f1\n"
            "1,1,1,0,0,0.5,1.5\n"
            "1,1,2,0,1,-0.5,2.5\n"
        )
        ds = dm.load_dataset(path)
        assert ds.n_classes == 2
        assert ds.feature_dim == 2
        assert [s.label for s in ds.segments] == [0, 1]

    def test_unlabeled_rows(self, tmp_path):
        path = tmp_path / "mini.csv"
        path.write_text(
            "#classes=2\n"
            "subject,session,trial,segment,label,f0\n"
            "1,1,1,0,,0.5\n"
        )
        ds = dm.load_dataset(path)
        assert ds.segments[0].label is None

    def test_empty_data_section(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("#classes=2\nsubject,session,trial,segment,label,f0\n")
        with pytest.raises(dm.DatasetError, match="no segments"):
            dm.load_dataset(path)

    def test_wrong_feature_count_cites_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "#classes=2\n"
            "subject,session,trial,segment,label,f0,f1\n"
            "1,1,1,0,0,0.5,1.5\n"
            "1,1,1,1,0,0.5\n"
        )
        with pytest.raises(dm.DatasetError, match="line 4"):
            dm.load_dataset(path)

    def test_label_out_of_range_cites_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "#classes=2\n"
            "subject,session,trial,segment,label,f0\n"
            "1,1,1,0,5,0.5\n"
        )
        with pytest.raises(dm.DatasetError, match="line 3"):
            dm.load_dataset(path)

    def test_non_finite_feature_cites_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "#classes=2\n"
            "subject,session,trial,segment,label,f0\n"
            "1,1,1,0,0,inf\n"
        )
        with pytest.raises(dm.DatasetError, match="line 3"):
            dm.load_dataset(path)
