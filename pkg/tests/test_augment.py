import numpy as np
import pytest

from protomatch import augment as ag


def one_hot_rows(labels, c):
    out = np.zeros((len(labels), c))
    out[np.arange(len(labels)), labels] = 1.0
    return out


class TestGroupByTrial:
    def test_partition_preserves_cardinalities(self):
        keys = [(1, 1), (1, 1), (1, 2), (1, 1), (1, 2)]
        groups = ag.group_by_trial(keys)
        assert len(groups) == 2
        sizes = {key: len(idx) for key, idx in groups}
        assert sizes == {(1, 1): 3, (1, 2): 2}

    def test_order_preserved_within_group(self):
        keys = [(1, 1), (1, 2), (1, 1)]
        groups = dict(ag.group_by_trial(keys))
        assert groups[(1, 1)] == [0, 2]

    def test_singleton_group(self):
        groups = ag.group_by_trial([(3, 7)])
        assert groups == [((3, 7), [0])]

    def test_keys_pairwise_distinct(self):
        keys = [(1, 1)] * 4 + [(2, 1)] * 4 + [(1, 2)] * 4
        group_keys = [key for key, _ in ag.group_by_trial(keys)]
        assert len(group_keys) == len(set(group_keys))


class TestEegMixup:
    def corpus(self):
        # two trials with far-apart constant features
        x = np.vstack([np.zeros((4, 2)), np.full((4, 2), 1000.0)])
        y = one_hot_rows([0] * 4 + [1] * 4, 2)
        keys = [(1, 1)] * 4 + [(1, 2)] * 4
        return x, y, keys

    def test_omega_one_reproduces_a_parent(self):
        x, y, keys = self.corpus()
        cfg = ag.MixupConfig(alpha=0.5, ratio=1.0, mode="eeg")
        out = ag.eeg_mixup(x, y, keys, cfg, np.random.default_rng(0), omega=1.0)
        for row in out.x:
            assert np.all(row == 0.0) or np.all(row == 1000.0)

    def test_midpoint_arithmetic_and_label_identity(self):
        x = np.array([[2.0, 4.0], [4.0, 8.0]])
        y = one_hot_rows([1, 1], 3)
        keys = [(1, 1), (1, 1)]
        cfg = ag.MixupConfig(alpha=0.5, ratio=0.5, mode="eeg")
        out = ag.eeg_mixup(x, y, keys, cfg, np.random.default_rng(0), omega=0.5)
        assert out.x.shape == (1, 2)
        assert out.x[0] == pytest.approx([3.0, 6.0])
        assert np.array_equal(out.y[0], [0.0, 1.0, 0.0])

    def test_ratio_one_doubles_pool(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(96, 4))
        y = one_hot_rows([0] * 48 + [1] * 48, 2)
        keys = [(1, 1)] * 48 + [(2, 5)] * 48
        out = ag.eeg_mixup(x, y, keys, ag.MixupConfig(ratio=1.0), rng)
        assert out.x.shape[0] == 96

    @pytest.mark.parametrize("ratio", [0.5, 1.0, 2.0])
    def test_output_count_is_rounded_ratio(self, ratio):
        x, y, keys = self.corpus()
        out = ag.eeg_mixup(x, y, keys, ag.MixupConfig(ratio=ratio),
                           np.random.default_rng(0))
        assert out.x.shape[0] == int(round(ratio * x.shape[0]))

    def test_never_mixes_across_trials(self):
        x, y, keys = self.corpus()
        cfg = ag.MixupConfig(alpha=0.5, ratio=10.0, mode="eeg")
        out = ag.eeg_mixup(x, y, keys, cfg, np.random.default_rng(5))
        # a cross-trial mix would land strictly between the two plateaus;
        # in-trial mixes stay at a plateau (up to float rounding)
        for row, key in zip(out.x, out.keys):
            assert np.all(np.abs(row) < 1e-6) or np.all(np.abs(row - 1000.0) < 1e-6)
            assert key in {(1, 1), (1, 2)}

    def test_labels_stay_exactly_one_hot(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(30, 3))
        y = one_hot_rows([0] * 10 + [1] * 10 + [2] * 10, 3)
        keys = [(1, 1)] * 10 + [(1, 2)] * 10 + [(2, 1)] * 10
        out = ag.eeg_mixup(x, y, keys, ag.MixupConfig(ratio=2.0), rng)
        assert np.all((out.y == 0.0) | (out.y == 1.0))
        assert np.all(out.y.sum(axis=1) == 1.0)

    def test_convex_envelope(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 4))
        keys = [(1, 1)] * 6
        out = ag.eeg_mixup(x, None, keys, ag.MixupConfig(ratio=5.0), rng)
        lo, hi = x.min(axis=0), x.max(axis=0)
        assert np.all(out.x >= lo - 1e-12)
        assert np.all(out.x <= hi + 1e-12)

    def test_all_singletons_yields_zero_rows_with_flag(self):
        x = np.ones((3, 2))
        keys = [(1, 1), (1, 2), (1, 3)]
        out = ag.eeg_mixup(x, None, keys, ag.MixupConfig(ratio=1.0),
                           np.random.default_rng(0))
        assert out.x.shape[0] == 0
        assert out.degenerate


class TestStandardMixup:
    def test_soft_label_midpoint(self):
        x = np.array([[0.0, 0.0], [1.0, 1.0]])
        y = one_hot_rows([0, 1], 3)
        cfg = ag.MixupConfig(ratio=0.5, mode="standard")
        out = ag.standard_mixup(x, y, [(1, 1), (2, 2)], cfg,
                                np.random.default_rng(0), omega=0.5)
        assert out.y[0] == pytest.approx([0.5, 0.5, 0.0])

    def test_omega_one_duplicates_a_row(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 3))
        cfg = ag.MixupConfig(ratio=1.0, mode="standard")
        out = ag.standard_mixup(x, None, [(1, i) for i in range(5)], cfg, rng,
                                omega=1.0)
        for row in out.x:
            assert any(np.array_equal(row, orig) for orig in x)

    def test_single_row_gives_zero_output(self):
        cfg = ag.MixupConfig(ratio=2.0, mode="standard")
        out = ag.standard_mixup(np.ones((1, 2)), None, [(1, 1)], cfg,
                                np.random.default_rng(0))
        assert out.x.shape[0] == 0

    def test_single_group_corpus_matches_eeg_mixup_moments(self):
        # on a one-trial corpus both samplers draw uniform in-group pairs,
        # so output moments agree over many draws
        rng_data = np.random.default_rng(10)
        x = rng_data.normal(size=(10, 3))
        keys = [(1, 1)] * 10
        n_draws = 10_000
        cfg_e = ag.MixupConfig(alpha=0.5, ratio=n_draws / 10, mode="eeg")
        cfg_s = ag.MixupConfig(alpha=0.5, ratio=n_draws / 10, mode="standard")
        out_e = ag.eeg_mixup(x, None, keys, cfg_e, np.random.default_rng(20))
        out_s = ag.standard_mixup(x, None, keys, cfg_s, np.random.default_rng(21))
        assert out_e.x.shape[0] == n_draws
        assert np.allclose(out_e.x.mean(axis=0), out_s.x.mean(axis=0), atol=0.05)
        assert np.allclose(out_e.x.std(axis=0), out_s.x.std(axis=0), atol=0.05)


class TestConfigAndDispatch:
    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            ag.MixupConfig(alpha=0.0)
        with pytest.raises(ValueError):
            ag.MixupConfig(ratio=-1.0)
        with pytest.raises(ValueError):
            ag.MixupConfig(mode="fancy")

    def test_augment_domain_off_mode_is_identity(self):
        x = np.ones((4, 2))
        keys = [(1, 1)] * 4
        cfg = ag.MixupConfig(mode="off")
        x2, y2, k2 = ag.augment_domain(x, None, keys, cfg, np.random.default_rng(0))
        assert np.array_equal(x2, x)
        assert y2 is None
        assert k2 == keys

    def test_augment_domain_appends(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 2))
        y = one_hot_rows([0] * 6, 2)
        keys = [(1, 1)] * 6
        x2, y2, k2 = ag.augment_domain(x, y, keys, ag.MixupConfig(ratio=1.0), rng)
        assert x2.shape[0] == 12
        assert y2.shape[0] == 12
        assert len(k2) == 12
        assert np.array_equal(x2[:6], x)
