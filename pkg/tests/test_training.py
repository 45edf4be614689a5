import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import sisa_unlearn as su
import sisa_unlearn.nn as nn
from sisa_unlearn.checkpoint import CheckpointStore
from sisa_unlearn.errors import NumericFault
from sisa_unlearn.rng import RngState
from sisa_unlearn.training import early_stop_monitor, fit, sample_replay

from conftest import make_labels


def sequential_layout(counts, L):
    labels = make_labels(counts)
    plan = su.make_plan(labels, K=1, L=L, policy=su.SEQUENTIAL_CLASS)
    return labels, plan.layouts[0]


class TestSampleReplay:
    def test_buffer_size_from_ratio(self):
        labels, layout = sequential_layout({0: 7000, 1: 7000, 2: 7000}, L=3)
        buf = sample_replay(layout, 2, 0.3, RngState(0), labels)
        assert len(buf) == 4200

    def test_zero_ratio_and_first_slice(self):
        labels, layout = sequential_layout({0: 10, 1: 10}, L=2)
        assert len(sample_replay(layout, 1, 0.0, RngState(0), labels)) == 0
        assert len(sample_replay(layout, 0, 0.5, RngState(0), labels)) == 0

    def test_proportional_split(self):
        # oracle: per-class proportional counts, 80 total -> 50/30
        labels = make_labels({0: 100, 1: 60, 2: 40})
        plan = su.make_plan(labels, K=1, L=2, policy=su.SEQUENTIAL_CLASS)
        layout = plan.layouts[0]
        # first slice: 100 of class 0; second: rest. Rebuild a custom layout
        # so the prior slice holds exactly {0: 100, 1: 60}.
        prior = np.flatnonzero(labels <= 1)
        rest = np.flatnonzero(labels == 2)
        layout.slices = [prior, rest]
        buf = sample_replay(layout, 1, 0.5, RngState(1), labels)
        assert len(buf) == 80
        got = np.bincount(labels[buf.indices], minlength=3)
        assert got.tolist() == [50, 30, 0]

    def test_never_samples_current_or_future(self):
        labels, layout = sequential_layout({c: 20 for c in range(4)}, L=4)
        for ell in range(1, 4):
            buf = sample_replay(layout, ell, 0.4, RngState(2), labels)
            prior = np.concatenate(layout.slices[:ell])
            assert np.isin(buf.indices, prior).all()
            assert (buf.source_slices < ell).all()

    def test_deterministic(self):
        labels, layout = sequential_layout({0: 30, 1: 30}, L=2)
        a = sample_replay(layout, 1, 0.5, RngState(3), labels)
        b = sample_replay(layout, 1, 0.5, RngState(3), labels)
        assert np.array_equal(a.indices, b.indices)

    def test_bad_ratio(self):
        labels, layout = sequential_layout({0: 10, 1: 10}, L=2)
        with pytest.raises(ValueError):
            sample_replay(layout, 1, 1.5, RngState(0), labels)


class TestEarlyStop:
    def test_strictly_decreasing_never_stops(self):
        losses = [1.0 - 0.01 * i for i in range(50)]
        for i in range(1, len(losses) + 1):
            assert not early_stop_monitor(losses[:i], patience=7)

    def test_stops_after_seven_stalls(self):
        history = [1.0]
        for i in range(1, 8):
            history.append(1.0 + 0.01 * i)
            should = early_stop_monitor(history, patience=7)
            assert should == (i == 7)

    def test_equal_loss_counts_as_stall(self):
        assert early_stop_monitor([1.0] + [1.0] * 7, patience=7)

    def test_counter_resets_on_improvement(self):
        history = [1.0, 1.1, 0.5]
        assert not early_stop_monitor(history, patience=2)
        history += [0.6, 0.7]
        assert early_stop_monitor(history, patience=2)

    def test_empty_history_rejected(self):
        with pytest.raises(ValueError):
            early_stop_monitor([], patience=3)

    @settings(max_examples=50, deadline=None)
    @given(losses=st.lists(st.floats(0.01, 10.0, allow_nan=False), min_size=1,
                           max_size=30),
           patience=st.integers(1, 8))
    def test_stop_definition(self, losses, patience):
        # stop iff the strict best lies at least `patience` entries back
        best_i = 0
        for i, v in enumerate(losses):
            if v < losses[best_i]:
                best_i = i
        expected = (len(losses) - 1 - best_i) >= patience
        assert early_stop_monitor(losses, patience) == expected


class TestFit:
    def test_early_stopping_keeps_best(self, small_bundle):
        head = (0, 1, 2, 3, 4, 5)
        cfg = su.TrainConfig(max_epochs_per_slice=40, patience=3,
                             batch_size=32, seed=5, learning_rate=0.05)
        params = nn.init_params(nn.mlp_architecture(16), head, RngState(5))
        opt = nn.adam_init(params, cfg.adam())
        train, val = small_bundle.train, small_bundle.val
        res = fit(params, opt, train.inputs, train.labels,
                  val.inputs, val.labels, cfg, RngState(6))
        # stopped before the budget, and the kept parameters score the best loss
        assert res.epochs < 40
        assert nn.mean_loss(params, val.inputs, val.labels) == \
            pytest.approx(min(res.history), abs=1e-6)

    def test_numeric_fault_names_slice(self, small_bundle):
        labels = make_labels({0: 16, 1: 16})
        plan = su.make_plan(labels, K=1, L=2, policy=su.SEQUENTIAL_CLASS)
        inputs = np.full((32, 4), np.inf, dtype=np.float32)
        train = su.LabeledDataset(inputs=inputs, labels=labels,
                                  class_names=["a", "b"])
        val = train.subset([0, 1])
        cfg = su.TrainConfig(max_epochs_per_slice=2, patience=None, seed=0)
        with pytest.raises(NumericFault, match=r"slice 0.*epoch 0"):
            su.train_shard(plan, 0, train, val, cfg)


@pytest.fixture(scope="module")
def plan(small_bundle):
    return su.make_plan(small_bundle.train.labels, K=2, L=3,
                        policy=su.SEQUENTIAL_CLASS)


class TestTrainShard:

    def test_single_slice_plan(self, small_bundle, quick_cfg):
        plan = su.make_plan(small_bundle.train.labels, K=2, L=1,
                            policy=su.SEQUENTIAL_CLASS)
        res = su.train_shard(plan, 0, small_bundle.train, small_bundle.val,
                             quick_cfg)
        assert len(res.checkpoints) == 1

    def test_checkpoint_count_is_l(self, small_bundle, plan, quick_cfg):
        res = su.train_shard(plan, 0, small_bundle.train, small_bundle.val,
                             quick_cfg)
        assert len(res.checkpoints) == 3
        assert res.slices_trained == 3
        assert [c.slice_index for c in res.checkpoints] == [0, 1, 2]

    def test_rollback_equivalence_in_memory(self, small_bundle, plan, quick_cfg):
        full = su.train_shard(plan, 0, small_bundle.train, small_bundle.val,
                              quick_cfg)
        resumed = su.train_shard(plan, 0, small_bundle.train, small_bundle.val,
                                 quick_cfg, start_slice=1,
                                 initial=full.checkpoints[0])
        for k, t in full.final.params.tensors.items():
            assert resumed.final.params.tensors[k].tobytes() == t.tobytes()
        for k in full.final.opt_state.m:
            assert resumed.final.opt_state.m[k].tobytes() == \
                full.final.opt_state.m[k].tobytes()

    def test_rollback_equivalence_through_disk(self, small_bundle, plan,
                                               quick_cfg, tmp_path):
        store = CheckpointStore(tmp_path)
        full = su.train_shard(plan, 1, small_bundle.train, small_bundle.val,
                              quick_cfg, store=store)
        loaded = store.load_slice(1, 1)
        resumed = su.train_shard(plan, 1, small_bundle.train, small_bundle.val,
                                 quick_cfg, start_slice=2, initial=loaded)
        assert resumed.final.params.tensors["dense1.w"].tobytes() == \
            full.final.params.tensors["dense1.w"].tobytes()

    def test_replay_mitigates_forgetting(self, small_bundle, plan):
        accs = {}
        for rho in (0.0, 0.3):
            cfg = su.TrainConfig(max_epochs_per_slice=8, patience=None,
                                 replay_ratio=rho, batch_size=32, seed=9)
            res = su.train_shard(plan, 0, small_bundle.train, small_bundle.val,
                                 cfg)
            part = small_bundle.test.restricted_to(res.head)
            pred = nn.predict_global(res.final.params, part.inputs)
            accs[rho] = float((pred == part.labels).mean())
        assert accs[0.3] > accs[0.0]

    def test_forgetting_observable_without_replay(self):
        # overlapping classes and enough steps per slice make the drift visible
        bundle = su.synthetic_bundle(n_per_class=60, num_classes=6, shape=(16,),
                                     separation=1.5, seed=1)
        seq_plan = su.make_plan(bundle.train.labels, K=2, L=3,
                                policy=su.SEQUENTIAL_CLASS)
        cfg = su.TrainConfig(max_epochs_per_slice=30, patience=None,
                             replay_ratio=0.0, batch_size=32, seed=9)
        res = su.train_shard(seq_plan, 0, bundle.train, bundle.val, cfg)
        first_classes = np.unique(bundle.train.labels[seq_plan.layouts[0].slices[0]])
        part = bundle.test.restricted_to(first_classes)
        accs = []
        for ckpt in res.checkpoints[:2]:
            pred = nn.predict_global(ckpt.params, part.inputs)
            accs.append(float((pred == part.labels).mean()))
        assert accs[1] < accs[0]

    def test_replay_buffers_stay_behind_cursor(self, small_bundle, plan,
                                               quick_cfg):
        res = su.train_shard(plan, 0, small_bundle.train, small_bundle.val,
                             quick_cfg)
        for ell, buf in enumerate(res.replays):
            if len(buf):
                assert (buf.source_slices < ell).all()

    def test_slice_costs_less_than_shard(self, small_bundle, plan):
        cfg = su.TrainConfig(max_epochs_per_slice=6, patience=None,
                             batch_size=16, seed=4)
        res = su.train_shard(plan, 0, small_bundle.train, small_bundle.val, cfg)
        head = res.head
        whole = small_bundle.train.restricted_to(head)
        params = nn.init_params(nn.mlp_architecture(16), tuple(head), RngState(1))
        opt = nn.adam_init(params, cfg.adam())
        lut = {c: i for i, c in enumerate(head)}
        y = np.array([lut[int(v)] for v in whole.labels])
        whole_fit = fit(params, opt, whole.inputs, y, None, None, cfg, RngState(2))
        assert min(res.seconds_per_slice) < whole_fit.seconds
