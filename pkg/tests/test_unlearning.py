import numpy as np
import pytest

import sisa_unlearn as su
from sisa_unlearn.checkpoint import CheckpointStore, stored_digest
from sisa_unlearn.errors import UnknownClassError


@pytest.fixture(scope="module")
def bundle():
    return su.synthetic_bundle(n_per_class=80, num_classes=6, shape=(16,),
                               separation=3.0, seed=2)


@pytest.fixture(scope="module")
def cfg():
    return su.TrainConfig(max_epochs_per_slice=5, patience=None,
                          replay_ratio=0.3, batch_size=32, seed=13)


@pytest.fixture(scope="module")
def scls_store(tmp_path_factory):
    return CheckpointStore(tmp_path_factory.mktemp("scls_run"))


@pytest.fixture(scope="module")
def scls_system(bundle, cfg, scls_store):
    plan = su.make_plan(bundle.train.labels, K=2, L=3,
                        policy=su.SEQUENTIAL_CLASS)
    return su.train_sisa(bundle, plan, cfg, store=scls_store)


@pytest.fixture(scope="module")
def balanced_system(bundle, cfg):
    plan = su.make_plan(bundle.train.labels, K=2, L=3, policy=su.BALANCED)
    return su.train_sisa(bundle, plan, cfg)


class TestVerifyExact:
    def test_trained_model_fails_before_unlearning(self, bundle, cfg,
                                                   scls_system):
        verdict, matrix = su.verify_exact(scls_system.ensemble, bundle.test, 0)
        assert not verdict
        assert matrix[:, 0].sum() > 0
        assert matrix.sum() == len(bundle.test)

    def test_column_zero_after_unlearning(self, bundle, cfg, scls_system):
        new_system, _ = su.unlearn_scls(scls_system, bundle, 0, cfg)
        verdict, matrix = su.verify_exact(new_system.ensemble, bundle.test, 0)
        assert verdict
        assert matrix[:, 0].sum() == 0
        assert matrix[0, :].sum() == (bundle.test.labels == 0).sum()

    def test_empty_test_set_rejected(self, bundle, scls_system):
        empty = bundle.test.subset([])
        with pytest.raises(ValueError):
            su.verify_exact(scls_system.ensemble, empty, 0)


class TestBaseline:
    def test_retrains_on_reduced_set(self, bundle, cfg):
        model = su.train_baseline(bundle, cfg)
        new_model, outcome = su.unlearn_baseline(model, bundle, 3, cfg)
        assert 3 not in new_model.params.output_classes
        assert outcome.verdict
        assert outcome.shard_id is None
        # reduced training set: 6 classes x 56 train samples, minus one class
        survivors = bundle.train.restricted_to(new_model.params.output_classes)
        assert len(survivors) == len(bundle.train) - 56

    def test_unknown_class(self, bundle, cfg):
        model = su.train_baseline(bundle, cfg)
        with pytest.raises(UnknownClassError):
            su.unlearn_baseline(model, bundle, 17, cfg)

    def test_degenerate_two_class_warning(self, cfg):
        two = su.synthetic_bundle(n_per_class=40, num_classes=2, shape=(8,),
                                  separation=3.0, seed=4)
        model = su.train_baseline(two, cfg)
        with pytest.warns(UserWarning, match="degenerate"):
            _, outcome = su.unlearn_baseline(model, two, 0, cfg)
        assert outcome.verdict

    def test_retraining_time_near_training_time(self, bundle):
        timer_cfg = su.TrainConfig(max_epochs_per_slice=12, patience=None,
                                   batch_size=32, seed=13)
        model = su.train_baseline(bundle, timer_cfg)
        _, outcome = su.unlearn_baseline(model, bundle, 1, timer_cfg)
        ratio = outcome.seconds / model.train_seconds
        assert 0.5 <= ratio <= 1.3    # ~5/6 of the data at fixed epochs


class TestBalanced:
    def test_retrains_all_slices_and_isolates_other_shard(self, bundle, cfg,
                                                          tmp_path):
        store = CheckpointStore(tmp_path)
        plan = su.make_plan(bundle.train.labels, K=2, L=3, policy=su.BALANCED)
        system = su.train_sisa(bundle, plan, cfg, store=store)
        victim = 0
        k = plan.metadata[victim].shard_id
        other = 1 - k
        before = store.shard_digests(other)
        before_own = store.shard_digests(k)

        new_system, outcome = su.unlearn_balanced(system, bundle, victim, cfg)
        assert outcome.slices_retrained == 3
        assert outcome.verdict
        assert store.shard_digests(other) == before
        assert store.shard_digests(k) != before_own
        assert victim not in new_system.ensemble.by_shard(k).output_classes

    def test_decommission_after_removing_every_class(self, bundle, cfg,
                                                     balanced_system):
        system = balanced_system
        k = 0
        doomed = sorted(system.plan.assignments[k].class_ids)
        for c in doomed:
            system, outcome = su.unlearn_balanced(system, bundle, c, cfg)
            assert outcome.verdict
        assert k not in system.ensemble.shard_ids
        assert len(system.ensemble.constituents) == 1
        report = su.evaluate(system.ensemble, bundle.test)
        assert report.accuracy > 0

    def test_policy_recorded(self, bundle, cfg, balanced_system):
        _, outcome = su.unlearn_balanced(balanced_system, bundle, 1, cfg)
        assert outcome.strategy == "sisa_balanced"
        assert outcome.first_slice == 1


class TestScls:
    def test_slice_count_law(self, bundle, cfg, scls_system):
        plan = scls_system.plan
        for c, loc in sorted(plan.metadata.items()):
            _, outcome = su.unlearn_scls(scls_system, bundle, c, cfg)
            want = plan.L - loc.first_slice
            assert outcome.slices_retrained == want
            assert outcome.first_slice == loc.first_slice + 1

    def test_last_slice_class_retrains_one(self, bundle, cfg, scls_system):
        plan = scls_system.plan
        last = [c for c, loc in plan.metadata.items()
                if loc.first_slice == plan.L - 1]
        assert last
        _, outcome = su.unlearn_scls(scls_system, bundle, last[0], cfg)
        assert outcome.slices_retrained == 1

    def test_replay_hygiene(self, bundle, cfg, scls_system):
        victim = 0
        new_system, _ = su.unlearn_scls(scls_system, bundle, victim, cfg)
        k = scls_system.plan.metadata[victim].shard_id
        for buf in new_system.shard_results[k].replays:
            if len(buf):
                assert not np.any(bundle.train.labels[buf.indices] == victim)

    def test_prior_checkpoints_preserved(self, bundle, cfg, scls_system):
        plan = scls_system.plan
        spanner = [c for c, loc in plan.metadata.items() if loc.first_slice > 0]
        victim = spanner[0]
        loc = plan.metadata[victim]
        new_system, _ = su.unlearn_scls(scls_system, bundle, victim, cfg)
        old = scls_system.shard_results[loc.shard_id].checkpoints
        new = new_system.shard_results[loc.shard_id].checkpoints
        assert len(new) == plan.L
        for i in range(loc.first_slice):
            assert new[i] is old[i]

    def test_disk_isolation(self, bundle, cfg, scls_store, scls_system):
        victim = max(scls_system.plan.metadata)
        k = scls_system.plan.metadata[victim].shard_id
        other = 1 - k
        before = scls_store.shard_digests(other)
        su.unlearn_scls(scls_system, bundle, victim, cfg)
        assert scls_store.shard_digests(other) == before

    def test_unknown_class_lists_known(self, bundle, cfg, scls_system):
        with pytest.raises(UnknownClassError, match="known"):
            su.unlearn_scls(scls_system, bundle, 42, cfg)

    def test_chained_removals(self, bundle, cfg, scls_system):
        system = scls_system
        for victim in (0, 3):
            system, outcome = su.unlearn_scls(system, bundle, victim, cfg)
            assert outcome.verdict
        covered = system.ensemble.covered_classes()
        assert covered == {1, 2, 4, 5}
        with pytest.raises(UnknownClassError, match="removed"):
            su.unlearn_scls(system, bundle, 0, cfg)


@pytest.fixture(scope="module")
def gated(bundle, cfg, tmp_path_factory):
    store = CheckpointStore(tmp_path_factory.mktemp("gated_run"))
    plan = su.make_plan(bundle.train.labels, K=2, L=3,
                        policy=su.SEQUENTIAL_CLASS)
    system = su.train_sisa(bundle, plan, cfg, gated=True, store=store)
    return store, system


class TestGated:
    def test_gating_digest_unchanged(self, bundle, cfg, gated):
        store, system = gated
        before = stored_digest(store.gating_path())
        new_system, outcome = su.unlearn_gated(system, bundle, 2, cfg)
        assert stored_digest(store.gating_path()) == before
        assert new_system.ensemble.gating is system.ensemble.gating
        assert outcome.verdict

    def test_removed_class_routes_to_survivors(self, bundle, cfg, gated):
        _store, system = gated
        victim = 2
        new_system, _ = su.unlearn_gated(system, bundle, victim, cfg)
        removed_inputs = bundle.test.restricted_to([victim]).inputs
        labels, shards = su.ensemble.gated_predict_batch(new_system.ensemble,
                                                         removed_inputs)
        assert not np.any(labels == victim)
        assert set(np.unique(shards)) <= set(new_system.ensemble.shard_ids)

    def test_requires_gating(self, bundle, cfg, scls_system):
        with pytest.raises(RuntimeError, match="gating"):
            su.unlearn_gated(scls_system, bundle, 0, cfg)


class TestPolicyPreconditions:
    def test_balanced_strategy_needs_balanced_plan(self, bundle, cfg,
                                                   scls_system):
        with pytest.raises(ValueError, match="balanced plan"):
            su.unlearn_balanced(scls_system, bundle, 0, cfg)

    def test_scls_strategy_needs_sequential_plan(self, bundle, cfg,
                                                 balanced_system):
        with pytest.raises(ValueError, match="sequential class slicing"):
            su.unlearn_scls(balanced_system, bundle, 0, cfg)

    def test_request_validation(self):
        with pytest.raises(ValueError, match="unknown strategy"):
            su.UnlearnRequest(target=0, strategy="nope")
        req = su.UnlearnRequest(target=3, strategy="sisa_gated", seed=5)
        assert (req.target, req.strategy, req.seed) == (3, "sisa_gated", 5)


class TestDispatcher:
    def test_roundtrip_each_strategy(self, bundle, cfg, scls_system,
                                     balanced_system):
        model = su.train_baseline(bundle, cfg)
        gated_plan = su.make_plan(bundle.train.labels, K=2, L=3,
                                  policy=su.SEQUENTIAL_CLASS)
        gated = su.train_sisa(bundle, gated_plan, cfg, gated=True)
        targets = {"baseline_full": model, "sisa_balanced": balanced_system,
                   "sisa_scls_replay": scls_system, "sisa_gated": gated}
        for strategy, target in targets.items():
            _new, outcome = su.run_unlearning(strategy, target, bundle, 1, cfg)
            assert outcome.strategy == strategy
            assert outcome.verdict
            doc = outcome.to_json_dict()
            assert doc["verdict"] == "pass"
            assert len(doc["confusion_matrix"]) == bundle.num_classes
