import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sleepegan import pipeline, seeding
from sleepegan.data import GENERATED, REAL, EpochSet
from sleepegan.pipeline import PipelineConfigError

SLEEP_EDF_BEFORE = (10197, 2804, 17799, 5703, 7717)
SHHS_BEFORE = (46319, 10304, 142125, 60153, 65953)


def make_set(n_subjects=3, per_subject=30, length=16, seed=0, gaps=()):
    rng = np.random.default_rng(seed)
    rows = []
    for s in range(n_subjects):
        idx = np.arange(per_subject)
        for g in gaps:
            idx[g:] += 1
        for i in idx:
            rows.append((rng.normal(size=length) * 10, int(rng.integers(5)), f"S{s:02d}", int(i)))
    samples, stages, subjects, index = zip(*rows)
    return EpochSet(np.array(samples), stages, subjects, np.zeros(len(rows)), index)


# normalization


def test_normalize_shift_invariant():
    x = np.random.default_rng(1).normal(size=(10, 100)) * 30
    a, _ = pipeline.normalize_epochs(x)
    b, _ = pipeline.normalize_epochs(x + 123.4)
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1e4))
def test_normalize_within_unit_range(seed, scale):
    x = np.random.default_rng(seed).standard_cauchy(size=(5, 64)) * scale
    out, keep = pipeline.normalize_epochs(x)
    assert out.min() >= -1.0 and out.max() <= 1.0
    assert keep.all()


def test_normalize_sine_amplitude():
    # 99.5th percentile of |A sin| over a full period is A*sin(0.995*pi/2)
    t = np.arange(100 * 300) / 100
    x = (50 * np.sin(2 * np.pi * 2.0 * t)).reshape(10, -1)
    out, _ = pipeline.normalize_epochs(x)
    oracle = 1 / np.sin(0.995 * np.pi / 2)
    assert abs(np.abs(x).max() / np.percentile(np.abs(x), 99.5) - oracle) < 1e-3
    assert abs(out.max() - 1.0) < 0.02
    assert abs(-out.min() - 1.0) < 0.02


def test_normalize_drops_constant(caplog):
    x = np.random.default_rng(0).normal(size=(4, 32))
    x[2] = 5.0
    _, keep = pipeline.normalize_epochs(x)
    assert keep.tolist() == [True, True, False, True]
    with caplog.at_level(logging.WARNING):
        out, keep = pipeline.normalize_epochs(np.full((3, 8), 2.0))
    assert not keep.any()
    assert "zero robust scale" in caplog.text


def test_normalize_set_per_recording():
    es = make_set(2, 10)
    es.samples[:10] *= 1000  # first subject far louder
    res = pipeline.normalize_set(es)
    assert len(res) == 20
    for s in ("S00", "S01"):
        part = res.samples[res.subjects == s]
        assert np.abs(part).max() == 1.0


# signal augmentation


def test_signal_augment_identity_and_inverse():
    rng = np.random.default_rng(0)
    seq = rng.normal(size=(20, 50))
    np.testing.assert_array_equal(pipeline.signal_augment(seq, 25, rng, shift=0), seq)
    fwd = pipeline.signal_augment(seq, 25, rng, shift=17)
    np.testing.assert_array_equal(pipeline.signal_augment(fwd, 25, rng, shift=-17), seq)
    assert fwd.shape == seq.shape


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_signal_augment_preserves_multiset(seed):
    rng = np.random.default_rng(seed)
    seq = rng.integers(-50, 50, size=(int(rng.integers(1, 6)), 12)).astype(float)
    out = pipeline.signal_augment(seq, 11, rng)
    assert Counter(out.ravel().tolist()) == Counter(seq.ravel().tolist())
    # the shift lies in [-max_shift, max_shift]: some circular offset reproduces it
    flat, src = out.ravel(), seq.ravel()
    assert any(np.array_equal(np.roll(src, s), flat) for s in range(-11, 12))


def test_signal_augment_rejects_large_shift():
    with pytest.raises(ValueError):
        pipeline.signal_augment(np.zeros((2, 10)), 10, np.random.default_rng(0))


# sequence augmentation


def test_sequence_augment_offset_zero():
    seqs = pipeline.sequence_augment(40, 20, offset=0)
    assert len(seqs) == 2


def test_sequence_augment_offset_five():
    seqs = pipeline.sequence_augment(40, 20, offset=5)
    assert len(seqs) == 1
    np.testing.assert_array_equal(seqs[0], np.arange(5, 25))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(0, 60))
def test_sequence_augment_coverage(L, extra):
    n = L + extra
    covered = set()
    for off in range(L):
        for s in pipeline.sequence_augment(n, L, offset=off):
            assert len(s) == L and np.all(np.diff(s) == 1)
            covered.update(s.tolist())
    assert covered == set(range(n))


def test_sequence_augment_random_offset_range():
    rng = np.random.default_rng(3)
    starts = {int(pipeline.sequence_augment(100, 20, rng)[0][0]) for _ in range(300)}
    assert starts == set(range(20))


def test_training_sequences_contiguous_and_single_subject():
    es = make_set(3, 50, gaps=(23,))
    seqs = pipeline.training_sequences(es, 10, np.random.default_rng(0))
    assert seqs.shape[1] == 10
    for s in seqs:
        assert len(set(es.subjects[s])) == 1
        assert np.all(np.diff(es.index[s]) == 1)


def test_training_sequences_skip_short_stream(caplog):
    es = make_set(1, 5)
    with caplog.at_level(logging.WARNING):
        seqs = pipeline.training_sequences(es, 10, np.random.default_rng(0))
    assert seqs.shape == (0, 10)
    assert "shorter than" in caplog.text


def test_generated_sequences_isolated_and_wrapped():
    es = make_set(2, 20)
    es = pipeline.rebalance(es, lambda n, r: np.zeros((n, 16)), target_count=int(es.class_counts().min()) + 13)
    seqs = pipeline.training_sequences(es, 10, np.random.default_rng(0))
    gen = np.flatnonzero(es.sources == GENERATED)
    gen_seqs = [s for s in seqs if es.sources[s[0]] == GENERATED]
    assert len(gen_seqs) == 2
    for s in seqs:
        assert len(set(es.sources[s].tolist())) == 1
    assert set(np.concatenate(gen_seqs).tolist()) == set(gen.tolist())


def test_evaluation_sequences_cover_all_real_once():
    es = make_set(2, 47, gaps=(30,))
    seqs = pipeline.evaluation_sequences(es, 20)
    rows = np.concatenate(seqs)
    assert sorted(rows.tolist()) == list(range(len(es)))
    assert max(len(s) for s in seqs) == 20


# rebalancing


def test_rebalance_policy_second_smallest():
    assert pipeline.rebalance_plan((100, 10, 50, 30, 40)) == {1: 20}


def test_rebalance_policy_target_count_requires_value():
    with pytest.raises(PipelineConfigError):
        pipeline.rebalance_plan((1, 2, 3, 4, 5), policy="target_count")
    with pytest.raises(PipelineConfigError):
        pipeline.rebalance_plan((1, 2, 3, 4, 5), policy="bogus")
    assert pipeline.rebalance_plan((1, 2, 3, 4, 5), policy="none") == {}


@pytest.mark.parametrize(
    "before,target,after_total",
    [(SLEEP_EDF_BEFORE, 8120, 49536), (SHHS_BEFORE, 46272, 360822)],
)
def test_rebalance_table_counts(before, target, after_total):
    plan = pipeline.rebalance_plan(before, policy="target_count", target_count=target)
    after = list(before)
    for st_, n in plan.items():
        after[st_] += n
    assert after[1] == target
    assert sum(after) == after_total


def test_shhs_second_smallest_close_to_table():
    # the default policy lands on W's count, 47 away from the reported target
    plan = pipeline.rebalance_plan(SHHS_BEFORE)
    assert SHHS_BEFORE[1] + plan[1] == 46319


def stage_set(counts, length=4):
    stages = np.repeat(np.arange(5), counts)
    n = len(stages)
    return EpochSet(np.zeros((n, length)), stages, ["A"] * n, np.zeros(n), np.arange(n))


def test_rebalance_appends_generated_only():
    es = stage_set((100, 10, 50, 30, 40))
    out = pipeline.rebalance(es, lambda n, r: np.ones((n, 4)), rng=np.random.default_rng(0))
    assert out.class_counts().tolist() == [100, 30, 50, 30, 40]
    gen = out.sources == GENERATED
    assert gen.sum() == 20 and np.all(out.stages[gen] == 1)
    np.testing.assert_array_equal(out.samples[: len(es)], es.samples)
    assert np.all(out.sources[: len(es)] == REAL)


def test_rebalance_missing_generator():
    with pytest.raises(PipelineConfigError):
        pipeline.rebalance(stage_set((5, 1, 5, 5, 5)), None)
    es = stage_set((5, 5, 5, 5, 5))
    assert pipeline.rebalance(es, None) is es


def test_rebalance_bad_generator_shape():
    with pytest.raises(PipelineConfigError):
        pipeline.rebalance(stage_set((5, 1, 5, 5, 5)), lambda n, r: np.zeros((n, 3)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 200), min_size=5, max_size=5))
def test_rebalance_hits_target_exactly(counts):
    plan = pipeline.rebalance_plan(counts)
    after = list(counts)
    for k, n in plan.items():
        after[k] += n
    assert after[int(np.argmin(counts))] == max(sorted(counts)[1], min(counts))


# folds


def test_folds_one_subject_each():
    subjects = [f"S{i:02d}" for i in range(20)]
    plan = pipeline.make_folds(subjects, 20, 0.1, np.random.default_rng(0))
    assert all(len(f.test) == 1 for f in plan.folds)
    assert sorted(s for f in plan.folds for s in f.test) == subjects
    # ceil(0.1 * 19) = 2 validation subjects
    assert all(len(f.val) == 2 and len(f.train) == 17 for f in plan.folds)


def test_folds_deterministic():
    subjects = [f"S{i}" for i in range(33)]
    a = pipeline.make_folds(subjects, 5, 0.1, seeding.rng(4, "folds"))
    b = pipeline.make_folds(subjects, 5, 0.1, seeding.rng(4, "folds"))
    assert a == b
    c = pipeline.make_folds(subjects, 5, 0.1, seeding.rng(5, "folds"))
    assert a != c


def test_folds_too_few_subjects():
    with pytest.raises(PipelineConfigError):
        pipeline.make_folds(["a", "b"], 3)


def test_leakage_check_catches_overlap():
    plan = pipeline.make_folds([str(i) for i in range(6)], 3, 0.2)
    plan.folds[0].val.append(plan.folds[0].test[0])
    with pytest.raises(AssertionError):
        plan.check_leakage()


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 40), st.floats(0.0, 0.5), st.integers(0, 2**32 - 1))
def test_fold_plan_partitions(k, extra, frac, seed):
    subjects = [f"s{i}" for i in range(k + extra)]
    plan = pipeline.make_folds(subjects, k, frac, np.random.default_rng(seed))
    tests = [s for f in plan.folds for s in f.test]
    assert sorted(tests) == sorted(subjects)
    sizes = [len(f.test) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1
    for f in plan.folds:
        assert set(f.train) | set(f.val) | set(f.test) == set(subjects)
        assert not (set(f.train) & set(f.test)) and not (set(f.val) & set(f.test))


def test_seeding_labels_independent():
    assert seeding.derive(1, "fold", 3) == seeding.derive(1, "fold", "3")
    assert seeding.derive(1, "fold", 3) != seeding.derive(1, "fold", 4)
    assert seeding.derive(1, "gan") != seeding.derive(2, "gan")
