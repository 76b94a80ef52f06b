import os

import numpy as np
import pytest

from sleepegan import classifier as C
from sleepegan import seeding, synthetic
from sleepegan.autodiff import Tensor
from sleepegan.autodiff import functional as F
from sleepegan.autodiff.gradcheck import check_gradients
from sleepegan.autodiff.tensor import ShapeError
from sleepegan.bank import CheckpointBank


def tiny_arch():
    return C.ClassifierArch(epoch_length=64, fs=16, filters=(3, 3, 3, 4, 4), kernel=3,
                            pools=((2, 2), (2, 2), (2, 2)), dropout=0.5, hidden=8)


def desk_arch():
    return C.ClassifierArch(epoch_length=256, fs=64, filters=(16, 16, 16, 32, 32),
                            pools=((4, 4), (2, 2), (2, 2)), hidden=32)


def test_replication_shapes_and_rows_sum():
    clf = C.Classifier(C.ClassifierArch(), np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(-1, 1, (2, 20, 3000))
    p, (h, c) = C.classify_sequence(x, clf, "infer")
    assert p.shape == (2, 20, 5)
    assert np.max(np.abs(p.data.sum(-1) - 1.0)) <= 1e-12
    assert h.shape == (2, 128)


def test_five_convs_one_lstm():
    clf = C.Classifier(C.ClassifierArch(), np.random.default_rng(0))
    names = [n for n, _ in clf.named_parameters()]
    assert sum(n.endswith("weight") and n.startswith("conv") for n in names) == 5
    assert sum(n.startswith("lstm.") for n in names) == 3


def test_shape_mismatch():
    clf = C.Classifier(tiny_arch(), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        C.classify_sequence(np.zeros((1, 3, 63)), clf)
    with pytest.raises(ShapeError):
        C.classify_sequence(np.zeros((3, 64)), clf)


def test_infer_deterministic_train_stochastic():
    clf = C.Classifier(tiny_arch(), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 4, 64))
    a, _ = C.classify_sequence(x, clf)
    b, _ = C.classify_sequence(x, clf)
    assert np.array_equal(a.data, b.data)
    t1, _ = C.classify_sequence(x, clf, "train", rng=np.random.default_rng(1))
    assert not np.array_equal(t1.data, a.data)


def test_predict_argmax_and_ties():
    assert C.predict(np.array([0.1, 0.6, 0.1, 0.1, 0.1])) == 1
    assert C.predict(np.array([0.3, 0.3, 0.2, 0.1, 0.1])) == 0
    clf = C.Classifier(tiny_arch(), np.random.default_rng(0))
    p, _ = C.classify_sequence(np.zeros((1, 20, 64)), clf)
    assert C.predict(p).shape == (1, 20)


def test_end_to_end_gradients():
    arch = tiny_arch()
    clf = C.Classifier(arch, np.random.default_rng(0))
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 64))
    y = rng.integers(0, 5, (2, 3))

    def loss():
        logits, _ = C.sequence_logits(x, clf)
        return F.weighted_cross_entropy(logits, y, (1, 1.5, 1, 1, 1))

    assert check_gradients(loss, clf.parameters()) < 1e-4


def test_carried_state_equals_full_sequence():
    clf = C.Classifier(tiny_arch(), np.random.default_rng(0))
    x = np.random.default_rng(2).normal(size=(3, 8, 64))
    full, _ = C.classify_sequence(x, clf)
    first, state = C.classify_sequence(x[:, :4], clf)
    second, _ = C.classify_sequence(x[:, 4:], clf, state=state)
    assert np.array_equal(full.data, np.concatenate([first.data, second.data], axis=1))


def small_corpus(seed=0):
    es = synthetic.spectral_corpus(12, 30, seed=seed)
    subs = es.subject_ids()
    return es.select_subjects(subs[:8]), es.select_subjects(subs[8:10]), es.select_subjects(subs[10:])


def test_training_bank_and_determinism():
    tr, va, _ = small_corpus()
    cfg = C.ClfTrainConfig(learning_rate=1e-3, train_epochs=3, batch_size=4, sequence_length=10, seed=7)
    a = C.train_classifier(tr, va, cfg, desk_arch())
    b = C.train_classifier(tr, va, cfg, desk_arch())
    assert len(a.bank) == 3
    assert [r.val_acc for r in a.log] == [r.val_acc for r in b.log]
    assert [e.epoch for e in a.bank] == [0, 1, 2]


def test_empty_validation_rejected():
    tr, va, _ = small_corpus()
    with pytest.raises(C.ClfConfigError):
        C.train_classifier(tr, va.take([]), C.ClfTrainConfig(train_epochs=1), desk_arch())


def test_loss_decreases_on_separable_corpus():
    es = synthetic.spectral_corpus(200, 40, seed=0)
    subs = es.subject_ids()
    tr, va = es.select_subjects(subs[:140]), es.select_subjects(subs[140:160])
    cfg = C.ClfTrainConfig(learning_rate=1e-3, train_epochs=10, batch_size=8, seed=0)
    losses = [r.train_loss for r in C.train_classifier(tr, va, cfg, desk_arch()).log]
    rises = sum(b >= a for a, b in zip(losses, losses[1:]))
    assert rises <= 1, losses


def test_resume_matches_uninterrupted(tmp_path):
    tr, va, _ = small_corpus(2)
    cfg = C.ClfTrainConfig(learning_rate=1e-3, train_epochs=4, batch_size=4, sequence_length=10, seed=3)
    full = C.train_classifier(tr, va, cfg, desk_arch(), out_dir=str(tmp_path / "a"))
    C.train_classifier(tr, va, cfg, desk_arch(), out_dir=str(tmp_path / "b"), stop_after=2)
    resumed = C.train_classifier(tr, va, cfg, desk_arch(), out_dir=str(tmp_path / "b"), resume=True)
    assert [r.val_acc for r in resumed.log] == [r.val_acc for r in full.log]
    for name in sorted(os.listdir(tmp_path / "a")):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_bank_checkpoints_reproduce_recorded_metrics(tmp_path):
    tr, va, _ = small_corpus(3)
    cfg = C.ClfTrainConfig(learning_rate=1e-3, train_epochs=3, batch_size=4, sequence_length=10, seed=1)
    C.train_classifier(tr, va, cfg, desk_arch(), out_dir=str(tmp_path))
    bank = CheckpointBank.load(str(tmp_path))
    assert len(bank) == 3
    for e in bank:
        model = C.model_from_params(desk_arch(), bank.params(e))
        assert C.evaluate(model, va, 10) == (e.val_acc, e.val_mf1)
