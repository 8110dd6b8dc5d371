import math
from dataclasses import replace

import numpy as np
import pytest

from evaction.events import EventStream
from evaction.model import ModelParams
from evaction.training import (EpochLog, Schedule, SequenceDataset, SplitPlan, Stage, TrainingDivergence,
                               _batch_loss, accuracy_from_predictions, evaluate_accuracy, kfold_assignment, log_to_csv,
                               make_split, parse_kv, predict_final, schedule_from_kv, schedule_to_kv, train_staged)
from helpers import SMALL


def _samples(n_subjects=5, per=4, classes=3):
    out = []
    for s in range(1, n_subjects + 1):
        for i in range(per):
            out.append(EventStream(8, 8, [], [], [], [], label=i % classes, subject=f"S{s}"))
    return out


def _data(rng, n=12, t=4, classes=3):
    surfaces = rng.uniform(-1, 1, (n, t, *SMALL.input_hw)).astype(np.float32)
    labels = np.arange(n) % classes
    # make the classes separable by a brightness offset
    surfaces += (labels[:, None, None, None] - 1) * 0.5
    return SequenceDataset(surfaces, labels.astype(np.int64))


# --- splits ----------------------------------------------------------------

def test_loso_holds_out_subject():
    samples = _samples()
    sp = make_split(samples, SplitPlan("leave_one_subject_out", "S3", seed=0))
    assert all(s.subject == "S3" for s in sp.test) and len(sp.test) == 4
    assert all(s.subject != "S3" for s in sp.train + sp.val)
    ids = lambda part: {id(s) for s in part}
    assert not ids(sp.train) & ids(sp.val)
    assert len(sp.train) + len(sp.val) == 16
    assert len(sp.train) == round(0.85 * 16)


def test_loso_unknown_subject():
    with pytest.raises(KeyError):
        make_split(_samples(), SplitPlan("leave_one_subject_out", "S9"))


def test_loso_needs_subjects():
    with pytest.raises(ValueError):
        make_split([EventStream(4, 4, [], [], [], [], label=0)], SplitPlan("leave_one_subject_out", "S1"))


def test_kfold_partition():
    for n, k in ((23, 4), (8, 4), (5, 4)):
        fold = kfold_assignment(n, k, seed=3)
        sizes = np.bincount(fold, minlength=k)
        assert sizes.sum() == n and sizes.max() - sizes.min() <= 1
    samples = _samples()
    tests = [make_split(samples, SplitPlan("kfold", f, seed=1)).test for f in range(4)]
    assert sorted(id(s) for t in tests for s in t) == sorted(id(s) for s in samples)


def test_split_deterministic():
    samples = _samples()
    a = make_split(samples, SplitPlan("kfold", 2, seed=7))
    b = make_split(samples, SplitPlan("kfold", 2, seed=7))
    assert [id(s) for s in a.train] == [id(s) for s in b.train]
    assert [id(s) for s in a.test] == [id(s) for s in b.test]


def test_missing_class_warning():
    samples = _samples(per=3, classes=3)
    samples.append(EventStream(8, 8, [], [], [], [], label=7, subject="S2"))
    sp = make_split(samples, SplitPlan("leave_one_subject_out", "S2"))
    assert any("7" in w and "test" in w for w in sp.warnings)


def test_fixed_split():
    samples = _samples()
    sp = make_split(samples, SplitPlan("fixed", [0, 5], seed=0))
    assert sp.test == [samples[0], samples[5]]
    with pytest.raises(KeyError):
        make_split(samples, SplitPlan("fixed", [99]))


def test_plan_fractions_must_sum():
    with pytest.raises(ValueError):
        SplitPlan(train_fraction=0.8, val_fraction=0.1)


# --- schedules -------------------------------------------------------------

def test_stage_invariants():
    with pytest.raises(ValueError):
        Stage(epochs=0)
    with pytest.raises(ValueError):
        Stage(scope="encoder")
    with pytest.raises(ValueError):
        Stage(labels="coarse")


def test_schedule_kv_round_trip():
    sch = Schedule.three_stage()
    assert [s.epochs for s in sch.stages] == [60, 10, 100]
    text = schedule_to_kv(sch)
    assert schedule_from_kv(parse_kv(text)) == sch
    assert schedule_from_kv(parse_kv("# nothing here\n")) is None
    with pytest.raises(ValueError):
        parse_kv("stages 3")


def test_kv_partial_stage_uses_defaults():
    sch = schedule_from_kv(parse_kv("stages = 1\nstage1.scope = head_only  # freeze\nstage1.epochs = 2\n"))
    assert sch.stages[0] == Stage("head_only", 2)


# --- training --------------------------------------------------------------

def test_initial_loss_near_log_c(rng):
    params = ModelParams.init(SMALL, seed=0)
    d = _data(rng, n=30)
    loss = float(_batch_loss(params, d.surfaces, d.labels, "all").data)
    assert abs(loss - math.log(3)) <= 0.1 * math.log(3)


def test_zero_lr_stage_leaves_params(rng):
    params = ModelParams.init(SMALL, seed=1)
    d = _data(rng)
    out, hist = train_staged(params, d, d, Schedule((Stage("all", 3, 4, 0.0),)), seed=0)
    assert out.state_bytes() == params.state_bytes()
    losses = [h.train_loss for h in hist]
    # batches are reshuffled, so only float32 summation order differs
    assert max(losses) - min(losses) <= 1e-6 * losses[0]


def test_head_only_freezes_body(rng):
    params = ModelParams.init(SMALL, seed=2)
    d = _data(rng)
    body = [n for n in params.names() if not n.startswith("head.")]
    out, _ = train_staged(params, d, d, Schedule((Stage("head_only", 2, 4, 1e-2),)), seed=0)
    assert out.state_bytes(body) == params.state_bytes(body)
    assert out.state_bytes(["head.out.weight"]) != params.state_bytes(["head.out.weight"])


def test_training_does_not_mutate_input(rng):
    params = ModelParams.init(SMALL, seed=3)
    before = params.state_bytes()
    d = _data(rng)
    train_staged(params, d, d, Schedule((Stage("all", 1, 4, 1e-2),)), seed=0)
    assert params.state_bytes() == before


def test_training_reduces_loss_and_logs(rng):
    params = ModelParams.init(SMALL, seed=4)
    d = _data(rng, n=18)
    seen = []
    out, hist = train_staged(params, d, d, Schedule((Stage("all", 6, 6, 3e-3),)), seed=0, on_epoch=seen.append)
    assert hist == seen and len(hist) == 6
    assert hist[-1].train_loss < hist[0].train_loss
    csv_text = log_to_csv(hist)
    assert csv_text.splitlines()[0] == "stage,epoch,train_loss,val_acc,seconds"
    assert len(csv_text.splitlines()) == 7


def test_training_deterministic(rng):
    params = ModelParams.init(SMALL, seed=5)
    d = _data(rng)
    sch = Schedule((Stage("all", 2, 4, 1e-3),))
    a, ha = train_staged(params, d, d, sch, seed=9)
    b, hb = train_staged(params, d, d, sch, seed=9)
    assert a.state_bytes() == b.state_bytes()
    assert [h.train_loss for h in ha] == [h.train_loss for h in hb]


def test_super_category_stage_swaps_head(rng):
    params = ModelParams.init(SMALL, seed=6)
    d = _data(rng, n=12, classes=3)
    sch = Schedule((Stage("all", 1, 4, 1e-3, "super_category"), Stage("head_only", 1, 4, 1e-3, "full")))
    out, _ = train_staged(params, d, d, sch, seed=0, super_map={0: 0, 1: 0, 2: 1})
    assert out.config.num_classes == 3
    assert out.layers["head.out"]["weight"].shape == (SMALL.embed_dim, 3)
    with pytest.raises(ValueError):
        train_staged(params, d, d, sch, seed=0)


def test_divergence_reports_stage(rng):
    params = ModelParams.init(SMALL, seed=7)
    params.layers["proj.1"]["weight"].data[:] = np.nan
    d = _data(rng)
    with pytest.raises(TrainingDivergence, match="stage 1, epoch 1"):
        train_staged(params, d, d, Schedule((Stage("all", 1, 4, 1e-3),)), seed=0)


def test_empty_sets_rejected(rng):
    d = _data(rng)
    empty = SequenceDataset(d.surfaces[:0], d.labels[:0])
    with pytest.raises(ValueError):
        train_staged(ModelParams.init(SMALL), empty, d, Schedule.two_stage())


# --- evaluation ------------------------------------------------------------

def test_accuracy_constant_predictor(rng):
    params = ModelParams.init(SMALL, seed=8)
    d = _data(rng, n=10)
    pred = predict_final(params, d)[:, -1].argmax(axis=1)
    rep = evaluate_accuracy(params, SequenceDataset(d.surfaces, pred))
    assert rep.accuracy == 1.0


def test_accuracy_chance_level():
    rng = np.random.default_rng(0)
    cfg_params = ModelParams.init(replace(SMALL, num_classes=2), seed=9)
    n = 200
    d = SequenceDataset(rng.uniform(-1, 1, (n, 2, *SMALL.input_hw)).astype(np.float32), np.arange(n) % 2)
    rep = evaluate_accuracy(cfg_params, d)
    assert abs(rep.accuracy - 0.5) <= 3 * math.sqrt(0.25 / n) + 1e-9


def test_accuracy_hand_count():
    pred = [0, 1, 1, 2, 0, 2, 2, 1, 0, 0]
    lab = [0, 1, 2, 2, 0, 1, 2, 1, 1, 0]
    rep = accuracy_from_predictions(pred, lab, 3)
    assert rep.accuracy == 0.7
    assert rep.per_class == {0: 1.0, 1: 2 / 4, 2: 2 / 3}


def test_evaluate_empty_rejected():
    d = SequenceDataset(np.zeros((0, 2, 16, 16), np.float32), np.zeros(0, np.int64))
    with pytest.raises(ValueError):
        evaluate_accuracy(ModelParams.init(SMALL), d)


def test_epoch_log_fields():
    e = EpochLog(1, 2, 0.5, 0.75, 1.25)
    assert log_to_csv([e]).splitlines()[1] == "1,2,0.500000,0.7500,1.250"
