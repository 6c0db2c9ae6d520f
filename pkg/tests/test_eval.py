import csv
import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from oracles import confusion_f1s, confusion_uar

from rcnmer.data import DataError, FlowDataset, read_pgm_raw
from rcnmer.engine import Tensor
from rcnmer.evaluation.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from rcnmer.evaluation.loso import (
    cam_map,
    complexity_sweep,
    export_cam,
    read_report,
    run_loso,
    sweep_summary,
    to_uint8,
    top_decile_inside,
    train_fold,
    write_csv,
)
from rcnmer.evaluation.metrics import (
    MetricError,
    compute_uar,
    compute_uf1,
    confusion_matrix,
    per_class_f1,
)
from rcnmer.evaluation.training import TrainConfig, predict, train_single
from rcnmer.models import RcnModel, class_weight_map, named_descriptor

HAND_CM = [[8, 1, 1], [1, 3, 1], [0, 1, 4]]


# -- metrics ------------------------------------------------------------------

def test_uar_hand_example():
    assert compute_uar(HAND_CM) == pytest.approx((0.8 + 0.6 + 0.8) / 3, abs=1e-12)
    assert compute_uar(HAND_CM) == pytest.approx(0.7333, abs=1e-4)


def test_uf1_hand_example():
    np.testing.assert_allclose(per_class_f1(HAND_CM), [16 / 19, 0.6, 8 / 11], atol=1e-12)
    np.testing.assert_allclose(per_class_f1(HAND_CM), [0.8421, 0.6000, 0.7273], atol=1e-4)
    assert compute_uf1(HAND_CM) == pytest.approx(0.7231, abs=1e-4)


def test_perfect_and_constant():
    assert compute_uar(np.diag([3, 4, 5])) == 1.0
    assert compute_uf1(np.diag([3, 4, 5])) == 1.0
    constant = [[5, 0, 0], [5, 0, 0], [5, 0, 0]]
    assert compute_uar(constant) == pytest.approx(1 / 3)


def test_f1_degenerate_class_warns():
    cm = [[2, 1, 0], [1, 2, 0], [1, 1, 0]]
    with pytest.warns(RuntimeWarning):
        f1 = per_class_f1(cm)
    assert f1[2] == 0.0


def test_uar_empty_class():
    cm = [[2, 1, 0], [1, 2, 0], [0, 0, 0]]
    with pytest.raises(MetricError):
        compute_uar(cm)
    assert compute_uar(cm, allow_empty=True) == pytest.approx(2 / 3)


def test_metric_input_validation():
    with pytest.raises(MetricError):
        compute_uar([[1, 2]])
    with pytest.raises(MetricError):
        compute_uar([[1, -1], [0, 1]])
    with pytest.raises(MetricError):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(MetricError):
        confusion_matrix([0, 3], [0, 1], 3)


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=60))
def test_confusion_matrix_invariants(pairs):
    t, p = zip(*pairs)
    cm = confusion_matrix(t, p, 3)
    assert cm.sum() == len(pairs)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(t, minlength=3))


@given(st.lists(st.integers(0, 20), min_size=9, max_size=9))
def test_metrics_match_oracle(counts):
    cm = np.array(counts).reshape(3, 3)
    cm[np.diag_indices(3)] += 1  # every class present and predicted
    assert compute_uar(cm) == pytest.approx(confusion_uar(cm), abs=1e-12)
    assert compute_uf1(cm) == pytest.approx(float(np.mean(confusion_f1s(cm))), abs=1e-12)


# -- toy data -----------------------------------------------------------------

def toy_dataset(n_subjects=4, per_subject=3, r=20, seed=0, separation=2.0):
    """Linearly separable: each class shifts a different channel."""
    rng = np.random.default_rng(seed)
    xs, ys, subj, dom, ids = [], [], [], [], []
    for s in range(n_subjects):
        for k in range(per_subject):
            c = (s * per_subject + k) % 3
            x = rng.normal(0, 0.3, (3, r, r))
            x[c] += separation
            xs.append(x)
            ys.append(c)
            subj.append(f"p{s}")
            dom.append("even" if s % 2 == 0 else "odd")
            ids.append(f"p{s}_{k}")
    return FlowDataset(np.asarray(xs, dtype=np.float32), np.asarray(ys), np.asarray(subj), np.asarray(dom),
                       np.asarray(ids))


FAST = TrainConfig(lr=0.01, batch_size=4, max_epochs=3, loss_stop=0.0, dropout=0.0)


def tiny(kind="rcn", r=20):
    return named_descriptor(kind, 4, 3, 3, r)


# -- training -----------------------------------------------------------------

def test_loss_stop_infinite_runs_max_epochs():
    _, log = train_single(toy_dataset(2), tiny(), FAST.with_(max_epochs=4, loss_stop=math.inf))
    assert log.epochs == 1
    _, log = train_single(toy_dataset(2), tiny(), FAST.with_(max_epochs=4, loss_stop=-math.inf))
    assert log.epochs == 4


def test_separable_toy_reaches_loss_stop():
    data = toy_dataset(4, 6, seed=1)
    _, log = train_single(data, tiny(), TrainConfig(lr=0.01, batch_size=8, dropout=0.0))
    assert log.stopped_early and log.epochs < 500
    assert log.epoch_losses[-1] < 0.5


def test_train_config_roundtrip():
    cfg = TrainConfig(loss_stop=math.inf, seed=7)
    d = json.loads(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_dict(d) == cfg
    with pytest.raises(ValueError):
        TrainConfig(loss="hinge")
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=0)


def test_train_stores_channel_stats():
    data = toy_dataset(2)
    model, _ = train_single(data, tiny(), FAST.with_(max_epochs=1))
    np.testing.assert_allclose(model.norm_mean, data.x.mean(axis=(0, 2, 3)), rtol=1e-5)


def test_empty_split_rejected():
    with pytest.raises(ValueError):
        train_single(toy_dataset(2).take([]), tiny(), FAST)


def test_training_deterministic_checkpoints():
    data = toy_dataset(3)
    a, _ = train_single(data, tiny("rcn-a"), FAST.with_(dropout=0.5, seed=3))
    b, _ = train_single(data, tiny("rcn-a"), FAST.with_(dropout=0.5, seed=3))
    c, _ = train_single(data, tiny("rcn-a"), FAST.with_(dropout=0.5, seed=4))
    assert checkpoint_bytes(a, FAST.to_dict()) == checkpoint_bytes(b, FAST.to_dict())
    assert checkpoint_bytes(a, FAST.to_dict()) != checkpoint_bytes(c, FAST.to_dict())


# -- checkpoints --------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    data = toy_dataset(3)
    model, _ = train_single(data, tiny("rcn-w"), FAST)
    return data, model


def test_checkpoint_roundtrip(tmp_path, trained):
    data, model = trained
    save_checkpoint(model, tmp_path / "m.rcnm", FAST.to_dict())
    back, cfg = load_checkpoint(tmp_path / "m.rcnm")
    assert cfg == FAST.to_dict()
    assert back.descriptor == model.descriptor
    np.testing.assert_array_equal(predict(back, data.x), predict(model, data.x))
    assert checkpoint_bytes(back, cfg) == checkpoint_bytes(model, FAST.to_dict())


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:],
    lambda b: b[:-3],
    lambda b: b + b"\0",
])
def test_checkpoint_corrupt(tmp_path, trained, mutate):
    _, model = trained
    p = tmp_path / "m.rcnm"
    p.write_bytes(mutate(checkpoint_bytes(model)))
    with pytest.raises(DataError):
        load_checkpoint(p)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "nope.rcnm")


# -- LOSO ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def loso_report():
    data = toy_dataset(4)
    return data, run_loso(data, tiny(), FAST)


def test_loso_bookkeeping(loso_report):
    data, rep = loso_report
    assert [f.subject for f in rep.folds] == ["p0", "p1", "p2", "p3"]
    np.testing.assert_array_equal(sum(f.confusion for f in rep.folds), rep.confusion)
    assert rep.confusion.sum() == len(data)
    assert all(f.n_train + f.n_test == len(data) for f in rep.folds)
    assert set(rep.per_domain) == {"even", "odd"}
    assert sum(np.sum(d["confusion"]) for d in rep.per_domain.values()) == len(data)


def test_loso_report_recomputable(tmp_path, loso_report):
    _, rep = loso_report
    rep.write_jsonl(tmp_path / "r.jsonl")
    parsed = read_report(tmp_path / "r.jsonl")
    s = parsed["summary"]
    assert abs(compute_uar(s["confusion"], allow_empty=True) - s["uar"]) <= 1e-12
    assert abs(compute_uf1(s["confusion"]) - s["uf1"]) <= 1e-12
    assert s["descriptor"] == tiny().to_string()
    assert TrainConfig.from_dict(s["train_config"]) == FAST
    assert len(parsed["folds"]) == 4


def test_read_report_rejects_other_files(tmp_path):
    (tmp_path / "x.jsonl").write_text('{"type": "fold"}\n')
    with pytest.raises(ValueError):
        read_report(tmp_path / "x.jsonl")


def test_loso_constant_predictor(monkeypatch):
    data = toy_dataset(6, 1)
    monkeypatch.setattr("rcnmer.evaluation.loso.predict", lambda model, x: np.zeros(len(x), dtype=int))
    rep = run_loso(data, tiny(), FAST.with_(max_epochs=1))
    assert np.count_nonzero(rep.confusion.sum(axis=0)) == 1
    assert rep.uar == pytest.approx(1 / 3)


def test_loso_missing_class_warns():
    data = toy_dataset(3, 1)  # every class lives in exactly one subject
    with pytest.warns(RuntimeWarning, match="no training samples"):
        run_loso(data, tiny(), FAST.with_(max_epochs=1))


def test_loso_needs_two_subjects():
    with pytest.raises(ValueError):
        run_loso(toy_dataset(1), tiny(), FAST)
    with pytest.raises(ValueError):
        run_loso(toy_dataset(2), tiny(r=40), FAST)


def test_loso_fold_seeds_follow_index(loso_report):
    data, rep = loso_report
    model, _, _, test = train_fold(data, tiny(), FAST, 2, "p2")
    np.testing.assert_array_equal(predict(model, test.x), rep.folds[2].predictions)


def test_loso_leakage_perturbation():
    data = toy_dataset(4)
    held = data.subjects == "p1"
    noisy = FlowDataset(data.x.copy(), data.y.copy(), data.subjects, data.domains, data.sample_ids)
    noisy.x[held] = np.random.default_rng(9).normal(size=noisy.x[held].shape) * 50
    noisy.y[held] = (noisy.y[held] + 1) % 3
    a, *_ = train_fold(data, tiny(), FAST, 1, "p1")
    b, *_ = train_fold(noisy, tiny(), FAST, 1, "p1")
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_loso_parallel_matches_sequential(loso_report):
    data, rep = loso_report
    par = run_loso(data, tiny(), FAST, workers=2)
    assert par.records(timings=False) == rep.records(timings=False)


def test_loso_rerun_bit_identical(tmp_path, loso_report):
    data, rep = loso_report
    rep.write_jsonl(tmp_path / "a.jsonl", timings=False)
    run_loso(data, tiny(), FAST).write_jsonl(tmp_path / "b.jsonl", timings=False)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


# -- sweep --------------------------------------------------------------------

def test_model1_shape_at_20():
    model = RcnModel(named_descriptor("model1", 16, 5, 3, 20))
    res = model(np.zeros((1, 3, 20, 20), dtype=np.float32))
    assert res.taps["conv1"].shape == (1, 16, 7, 7)
    assert res.taps["pooled"].shape == (1, 16, 5, 5)


def test_sweep_rows_and_csv(tmp_path):
    sets = {r: toy_dataset(3, 2, r=r) for r in (20, 40)}
    seen = []
    rows = complexity_sweep(sets.__getitem__, ("model1", "model2"), (20, 40), (0, 1),
                            FAST.with_(max_epochs=1), feature_maps=4, pool_size=3, progress=seen.append)
    assert len(rows) == 2 * 2 * 2 == len(seen)
    write_csv(rows, tmp_path / "sweep.csv")
    with open(tmp_path / "sweep.csv", newline="") as fh:
        back = list(csv.DictReader(fh))
    assert list(back[0]) == ["model", "resolution", "seed", "uar", "uf1", "descriptor"]
    assert {(r["model"], r["resolution"], r["seed"]) for r in back} == {
        (m, str(r), str(s)) for m in ("model1", "model2") for r in (20, 40) for s in (0, 1)}
    summary = sweep_summary(rows)
    assert len(summary) == 4 and all(s["seeds"] == 2 for s in summary)


# -- CAM ----------------------------------------------------------------------

def test_uniform_cam_is_flat_gray():
    feats = Tensor(np.ones((1, 4, 6, 6)))
    raw = class_weight_map(feats, np.ones((3, 4 * 3 * 3)), 3, np.array([1]))
    img = to_uint8(raw.data[0, 0])
    assert np.all(img == 128)


@given(st.integers(0, 2**32 - 1))
def test_to_uint8_spans_full_range(seed):
    m = np.random.default_rng(seed).normal(size=(5, 7))
    img = to_uint8(m)
    assert img.min() == 0 and img.max() == 255


def test_export_cam_writes_p5(tmp_path, trained):
    data, model = trained
    img = export_cam(model, data.x[0], tmp_path / "cam.pgm")
    raw, maxval = read_pgm_raw(tmp_path / "cam.pgm")
    assert maxval == 255 and raw.shape == (20, 20)
    np.testing.assert_array_equal(raw, img)


def test_cam_uses_predicted_class(trained):
    data, model = trained
    maps, pred = cam_map(model, data.x[:3])
    assert maps.shape == (3, 20, 20)
    np.testing.assert_array_equal(pred, predict(model, data.x[:3]))


def test_top_decile_inside():
    cam = np.zeros((10, 10))
    cam[:2] = 1.0  # top 10 % = first 10 pixels in stable order
    mask = np.zeros((10, 10), dtype=bool)
    mask[0] = True
    assert top_decile_inside(cam, mask) == 1.0
    assert top_decile_inside(cam, ~mask) == 0.0
