import numpy as np
import pytest

from msgl.data_io import make_partition, standardize
from msgl.errors import ConfigError, ValidationError
from msgl.pipeline import (TrainConfig, batch_windows, build_d_mapping, fine_prediction, predict,
                           remap_coarse_to_fine, replicate_grid, stack_windows, train,
                           train_async_msgl, train_csl_standalone, train_msgl, windows)
from msgl.stream_graph import CrossScaleMap
from msgl.synth import BasinSpec, generate_basin


@pytest.fixture(scope="module")
def basin():
    ds, truth = generate_basin(BasinSpec(n_coarse=3, subdivision=2, days=90, seed=4))
    part = make_partition(ds.T)
    ds, _ = standardize(ds, part)
    return ds, truth, part


def cfg(**kw):
    base = dict(hidden=4, epochs=3, decay_epochs=(), patience=3, window=15, batch_windows=2,
                lr=0.01, pretrain_epochs=2, csl_epochs=2, model_seeds=(1,), mask_seeds=(42,))
    return TrainConfig(**{**base, **kw})


def same_state(a, b):
    sa, sb = a.state(), b.state()
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_lr_schedule():
    c = TrainConfig()
    assert c.lr_at(40) == 0.005
    assert c.lr_at(41) == pytest.approx(0.0035)
    assert c.lr_at(51) == pytest.approx(0.005 * 0.49)


@pytest.mark.parametrize("bad", [dict(decay_epochs=(60,)), dict(patience=61), dict(window=1),
                                 dict(mode="nope"), dict(optimizer="adam"), dict(fine_fraction=0.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_roundtrip(tmp_path):
    c = cfg(mode="no-crsl")
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"hiden": 3})


def test_windows_and_batches():
    assert windows(10, 4) == [(0, 4), (4, 8), (8, 10)]
    spans = windows(20, 4)
    b = batch_windows(spans, 2)
    assert b == [[(0, 4), (4, 8)], [(8, 12), (12, 16)], [(16, 20)]]
    shuffled = batch_windows(spans, 2, np.random.default_rng(0))
    assert sorted(s for g in shuffled for s in g) == spans
    arr = np.arange(20 * 3).reshape(20, 3)
    np.testing.assert_array_equal(stack_windows(arr, [(0, 2), (4, 6)]),
                                  np.concatenate([arr[0:2], arr[4:6]], axis=1))


def test_remap_coarse_to_fine():
    cm = CrossScaleMap(["f1", "f2", "f3"], ["A", "B"], np.full((3, 2), 0.5),
                       {"f1": "B", "f2": "A", "f3": "B"})
    Yc = np.array([[10.0, 12.5], [11.0, 13.0]])
    out = remap_coarse_to_fine(Yc, cm)
    assert out[0, 0] == 12.5
    np.testing.assert_array_equal(out[:, 0], out[:, 2])
    ref = np.empty((2, 3))
    for t in range(2):
        for i, f in enumerate(cm.fine_ids):
            ref[t, i] = Yc[t, cm.coarse_ids.index(cm.coincidence[f])]
    np.testing.assert_array_equal(out, ref)
    with pytest.raises(ValidationError):
        remap_coarse_to_fine(Yc, CrossScaleMap(["f1"], ["A", "B"], np.ones((1, 2)) / 2, {}))


def test_zero_lr_one_epoch_is_identity(basin):
    ds, _, part = basin
    from msgl.model import MSGLModel

    c = cfg(epochs=1, patience=1, lr=0.0)
    m0 = MSGLModel(c.model_config(7, 1))
    m, hist = train_msgl(ds, c, part, model=m0)
    assert len(hist.val_rmse) == 1 and len(hist.losses) == 1
    for k in m.params:
        np.testing.assert_array_equal(m.get(k), m0.get(k))


def test_training_is_deterministic_and_records_simplex(basin):
    ds, _, part = basin
    m1, h1 = train_msgl(ds, cfg(shuffle_windows=True), part, seed=3)
    m2, h2 = train_msgl(ds, cfg(shuffle_windows=True), part, seed=3)
    assert same_state(m1, m2) and h1.val_rmse == h2.val_rmse
    for a in h1.alpha:
        w = np.array(list(a.values()))
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-10
    assert h1.best_val <= h1.val_rmse[0]


def test_plain_optimizer_runs(basin):
    ds, _, part = basin
    _, h = train_msgl(ds, cfg(optimizer="plain"), part)
    assert all(set(a.values()) == {1 / 3} for a in h.alpha)


def test_no_fine_labels_is_config_error(basin):
    ds, _, part = basin
    empty = ds.with_labels(mask_f=np.zeros_like(ds.mask_f))
    with pytest.raises(ConfigError):
        train_msgl(empty, cfg(), part)
    with pytest.raises(ConfigError):
        train_csl_standalone(ds.with_labels(mask_c=np.zeros_like(ds.mask_c)), cfg(), part)


def test_csl_standalone_is_csl_mode(basin):
    ds, _, part = basin
    a, ha = train_csl_standalone(ds, cfg(), part, seed=2)
    b, hb = train_msgl(ds, cfg(), part, mode="csl", seed=2)
    assert same_state(a, b) and ha.val_rmse == hb.val_rmse
    pred = predict(a, ds, "csl", 15)["c"]
    assert pred.shape == (ds.T, ds.coarse.n) and np.all(np.isfinite(pred))


def test_d_mapping_is_dense_over_pretrain_range(basin):
    ds, _, part = basin
    m, _ = train_csl_standalone(ds, cfg(), part)
    mapped = build_d_mapping(ds, m, part, 15)
    a, b = part.pretrain_range()
    assert mapped.mask_c[a:b].all() and mapped.mask_f[a:b].all()
    assert not mapped.mask_f[b:].any()
    np.testing.assert_array_equal(mapped.Y_f[a:b], remap_coarse_to_fine(mapped.Y_c, ds.cross)[a:b])


def test_async_without_pretraining_equals_msgl(basin):
    ds, _, part = basin
    a, _ = train_async_msgl(ds, cfg(pretrain_epochs=0), part, seed=5)
    b, _ = train_msgl(ds, cfg(), part, seed=5)
    assert same_state(a, b)


def test_async_runs_all_stages(basin):
    ds, _, part = basin
    m, h = train(ds, cfg(mode="async"), part)
    assert set(h.stages) == {"csl", "pretrain", "finetune"}


@pytest.mark.parametrize("mode", ["fsl", "crsl", "no-csl", "no-crsl"])
def test_ablation_modes_predict_fine(basin, mode):
    ds, _, part = basin
    m, _ = train(ds, cfg(epochs=1, patience=1), part, mode=mode)
    y = fine_prediction(predict(m, ds, mode, 15), ds.cross)
    assert y.shape == (ds.T, ds.fine.n)


def test_replicate_grid_sparsifies(basin):
    ds, _, part = basin
    reps = list(replicate_grid(ds, part, cfg(fine_fraction=0.1, epochs=1, patience=1), "fsl"))
    assert [r.tag for r in reps] == ["ms1_ks42"]
    assert reps[0].fine_pred.shape == (ds.T, ds.fine.n)
