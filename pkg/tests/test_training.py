import csv

import numpy as np
import pytest

from multilight.field import GEOMETRY_PREFIXES, FieldConfig, FieldModel, load_checkpoint
from multilight.pseudo import generate_pseudo_labels
from multilight.scene import reference_scene
from multilight.training import (CURVE_COLUMNS, HEAD_PREFIXES, AdamState, LossWeights, TrainConfig, adamw_step,
                                 fd_gradient_laplacian, label_arrays, load_ray_data, loss_stage1, loss_stage2,
                                 stage1_step, stage2_step, train_stage1, train_stage2)

TINY = dict(levels=2, table_size_log2=10, geo_hidden=(16, 16), head_hidden=(16, 16), feat_dim=8, bound=1.2)


def _radial_points(rng, n=200):
    x = rng.normal(size=(n, 3))
    return x / np.linalg.norm(x, axis=1, keepdims=True) * rng.uniform(0.5, 2.0, (n, 1))


# ---------------------------------------------------------------- stage 1 loss


def test_distance_function_eikonal_and_curvature(rng):
    x = _radial_points(rng)
    grad, lap, stencil = fd_gradient_laplacian(lambda p: np.linalg.norm(p, axis=1), x, 1e-2)
    assert stencil.shape == (7 * len(x), 3)
    r = np.linalg.norm(x, axis=1)
    # central differences carry an O(h^2 / r^2) truncation error
    assert np.all(np.abs(np.linalg.norm(grad, axis=1) - 1) < (1e-2 / r) ** 2)
    assert np.all(np.abs(lap * r / 2 - 1) < (1e-2 / r) ** 2)
    rgb = rng.random((10, 3))
    res = loss_stage1(rgb, rgb, grad, lap, LossWeights())
    assert res.terms["rgb"] == 0
    assert res.terms["eik"] < 1e-9
    # perfect prediction + unit gradient: only the curvature term is left
    assert res.total == pytest.approx(5e-4 * np.mean(2 / r), rel=1e-3)


def test_stage1_weights_are_linear(rng):
    pred, gt = rng.random((8, 3)), rng.random((8, 3))
    g = rng.normal(size=(5, 3))
    lap = rng.normal(size=5)
    a = loss_stage1(pred, gt, g, lap, LossWeights())
    b = loss_stage1(pred, gt, g, lap, LossWeights(w_eik=0.2))
    assert b.terms["eik"] == pytest.approx(2 * a.terms["eik"], rel=1e-12)
    for k in ("rgb", "curv"):
        assert b.terms[k] == a.terms[k]
    assert a.total == pytest.approx(sum(a.terms.values()), abs=1e-9)
    assert all(v >= 0 for v in a.terms.values())


def test_stage1_loss_gradients(rng):
    pred, gt = rng.random((6, 3)), rng.random((6, 3))
    g = rng.normal(size=(4, 3))
    lap = rng.normal(size=4)
    res = loss_stage1(pred, gt, g, lap)
    h = 1e-7
    for name, arr in (("rgb", pred), ("fd_grad", g), ("laplacian", lap)):
        for i in range(arr.size):
            e = np.zeros(arr.size)
            e[i] = h
            e = e.reshape(arr.shape)
            args = {"rgb": pred, "fd_grad": g, "laplacian": lap}
            up = dict(args, **{name: arr + e})
            dn = dict(args, **{name: arr - e})
            fd = (loss_stage1(up["rgb"], gt, up["fd_grad"], up["laplacian"]).total
                  - loss_stage1(dn["rgb"], gt, dn["fd_grad"], dn["laplacian"]).total) / (2 * h)
            assert res.grads[name].reshape(-1)[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_nan_term_names_itself(rng):
    g = rng.normal(size=(4, 3))
    g[1, 0] = np.nan
    with pytest.raises(FloatingPointError, match="eik"):
        loss_stage1(rng.random((2, 3)), rng.random((2, 3)), g, np.zeros(4))
    pred = _stage2_batch(rng)
    pred["shading"][0] = np.nan
    with pytest.raises(FloatingPointError, match="intrinsic_S"):
        loss_stage2(pred, pred["rgb"], {"reflectance": pred["reflectance"], "shading": np.zeros((5, 1))},
                    {"w_r": np.ones(5), "w_s": np.ones(5)})


# ---------------------------------------------------------------- stage 2 loss


def _stage2_batch(rng, b=5):
    rgb = rng.random((b, 3))
    r = rng.random((b, 3))
    s = rng.random((b, 1))
    return {"rgb": rgb, "reflectance": r, "shading": s, "residual": rgb - r * s}


def test_stage2_examples(rng):
    p = _stage2_batch(rng)
    exact = {"rgb": p["rgb"], "reflectance": p["reflectance"], "shading": p["shading"],
             "residual": np.zeros((5, 3))}
    res = loss_stage2(exact, p["rgb"], {"reflectance": p["reflectance"], "shading": p["shading"]},
                      {"w_r": np.ones(5), "w_s": np.ones(5)})
    assert res.total == 0.0
    res = loss_stage2(p, p["rgb"], {"reflectance": 1 - p["reflectance"], "shading": p["shading"]},
                      {"w_r": np.zeros(5), "w_s": np.ones(5)})
    assert res.terms["intrinsic_R"] == 0.0
    const = dict(p, residual=np.full((5, 3), 0.1))
    res = loss_stage2(const, p["rgb"], {"reflectance": p["reflectance"], "shading": p["shading"]},
                      {"w_r": np.ones(5), "w_s": np.ones(5)}, LossWeights(w_reg=0.7))
    assert res.terms["reg"] == pytest.approx(0.1 * 0.7)


def test_stage2_shape_mismatch(rng):
    p = _stage2_batch(rng)
    with pytest.raises(ValueError):
        loss_stage2(p, p["rgb"][:4], {"reflectance": p["reflectance"], "shading": p["shading"]},
                    {"w_r": np.ones(5), "w_s": np.ones(5)})
    with pytest.raises(ValueError):
        loss_stage2(p, p["rgb"], {"reflectance": p["reflectance"], "shading": p["shading"]},
                    {"w_r": np.ones(4), "w_s": np.ones(5)})


def test_stage2_gradients_fold_in_residual(rng):
    p = _stage2_batch(rng)
    gt = rng.random((5, 3))
    lab = {"reflectance": rng.random((5, 3)), "shading": rng.random((5, 1))}
    wm = {"w_r": rng.random(5), "w_s": rng.random(5)}

    def total(rgb, r, s):
        return loss_stage2({"rgb": rgb, "reflectance": r, "shading": s, "residual": rgb - r * s}, gt, lab, wm).total

    res = loss_stage2(p, gt, lab, wm)
    assert res.total == pytest.approx(sum(res.terms.values()), abs=1e-9)
    h = 1e-7
    for name in ("rgb", "reflectance", "shading"):
        for i in range(p[name].size):
            args = [p["rgb"].copy(), p["reflectance"].copy(), p["shading"].copy()]
            j = ("rgb", "reflectance", "shading").index(name)
            args[j].reshape(-1)[i] += h
            up = total(*args)
            args[j].reshape(-1)[i] -= 2 * h
            dn = total(*args)
            assert res.grads[name].reshape(-1)[i] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-8)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(w_reg=-1.0)


def test_defaults():
    w = LossWeights()
    assert (w.w_rgb, w.w_eik, w.w_curv, w.w_intrinsic, w.w_reg) == (1.0, 0.1, 5e-4, 1.0, 1.0)
    c = TrainConfig()
    assert (c.batch_size, c.lr, c.weight_decay, c.betas, c.eps) == (2048, 1e-3, 1e-2, (0.9, 0.999), 1e-8)
    assert TrainConfig(stage=2, freeze_geometry=False).freeze_geometry


# ---------------------------------------------------------------- AdamW


def test_adamw_examples():
    p = {"a": np.array([1.0, -2.0])}
    st = AdamState()
    assert adamw_step(p, {"a": np.zeros(2)}, st, weight_decay=0.0)
    np.testing.assert_array_equal(p["a"], [1.0, -2.0])
    p = {"a": np.array(1.0)}
    adamw_step(p, {"a": np.array(1.0)}, AdamState(), lr=1e-3, weight_decay=0.0)
    assert float(p["a"]) == pytest.approx(1 - 1e-3, abs=1e-9)
    p = {"a": np.array(3.0)}
    adamw_step(p, {"a": np.array(0.0)}, AdamState(), lr=1e-3, weight_decay=1e-2)
    assert float(p["a"]) == pytest.approx(3.0 * (1 - 1e-5), abs=1e-15)


def test_adamw_matches_reference_sequence(rng):
    # textbook AdamW written out for a few steps
    p0 = rng.normal(size=4)
    gs = rng.normal(size=(5, 4))
    lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 1e-8, 0.1
    ref, m, v = p0.copy(), np.zeros(4), np.zeros(4)
    for t, g in enumerate(gs, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * wd * ref
        ref = ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    p = {"x": p0.copy()}
    st = AdamState()
    for g in gs:
        adamw_step(p, {"x": g}, st, lr, (b1, b2), eps, wd)
    np.testing.assert_allclose(p["x"], ref, rtol=1e-12)
    assert st.step == 5


def test_adamw_skips_non_finite():
    p = {"a": np.ones(3), "b": np.ones(2)}
    st = AdamState()
    assert not adamw_step(p, {"a": np.array([0.1, np.inf, 0.0]), "b": np.ones(2)}, st)
    assert st.skipped == 1 and st.step == 0
    np.testing.assert_array_equal(p["a"], 1.0)
    np.testing.assert_array_equal(p["b"], 1.0)


def test_adamw_state_shape_checked():
    st = AdamState()
    adamw_step({"a": np.ones(3)}, {"a": np.ones(3)}, st)
    with pytest.raises(ValueError):
        adamw_step({"a": np.ones(4)}, {"a": np.ones(4)}, st)


# ---------------------------------------------------------------- steps


def _rays(rng, n, spread=0.2):
    o = np.tile([0.0, 0.0, 3.0], (n, 1))
    d = rng.normal(size=(n, 3)) * spread + [0, 0, -1]
    return o, d / np.linalg.norm(d, axis=1, keepdims=True)


def _fd_check(m, f, grads, keys, rng, h=1e-6, per_key=3):
    for k in keys:
        flat = m.params[k].reshape(-1)
        nz = np.flatnonzero(grads[k])
        assert nz.size, k
        for i in rng.choice(nz, min(per_key, nz.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            a = f()
            flat[i] = old - h
            b = f()
            flat[i] = old
            assert grads[k].reshape(-1)[i] == pytest.approx((a - b) / (2 * h), rel=1e-4, abs=1e-9), k


def test_stage1_step_gradient(rng):
    m = FieldModel(FieldConfig(**TINY, dtype="float64", seed=2))
    m.params["hash.table"][...] = rng.normal(0, 1e-2, m.params["hash.table"].shape)
    m.params["geo.w0"][3:] = rng.normal(0, 0.1, m.params["geo.w0"][3:].shape)
    m.params["color.w0"][3:6] = 0.0  # detached normals: take them out of the comparison
    o, d = _rays(rng, 6)
    gt = rng.random((6, 3))
    codes = np.tile(m.light_code([1.0, 1.0, 3.0]), (6, 1))
    # importance and near-surface samples follow the sdf, so parameter nudges would move them
    cfg = TrainConfig(n_samples=24, n_importance=0, eik_points_per_ray=2, eik_surface_points_per_ray=0)

    def f():
        return stage1_step(m, o, d, gt, codes, cfg, LossWeights(w_eik=1.0, w_curv=0.01), np.random.default_rng(5))[0].total

    loss, grads = stage1_step(m, o, d, gt, codes, cfg, LossWeights(w_eik=1.0, w_curv=0.01), np.random.default_rng(5))
    assert loss.terms["eik"] > 0 and loss.terms["curv"] > 0
    _fd_check(m, f, grads, ["geo.w0", "geo.b1", "geo.w2", "hash.table", "color.w1", "log_inv_std"], rng)
    for k in ("refl.w0", "shade.w0"):
        assert not grads[k].any()


@pytest.mark.parametrize("seed", range(4))
def test_stage2_step_one_ray_gradient(sphere_field, seed):
    m = sphere_field.copy()
    rng = np.random.default_rng(seed)
    o, d = _rays(rng, 1, spread=0.05)  # through the sphere
    gt = rng.random((1, 3))
    codes = m.light_code([1.0, 2.0, 3.0])[None]
    lab = {"reflectance": rng.random((1, 3)), "shading": rng.random((1, 1)), "w_r": rng.random(1),
           "w_s": rng.random(1)}
    cfg = TrainConfig(stage=2, batch_size=1, n_samples=32, n_importance=32)

    def f():
        return stage2_step(m, o, d, gt, codes, lab, cfg, LossWeights(), np.random.default_rng(1))[0].total

    _, grads = stage2_step(m, o, d, gt, codes, lab, cfg, LossWeights(), np.random.default_rng(1))
    _fd_check(m, f, grads, ["color.w0", "color.b1", "refl.w1", "refl.b0", "shade.w0", "shade.w2"], rng)
    for k in grads:
        if k.startswith(GEOMETRY_PREFIXES):
            assert not grads[k].any()


# ---------------------------------------------------------------- loops


@pytest.fixture
def tiny_model():
    return FieldModel(FieldConfig(**TINY, seed=3))


def test_zero_iterations_keeps_init(tiny_dataset, tiny_model, tmp_path):
    data = load_ray_data(tiny_dataset)
    init = tiny_model.copy()
    _, rows, _ = train_stage1(data, tiny_model, TrainConfig(iterations=0, batch_size=8), checkpoint_path=tmp_path / "c")
    assert rows == []
    back, extra = load_checkpoint(tmp_path / "c")
    assert extra["stage"] == 1
    for k, v in init.params.items():
        np.testing.assert_array_equal(back.params[k], v.astype(np.float32))


def test_stage1_curves_deterministic(tiny_dataset, tmp_path):
    data = load_ray_data(tiny_dataset)
    cfg = TrainConfig(iterations=3, batch_size=32, n_samples=8, n_importance=8, seed=11)
    outs = []
    for run in ("a", "b"):
        m = FieldModel(FieldConfig(**TINY, seed=3))
        _, rows, st = train_stage1(data, m, cfg, curve_path=tmp_path / f"{run}.csv",
                                   checkpoint_path=tmp_path / f"{run}.mlif")
        outs.append(rows)
        assert st.skipped == 0
    assert outs[0] == outs[1]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.mlif").read_bytes() == (tmp_path / "b.mlif").read_bytes()
    with open(tmp_path / "a.csv") as fh:
        table = list(csv.reader(fh))
    assert tuple(table[0]) == CURVE_COLUMNS
    assert len(table) == 4
    for row in table[1:]:
        vals = [float(x) for x in row]
        assert vals[1] == pytest.approx(sum(vals[2:]), abs=1e-9)


def test_stage1_trains_geometry_and_color_only(tiny_dataset, tiny_model):
    data = load_ray_data(tiny_dataset)
    before = tiny_model.copy()
    train_stage1(data, tiny_model, TrainConfig(iterations=2, batch_size=16, n_samples=8, n_importance=8))
    for k, v in before.params.items():
        moved = not np.array_equal(v, tiny_model.params[k])
        assert moved == k.startswith(GEOMETRY_PREFIXES + ("color.",)), k


@pytest.fixture(scope="module")
def oracle_labels(tiny_dataset):
    return generate_pseudo_labels(reference_scene(), tiny_dataset, policy="dataset")


def test_stage2_freezes_geometry(tiny_dataset, tiny_model, oracle_labels, tmp_path):
    data = load_ray_data(tiny_dataset)
    labels = label_arrays(data, oracle_labels)
    before = tiny_model.copy()
    cfg = TrainConfig(stage=2, iterations=3, batch_size=32, n_samples=8, n_importance=8)
    _, rows, _ = train_stage2(data, labels, tiny_model, cfg, curve_path=tmp_path / "s2.csv",
                              checkpoint_path=tmp_path / "s2.mlif")
    assert len(rows) == 3
    for k, v in before.params.items():
        if k.startswith(GEOMETRY_PREFIXES):
            assert np.array_equal(v, tiny_model.params[k]), k
        else:
            assert k.startswith(HEAD_PREFIXES)
            assert not np.array_equal(v, tiny_model.params[k]), k
    assert load_checkpoint(tmp_path / "s2.mlif")[1]["stage"] == 2
    assert all(r[2] > 0 and r[5] >= 0 and r[6] >= 0 and r[7] >= 0 and r[3] == 0 for r in rows)


def test_missing_labels_listed(tiny_dataset, oracle_labels):
    data = load_ray_data(tiny_dataset)
    partial = dict(oracle_labels)
    del partial[1]
    with pytest.raises(ValueError) as e:
        label_arrays(data, partial)
    missing = [f["index"] for f in tiny_dataset.frames_in("train") if f["camera_index"] == 1]
    assert str(missing) in str(e.value)


def test_ray_data_layout(tiny_dataset):
    data = load_ray_data(tiny_dataset)
    assert data.rgb.shape == (6, 256, 3)
    assert list(data.camera_index) == [0, 0, 1, 1, 2, 2]
    np.testing.assert_allclose(np.linalg.norm(data.dirs, axis=-1), 1.0)
    with pytest.raises(ValueError):
        load_ray_data(tiny_dataset, "val")
