import inspect
import struct

import numpy as np
import pytest

from multilight.field import (MAGIC, FieldConfig, FieldModel, HashGridEncoding, Mlp, color_forward, encode_spherical,
                              geometry_forward, load_checkpoint, reflectance_forward, save_checkpoint, shading_forward)

SMALL = dict(levels=4, table_size_log2=12, geo_hidden=(32, 32), head_hidden=(16, 16))


def _unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ---------------------------------------------------------------- hash grid


def test_zero_table_gives_zero_features(rng):
    g = HashGridEncoding(levels=4, table_size_log2=10)
    feats, _ = g.forward(np.zeros(g.table_shape()), rng.uniform(-1, 1, (100, 3)))
    assert feats.shape == (100, g.output_dim) == (100, 8)
    np.testing.assert_array_equal(feats, 0.0)


def test_vertex_query_returns_its_row(rng):
    g = HashGridEncoding(levels=3, table_size_log2=10, base_resolution=4, growth=2.0)
    table = rng.normal(size=g.table_shape())
    # x = 0 maps to u = 0.5, a vertex on every level with an even resolution
    x = np.zeros((1, 3))
    feats, _ = g.forward(table, x)
    levels, _ = g.locate(x)
    for l, (idx, w, _) in enumerate(levels):
        k = np.argmax(w[0])
        assert w[0, k] == 1.0
        np.testing.assert_array_equal(feats[0, 2 * l:2 * l + 2], table[l, idx[0, k]])


def test_interpolation_weights_sum_to_one(rng):
    g = HashGridEncoding()
    levels, _ = g.locate(rng.uniform(-1, 1, (1000, 3)))
    for _, w, _ in levels:
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(w >= 0)


def test_table_gradient_matches_fd(rng):
    g = HashGridEncoding(levels=3, table_size_log2=8)  # small table: the finest level hashes
    assert not all(g.dense)
    table = rng.normal(size=g.table_shape())
    x = rng.uniform(-1, 1, (5, 3))
    up = rng.normal(size=(5, g.output_dim))
    _, cache = g.forward(table, x)
    grad = np.zeros_like(table)
    g.backward_table(cache, up, grad)
    h = 1e-6
    touched = np.argwhere(grad != 0)
    for l, i, f in touched[rng.choice(len(touched), 20, replace=False)]:
        t = table.copy()
        t[l, i, f] += h
        a = (g.forward(t, x)[0] * up).sum()
        t[l, i, f] -= 2 * h
        b = (g.forward(t, x)[0] * up).sum()
        assert abs((a - b) / (2 * h) - grad[l, i, f]) < 1e-5


def test_x_gradient_matches_fd(rng):
    g = HashGridEncoding(levels=3, table_size_log2=10)
    table = rng.normal(size=g.table_shape())
    x = rng.uniform(-0.9, 0.9, (20, 3))
    up = rng.normal(size=(20, g.output_dim))
    _, cache = g.forward(table, x)
    an = g.backward_x(table, cache, up)
    h = 1e-7
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        fd = ((g.forward(table, x + e)[0] - g.forward(table, x - e)[0]) * up).sum(axis=1) / (2 * h)
        np.testing.assert_allclose(an[:, a], fd, rtol=1e-5, atol=1e-6)


def test_outside_queries_are_clamped():
    g = HashGridEncoding(levels=2, table_size_log2=10)
    table = np.random.default_rng(0).normal(size=g.table_shape())
    a, _ = g.forward(table, np.array([[5.0, 0.2, -0.3]]))
    b, _ = g.forward(table, np.array([[1.0, 0.2, -0.3]]))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- spherical encoding


def test_spherical_encoding_basics(rng):
    for u in _unit(rng, 20):
        e = encode_spherical(3.0 * u)
        assert e.shape == (26,)
        assert e[0] == pytest.approx(0.2821, abs=1e-4)
        assert e[-1] == pytest.approx(np.log(3.0))


def test_spherical_parity(rng):
    u = _unit(rng, 50)
    a = encode_spherical(u)[:, :25]
    b = encode_spherical(-u)[:, :25]
    degree = np.repeat(np.arange(5), [1, 3, 5, 7, 9])
    sign = np.where(degree % 2 == 1, -1.0, 1.0)
    np.testing.assert_allclose(b, a * sign, atol=1e-12)


def test_spherical_orthonormal():
    # Fibonacci sphere quadrature; orthonormal SH integrate to the identity
    n = 20000
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5**0.5) * i
    r = np.sqrt(1 - z * z)
    u = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    y = encode_spherical(u)[:, :25]
    gram = 4 * np.pi * (y.T @ y) / n
    np.testing.assert_allclose(gram, np.eye(25), atol=2e-3)


def test_spherical_centre_and_zero_length():
    a = encode_spherical([1.0, 2.0, 3.0], scene_center=(1.0, 2.0, 2.0))
    np.testing.assert_allclose(a[:4], [0.2821, 0, 0.4886, 0], atol=1e-4)
    with pytest.raises(ValueError):
        encode_spherical([1.0, 1.0, 1.0], scene_center=(1.0, 1.0, 1.0))


# ---------------------------------------------------------------- geometry


def test_sphere_initialisation_signs():
    m = FieldModel(FieldConfig(**SMALL))
    assert m.sdf(np.zeros(3)) < 0
    assert m.sdf(np.ones(3)) > 0


def test_parameter_counts():
    cfg = FieldConfig()
    m = FieldModel(cfg)
    assert m.params["hash.table"].shape == (8, 2**15, 2)
    assert m.params["geo.w0"].shape == (3 + 16, 64)
    assert m.params["geo.w2"].shape == (64, 1 + 16)
    assert m.params["refl.w0"].shape == (3 + 3 + 16, 64)
    assert m.params["shade.w0"].shape == (3 + 3 + 16 + 26, 64)
    assert m.params["color.w0"].shape == (3 + 3 + 16 + 3 + 26, 64)
    assert m.params["shade.w3"].shape == (64, 1)
    assert m.param_count() == sum(v.size for v in m.params.values())
    assert m.inv_std == pytest.approx(20.0, rel=1e-6)


def test_normals_unit_and_match_fd(rng):
    m = FieldModel(FieldConfig(**SMALL, dtype="float64", seed=3))
    m.params["hash.table"][...] = rng.normal(0, 1e-2, m.params["hash.table"].shape)
    m.params["geo.w0"][3:] = rng.normal(0, 0.1, m.params["geo.w0"][3:].shape)
    x = rng.uniform(-0.9, 0.9, (100, 3))
    out = geometry_forward(m, x)
    np.testing.assert_allclose(np.linalg.norm(out.normal, axis=1), 1.0, atol=1e-6)
    g = m.geometry_grad_x(m.geometry(x))
    h = 1e-6
    fd = np.stack([(m.sdf(x + e) - m.sdf(x - e)) / (2 * h) for e in np.eye(3) * h], axis=1)
    rel = np.linalg.norm(g - fd, axis=1) / np.linalg.norm(fd, axis=1)
    assert rel.max() < 1e-3


# ---------------------------------------------------------------- heads


def _head_inputs(rng, n, m):
    x = rng.uniform(-1, 1, (n, 3))
    return x, _unit(rng, n), rng.normal(size=(n, m.config.feat_dim)), _unit(rng, n)


def test_heads_bounded(rng):
    m = FieldModel(FieldConfig(**SMALL))
    x, nrm, feat, d = _head_inputs(rng, 1000, m)
    feat *= 50  # large inputs saturate, never leave the range
    c = color_forward(m, x, nrm, feat, d, [1.0, 2.0, 3.0])
    r = reflectance_forward(m, x, nrm, feat)
    s = shading_forward(m, x, nrm, feat, [1.0, 2.0, 3.0])
    assert c.shape == (1000, 3) and r.shape == (1000, 3) and s.shape == (1000, 1)
    for v in (c, r, s):
        assert np.all((v >= 0) & (v <= 1))


def test_zero_final_layer_gives_half(rng):
    m = FieldModel(FieldConfig(**SMALL))
    for name in ("color", "refl", "shade"):
        mlp = getattr(m, name)
        last = len(mlp.widths) - 2
        m.params[f"{name}.w{last}"][...] = 0
        m.params[f"{name}.b{last}"][...] = 0
    x, nrm, feat, d = _head_inputs(rng, 50, m)
    for v in (color_forward(m, x, nrm, feat, d, [0, 0, 2.0]), reflectance_forward(m, x, nrm, feat),
              shading_forward(m, x, nrm, feat, [0, 0, 2.0])):
        np.testing.assert_array_equal(v, 0.5)


def test_light_changes_color_and_shading(rng):
    m = FieldModel(FieldConfig(**SMALL, dtype="float64"))
    x, nrm, feat, d = _head_inputs(rng, 20, m)
    l0 = np.array([1.0, 2.0, 3.0])
    h = 1e-4
    for fn in (lambda l: color_forward(m, x, nrm, feat, d, l), lambda l: shading_forward(m, x, nrm, feat, l)):
        jac = np.stack([(fn(l0 + e) - fn(l0 - e)) / (2 * h) for e in np.eye(3) * h])
        assert np.linalg.norm(jac) > 1e-3
        assert not np.array_equal(fn(l0), fn(-l0))


def test_reflectance_takes_no_light_or_view():
    params = list(inspect.signature(reflectance_forward).parameters)
    assert params == ["model", "x", "n", "feat"]
    assert "light_position" in inspect.signature(shading_forward).parameters
    assert "d" not in inspect.signature(shading_forward).parameters


def test_reflectance_unique_across_lights(rng):
    m = FieldModel(FieldConfig(**SMALL))
    x, nrm, feat, _ = _head_inputs(rng, 30, m)
    outs = set()
    for l in rng.uniform(-4, 4, (10, 3)):
        m.light_code(l)  # what a caller with a light would compute; unused by the head
        outs.add(reflectance_forward(m, x, nrm, feat).tobytes())
    assert len(outs) == 1


# ---------------------------------------------------------------- backward


def test_linear_layer_l2_gradient(rng):
    mlp = Mlp("lin", [4, 3], "relu", "linear")
    p = {"lin.w0": rng.normal(size=(4, 3)), "lin.b0": rng.normal(size=3)}
    x = rng.normal(size=(10, 4))
    y = rng.normal(size=(10, 3))
    out, cache = mlp.forward(p, x)
    g = {k: np.zeros_like(v) for k, v in p.items()}
    mlp.backward(p, cache, 2 * (out - y), g)
    # d/dW sum ||xW + b - y||^2 = 2 x^T (xW + b - y)
    np.testing.assert_allclose(g["lin.w0"], 2 * x.T @ (x @ p["lin.w0"] + p["lin.b0"] - y), rtol=1e-12)
    np.testing.assert_allclose(g["lin.b0"], 2 * (x @ p["lin.w0"] + p["lin.b0"] - y).sum(0), rtol=1e-12)


def _probe(m, rng, n=4):
    x, nrm, _, d = _head_inputs(rng, n, m)
    x *= 0.8
    code = np.tile(m.light_code([1.0, 2.0, 3.0]), (n, 1))
    proj = [rng.normal(size=n), rng.normal(size=(n, m.config.feat_dim)), rng.normal(size=(n, 3)),
            rng.normal(size=(n, 3)), rng.normal(size=(n, 1))]

    def run():
        g = m.geometry(x)
        c, cc = m.color_pass(x, nrm, g.feat, d, code)
        r, rc = m.reflectance_pass(x, nrm, g.feat)
        s, sc = m.shading_pass(x, nrm, g.feat, code)
        loss = (proj[0] * g.sdf).sum() + (proj[1] * g.feat).sum() + (proj[2] * c).sum() + (proj[3] * r).sum() \
            + (proj[4] * s).sum()
        return loss, (g, cc, rc, sc)

    def grad():
        _, (g, cc, rc, sc) = run()
        grads = m.zero_grads()
        dfeat = proj[1].copy()
        for mlp, cache, up in ((m.color, cc, proj[2]), (m.refl, rc, proj[3]), (m.shade, sc, proj[4])):
            dfeat += mlp.backward(m.params, cache, up, grads)[:, 6:6 + m.config.feat_dim]
        m.geometry_backward(g, proj[0], dfeat, grads)
        return grads

    return run, grad


def _model_for_gradcheck(seed):
    rng = np.random.default_rng(seed)
    m = FieldModel(FieldConfig(dtype="float64", seed=seed))
    # switch the hash features on so their gradient path is exercised
    m.params["hash.table"][...] = rng.normal(0, 1e-2, m.params["hash.table"].shape)
    m.params["geo.w0"][3:] = rng.normal(0, 0.1, m.params["geo.w0"][3:].shape)
    return m, rng


def _sample_params(m, grads, rng, count=50):
    keys = [k for k in m.params if k != "log_inv_std"]
    out = []
    for _ in range(count):
        k = keys[rng.integers(len(keys))]
        if k == "hash.table":
            nz = np.flatnonzero(grads[k])
            out.append((k, nz[rng.integers(len(nz))]))
        else:
            out.append((k, rng.integers(m.params[k].size)))
    return out


def _fd(m, loss, k, i, h):
    p = m.params[k].reshape(-1)
    old = p[i]
    p[i] = old + h
    a = loss()
    p[i] = old - h
    b = loss()
    p[i] = old
    return (a - b) / (2 * h)


def test_full_model_gradient_step_1e3():
    m, rng = _model_for_gradcheck(0)
    run, grad = _probe(m, rng)
    grads = grad()
    picks = _sample_params(m, grads, rng)
    an = np.array([grads[k].reshape(-1)[i] for k, i in picks])
    fd = np.array([_fd(m, lambda: run()[0], k, i, 1e-3) for k, i in picks])
    assert np.linalg.norm(an - fd) / np.linalg.norm(fd) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_full_model_gradient_small_step(seed):
    # away from the O(h^2) softplus curvature and ReLU kinks the match is tight
    m, rng = _model_for_gradcheck(seed)
    run, grad = _probe(m, rng)
    grads = grad()
    for k, i in _sample_params(m, grads, rng):
        an = grads[k].reshape(-1)[i]
        fd = _fd(m, lambda: run()[0], k, i, 1e-6)
        assert abs(an - fd) <= 1e-5 * max(abs(an), abs(fd), 1e-3)


def test_constant_loss_zero_gradient(rng):
    m = FieldModel(FieldConfig(**SMALL))
    x, nrm, _, d = _head_inputs(rng, 8, m)
    g = m.geometry(x)
    _, cc = m.color_pass(x, nrm, g.feat, d, np.tile(m.light_code([0, 0, 3.0]), (8, 1)))
    grads = m.zero_grads()
    din = m.color.backward(m.params, cc, np.zeros((8, 3), dtype=m.dtype), grads)
    m.geometry_backward(g, np.zeros(8, dtype=m.dtype), din[:, 6:22], grads)
    for v in grads.values():
        np.testing.assert_array_equal(v, 0.0)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    m = FieldModel(FieldConfig(**SMALL, seed=5))
    save_checkpoint(m, tmp_path / "m.mlif", {"stage": 1})
    back, extra = load_checkpoint(tmp_path / "m.mlif")
    assert extra == {"stage": 1}
    assert list(back.params) == list(m.params)
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    assert back.config == m.config


def test_checkpoint_layout(tmp_path):
    m = FieldModel(FieldConfig(**SMALL, dtype="float64"))
    save_checkpoint(m, tmp_path / "m.mlif")
    raw = (tmp_path / "m.mlif").read_bytes()
    assert raw[:4] == MAGIC
    _, n = struct.unpack("<II", raw[4:12])
    body = raw[12 + n:]
    assert len(body) == 4 * m.param_count()
    first = np.frombuffer(body[:4 * m.params["hash.table"].size], dtype="<f4")
    np.testing.assert_array_equal(first, m.params["hash.table"].reshape(-1).astype(np.float32))
    assert load_checkpoint(tmp_path / "m.mlif", dtype="float64")[0].dtype == np.float64


def test_bad_checkpoint(tmp_path):
    (tmp_path / "x").write_bytes(b"nope" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")
