import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import attention_by_enumeration, bilinear_by_loops, project_homogeneous
from unibev.features import (STRIDES, FeatureMap, FeatureQueue, MultiScaleFeatures,
                             QueueEntry, pixel_to_cell)
from unibev.fusion import (FusionConfig, SampledValueTable, Trace, attention_weights,
                           deformable_self_attention, encoder_layer, gather_values,
                           init_fusion_params, plan_sampling, run_transformer,
                           segmentation_head, temporal_average_baseline,
                           unified_cross_attention, window_validity)
from unibev.geometry import (BevGridSpec, Camera, Intrinsics, Pose, bev_grid_points,
                             camera_rotation)


def forward_camera(width=64, height=32, fov=90.0, yaw=0.0):
    return Camera("cam", Intrinsics.from_fov(width, height, fov),
                  Pose(camera_rotation(yaw), (0.0, 0.0, 0.0)))


def const_features(c, value, width=64, height=32, levels=4):
    return MultiScaleFeatures(tuple(
        FeatureMap(np.full((height // s, width // s, c), value), s) for s in STRIDES[:levels]))


def random_table(rng, nq=3, steps=2, levels=2, heights=2, cams=2, c=4, p_valid=0.6):
    e = steps * levels * heights * cams
    valid = rng.uniform(size=(nq, e)) < p_valid
    values = rng.normal(size=(nq, e, c)) * valid[..., None]
    return SampledValueTable(values, valid, steps, levels, heights, cams)


def ca_params(rng, c, steps=2, levels=2, heights=2, identity_v=False):
    p = {"layer0.ca.q.w": rng.normal(size=(c, c)), "layer0.ca.k.w": rng.normal(size=(c, c)),
         "layer0.ca.v.w": np.eye(c) if identity_v else rng.normal(size=(c, c)),
         "layer0.ca.v.b": np.zeros(c) if identity_v else rng.normal(size=c),
         "pos_embed": rng.normal(size=(11, levels, heights, c))}
    return p


# gather ----------------------------------------------------------------------

def test_gather_constant_field_and_behind_camera():
    cam = forward_camera()
    grid = BevGridSpec(6, 4, (-12.0, 12.0), (-4.0, 4.0), heights=(-1.0, 0.0))
    q = FeatureQueue(3).push(QueueEntry(0, [const_features(3, 2.5)], Pose.identity(), [cam]))
    table = gather_values(q.window(2), grid)
    assert table.values.shape == (24, 4 * 2 * 1, 3)
    assert table.valid.any()
    np.testing.assert_allclose(table.values[table.valid], 2.5, atol=1e-12)
    assert not table.values[~table.valid].any()
    # camera faces +x, so cells with x < 0 lie behind it
    xs = bev_grid_points(grid)[::2, 0]
    assert not table.valid[xs < 0].any()


def frustum_oracle(grid, poses, rigs, num_levels=4):
    """Validity by direct 4x4 projection and an explicit cell-bounds test."""
    pts = bev_grid_points(grid)
    nz = len(grid.heights)
    ncam = len(rigs[0])
    e_count = len(poses) * num_levels * nz * ncam
    valid = np.zeros((grid.num_queries, e_count), dtype=bool)
    for k, pt in enumerate(pts):
        qi, zi = divmod(k, nz)
        for p, (pose, rig) in enumerate(zip(poses, rigs)):
            for ci, cam in enumerate(rig):
                kk = cam.intrinsics
                u, v, d = project_homogeneous(kk.matrix(), cam.extrinsic, pose, poses[0], pt)
                if not (d > 1e-6 and 0 <= u < kk.width and 0 <= v < kk.height):
                    continue
                for l in range(num_levels):
                    s = STRIDES[l]
                    cu, cv = pixel_to_cell(u, s), pixel_to_cell(v, s)
                    if 0 <= cu <= kk.width // s - 1 and 0 <= cv <= kk.height // s - 1:
                        valid[qi, ((p * num_levels + l) * nz + zi) * ncam + ci] = True
    return valid


def test_past_step_covers_cells_the_current_step_misses():
    cam = forward_camera(fov=60.0)
    grid = BevGridSpec(8, 8, (-16.0, 16.0), (-16.0, 16.0), heights=(-1.0, 1.0))
    # the past ego sat 10 m behind and looked left
    poses = [Pose.identity(), Pose.from_yaw(np.pi / 2, (-10.0, 0.0, 0.0))]
    rigs = [[cam], [cam]]
    valid = window_validity(poses, rigs, grid)
    np.testing.assert_array_equal(valid, frustum_oracle(grid, poses, rigs))
    per_step = valid.reshape(64, 2, -1).any(-1)
    assert (per_step[:, 1] & ~per_step[:, 0]).any()
    plan = plan_sampling(poses, rigs, grid)
    np.testing.assert_array_equal(plan.valid, valid)


def test_entry_layout_and_long_range_access():
    cams = [forward_camera(), forward_camera(yaw=np.pi)]
    grid = BevGridSpec(4, 4, (-8.0, 8.0), (-8.0, 8.0), heights=(-1.0, 1.0))
    poses = [Pose.from_yaw(0.0, (-1.0 * p, 0.0, 0.0)) for p in range(11)]
    plan = plan_sampling(poses, [cams] * 11, grid)
    nz, nl, nc = 2, 4, 2
    assert plan.num_entries == 11 * nl * nz * nc
    # columns are laid out per level, then per (step, camera) image
    offsets = np.cumsum([0] + [11 * nc * h * w for h, w in plan.level_shapes])
    coo = plan.sampler.tocoo()
    e = coo.row % plan.num_entries
    p = e // (nl * nz * nc)
    l = (e // (nz * nc)) % nl
    cam = e % nc
    h, w = np.array(plan.level_shapes).T
    image = (coo.col - offsets[l]) // (h[l] * w[l])
    np.testing.assert_array_equal(image, p * nc + cam)
    # entries of step 10 read the step-10 images directly
    assert (p == 10).any()


def test_window_validity_rejects_mixed_rigs():
    grid = BevGridSpec(2, 2, (-1, 1), (-1, 1))
    with pytest.raises(ValueError):
        window_validity([Pose.identity()] * 2, [[forward_camera()], []], grid)
    with pytest.raises(ValueError):
        window_validity([Pose.identity()], [[forward_camera(), forward_camera(128, 64)]], grid)


# cross-attention -------------------------------------------------------------

def test_attention_weights_normalized_and_masked():
    rng = np.random.default_rng(0)
    for _ in range(100):
        table = random_table(rng)
        p = ca_params(rng, 4)
        a = attention_weights(rng.normal(size=(3, 4)), table, p)
        has = table.valid.any(1)
        assert np.all(np.abs(a.sum(1)[has] - 1.0) <= 1e-6)
        assert not a[~table.valid].any()
        assert not a[~has].any()


def test_cross_attention_matches_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(50):
        table = random_table(rng, nq=2, steps=1, levels=1, heights=3, cams=1)
        p = ca_params(rng, 4, steps=1, levels=1, heights=3)
        q = rng.normal(size=(2, 4))
        out = unified_cross_attention(q, table, p)
        pi, li, zi, _ = table.entry_indices()
        for n in range(2):
            ref, w = attention_by_enumeration(q[n], table.values[n], table.valid[n],
                                              p["pos_embed"][pi, li, zi], p["layer0.ca.q.w"],
                                              p["layer0.ca.k.w"], p["layer0.ca.v.w"],
                                              p["layer0.ca.v.b"])
            if table.valid[n].any():
                np.testing.assert_allclose(out[n], q[n] + ref, atol=1e-9)
            else:
                np.testing.assert_array_equal(out[n], q[n])


def test_identical_keys_give_mean_and_constant_values_pass_through():
    rng = np.random.default_rng(2)
    c = 4
    values = rng.normal(size=(1, 4, c))
    table = SampledValueTable(values, np.ones((1, 4), bool), 1, 1, 4, 1)
    p = ca_params(rng, c, steps=1, levels=1, heights=4, identity_v=True)
    p["layer0.ca.k.w"] = np.zeros((c, c))  # every key projects to zero
    q = rng.normal(size=(1, c))
    np.testing.assert_allclose(unified_cross_attention(q, table, p) - q,
                               values.mean(1), atol=1e-12)
    const = SampledValueTable(np.full((1, 4, c), 1.75), np.ones((1, 4), bool), 1, 1, 4, 1)
    p = ca_params(rng, c, steps=1, levels=1, heights=4, identity_v=True)
    np.testing.assert_allclose(unified_cross_attention(q, const, p) - q, 1.75, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cross_attention_convexity(seed):
    rng = np.random.default_rng(seed)
    table = random_table(rng, nq=4, c=5)
    p = ca_params(rng, 5, identity_v=True)
    q = rng.normal(size=(4, 5)) * 3
    res = unified_cross_attention(q, table, p) - q
    for n in range(4):
        v = table.values[n][table.valid[n]]
        if len(v) == 0:
            assert not res[n].any()
            continue
        assert np.all(res[n] >= v.min(0) - 1e-9) and np.all(res[n] <= v.max(0) + 1e-9)


def test_all_invalid_queries_are_skipped_and_reported():
    rng = np.random.default_rng(3)
    table = random_table(rng, nq=3)
    table.valid[1] = False
    table.values[1] = 0.0
    p = ca_params(rng, 4)
    q = rng.normal(size=(3, 4))
    out, skipped = unified_cross_attention(q, table, p, return_skipped=True)
    assert skipped.tolist() == [1]
    np.testing.assert_array_equal(out[1], q[1])


# temporal average baseline ---------------------------------------------------

def test_temporal_average_examples():
    rng = np.random.default_rng(4)
    single = random_table(rng, steps=1)
    avg = temporal_average_baseline(single)
    np.testing.assert_array_equal(avg.values, single.values)
    np.testing.assert_array_equal(avg.valid, single.valid)
    a, b = rng.normal(size=3), rng.normal(size=3)
    both = SampledValueTable(np.stack([a, b])[None], np.ones((1, 2), bool), 2, 1, 1, 1)
    out = temporal_average_baseline(both)
    np.testing.assert_allclose(out.values[0], [(a + b) / 2] * 2, atol=1e-15)
    mixed = SampledValueTable(np.stack([a, np.zeros(3)])[None], np.array([[True, False]]),
                              2, 1, 1, 1)
    out = temporal_average_baseline(mixed)
    np.testing.assert_allclose(out.values[0], [a, a], atol=1e-15)
    assert out.valid.all()


def test_temporal_average_masked_mean_oracle():
    rng = np.random.default_rng(5)
    t = random_table(rng, nq=4, steps=3, levels=2, heights=2, cams=2)
    out = temporal_average_baseline(t)
    vals, valid = t.step_view()
    ovals, ovalid = out.step_view()
    for idx in np.ndindex(4, 2, 2, 2):
        n, l, z, c = idx
        ok = valid[n, :, l, z, c]
        if ok.any():
            ref = vals[n, ok, l, z, c].mean(0)
            for p in range(3):
                np.testing.assert_allclose(ovals[n, p, l, z, c], ref, atol=1e-12)
        assert ovalid[n, :, l, z, c].tolist() == [bool(ok.any())] * 3


# deformable self-attention ---------------------------------------------------

def sa_params(c, m, rng=None):
    return {"layer0.sa.off.w": np.zeros((c, 2 * m)), "layer0.sa.off.b": np.zeros(2 * m),
            "layer0.sa.att.w": np.zeros((c, m)), "layer0.sa.att.b": np.zeros(m),
            "layer0.sa.val.w": np.eye(c), "layer0.sa.val.b": np.zeros(c)}


def test_self_attention_zero_offsets_double_the_query():
    rng = np.random.default_rng(6)
    grid = BevGridSpec(3, 4, (0, 3), (0, 4))
    q = rng.normal(size=(3, 4, 5))
    np.testing.assert_allclose(deformable_self_attention(q, sa_params(5, 1), grid), 2 * q,
                               atol=1e-12)
    const = np.full((3, 4, 5), 0.7)
    np.testing.assert_allclose(deformable_self_attention(const, sa_params(5, 4), grid), 1.4,
                               atol=1e-12)


def test_self_attention_matches_enumeration():
    rng = np.random.default_rng(7)
    x_cells, y_cells, c, m = 4, 5, 3, 4
    grid = BevGridSpec(x_cells, y_cells, (0, 4), (0, 5))
    p = {"layer0.sa.off.w": rng.normal(size=(c, 2 * m)),
         "layer0.sa.off.b": rng.normal(size=2 * m) * 2,
         "layer0.sa.att.w": rng.normal(size=(c, m)), "layer0.sa.att.b": rng.normal(size=m),
         "layer0.sa.val.w": rng.normal(size=(c, c)), "layer0.sa.val.b": rng.normal(size=c)}
    q = rng.normal(size=(x_cells, y_cells, c))
    out = deformable_self_attention(q, p, grid)
    val = q @ p["layer0.sa.val.w"] + p["layer0.sa.val.b"]
    for i in range(x_cells):
        for j in range(y_cells):
            x = q[i, j]
            off = (x @ p["layer0.sa.off.w"] + p["layer0.sa.off.b"]).reshape(m, 2)
            lg = x @ p["layer0.sa.att.w"] + p["layer0.sa.att.b"]
            w = np.exp(lg - lg.max())
            w /= w.sum()
            ref = x.copy()
            for k in range(m):
                # the value grid is indexed (row = i, col = j)
                ref += w[k] * bilinear_by_loops(val, j + off[k, 1], i + off[k, 0])
            np.testing.assert_allclose(out[i, j], ref, atol=1e-10)


# transformer and head --------------------------------------------------------

def small_cfg(x=3, y=4, c=6, layers=2, sr=True, upsample=2):
    return FusionConfig(BevGridSpec(x, y, (-3, 3), (-4, 4), upsample_factor=upsample),
                        channels=c, layers=layers, self_regression=sr)


def test_self_regression_layer_counts():
    rng = np.random.default_rng(8)
    for layers in (1, 3):
        cfg = small_cfg(layers=layers)
        params = init_fusion_params(cfg, rng)
        table = random_table(rng, nq=12, steps=1, levels=4, heights=4, cams=1, c=6)
        for sr, expected in ((False, layers), (True, 2 * layers)):
            trace = Trace()
            run_transformer(params["query"], table, params, cfg, sr, trace)
            assert trace.layer_applications == expected


def test_zero_weights_leave_projected_queries():
    rng = np.random.default_rng(9)
    cfg = small_cfg()
    params = init_fusion_params(cfg, rng)
    for k in params:
        if k.startswith("layer"):
            params[k] = np.zeros_like(params[k])
    params["in_proj.b"] = rng.normal(size=6)
    table = random_table(rng, nq=12, steps=1, levels=4, heights=4, cams=1, c=6)
    q0 = rng.normal(size=(12, 6))
    w, b = params["in_proj.w"], params["in_proj.b"]
    once = np.concatenate([q0, q0], 1) @ w + b
    np.testing.assert_allclose(run_transformer(q0, table, params, cfg, False), once, atol=1e-12)
    twice = np.concatenate([once, q0], 1) @ w + b
    np.testing.assert_allclose(run_transformer(q0, table, params, cfg, True), twice, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([2, 4]), st.integers(1, 2),
       st.integers(0, 3), st.booleans())
def test_transformer_shape_stability(x, y, c, layers, p, sr):
    rng = np.random.default_rng(x * 100 + y)
    cfg = small_cfg(x, y, c, layers, sr)
    params = init_fusion_params(cfg, rng)
    table = random_table(rng, nq=x * y, steps=p + 1, levels=4, heights=4, cams=2, c=c)
    q = rng.normal(size=(x, y, c))
    assert run_transformer(q, table, params, cfg).shape == (x, y, c)
    assert encoder_layer(q, table, params, "layer0.", cfg).shape == (x, y, c)


def test_segmentation_head_shapes_and_zero_weights():
    for cells, u, shape in (((50, 50), 4, (200, 200)), ((80, 50), 8, (640, 400))):
        grid = BevGridSpec(*cells, (-1, 1), (-1, 1), upsample_factor=u)
        cfg = FusionConfig(grid, channels=4, layers=1, num_classes=3)
        params = init_fusion_params(cfg, np.random.default_rng(0))
        q = np.random.default_rng(1).normal(size=(cells[0] * cells[1], 4))
        assert segmentation_head(q, params, grid, 3).shape == shape + (3,)
    params["head.w"][:] = 0.0
    assert not segmentation_head(q, params, grid, 3).any()


def test_head_pixel_placement():
    grid = BevGridSpec(2, 3, (-1, 1), (-1, 1), upsample_factor=2)
    c, k = 4, 2
    rng = np.random.default_rng(10)
    params = {"ln_f.g": np.ones(c), "ln_f.b": np.zeros(c),
              "head.w": rng.normal(size=(c, 2 * 2 * k)), "head.b": np.zeros(k)}
    q = rng.normal(size=(6, c))
    logits = segmentation_head(q, params, grid, k)
    z = (q - q.mean(1, keepdims=True)) / np.sqrt(q.var(1, keepdims=True) + 1e-5)
    for i in range(2):
        for j in range(3):
            block = (z[i * 3 + j] @ params["head.w"]).reshape(2, 2, k)
            np.testing.assert_allclose(logits[2 * i:2 * i + 2, 2 * j:2 * j + 2], block,
                                       atol=1e-10)


def test_parameter_shapes_do_not_depend_on_depth():
    cfg = small_cfg()
    a = init_fusion_params(cfg, np.random.default_rng(0))
    b = init_fusion_params(cfg, np.random.default_rng(1))
    assert {k: v.shape for k, v in a.items()} == {k: v.shape for k, v in b.items()}
    assert a["pos_embed"].shape[0] == cfg.max_steps + 1
