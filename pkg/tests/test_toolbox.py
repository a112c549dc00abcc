import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from matplotlib.path import Path as MplPath
from skimage.draw import line as sk_line

from toolbottleneck.toolbox import (
    BROWN_COLOR_RULES,
    MALIGNANT_COLOR_RULES,
    TOOL_DESCRIPTIONS,
    ColorRule,
    InstanceRecord,
    RasterizationError,
    ToolError,
    Toolbox,
    ToolSpec,
    block_bounds,
    bresenham,
    color_marker_map,
    compute_tool_stack,
    decode_superpixel_labels,
    decode_superpixel_rgb,
    dermatology_toolbox,
    downsample_max,
    dump_instances,
    histopathology_toolbox,
    load_instances,
    load_stack,
    polygon_interior,
    rasterize_bboxes,
    rasterize_centroids,
    rasterize_contours,
    rasterize_type_onehot,
    rasterize_type_prob,
    save_stack,
    shades_of_gray_normalize,
)


def square(x, y, s, type_label=0, prob=1.0):
    pts = ((x, y), (x + s, y), (x + s, y + s), (x, y + s))
    return InstanceRecord(box=(x, y, s, s), centroid=(x + s / 2, y + s / 2), contour=pts,
                          type_label=type_label, type_prob=prob)


def loop_downsample(canvas, out):
    # independent per-pixel block max
    h0, w0 = canvas.shape
    h, w = out
    res = np.zeros(out, dtype=canvas.dtype)
    for i in range(h):
        r0, r1 = (i * h0) // h, max((i * h0) // h + 1, ((i + 1) * h0) // h)
        for j in range(w):
            c0, c1 = (j * w0) // w, max((j * w0) // w + 1, ((j + 1) * w0) // w)
            res[i, j] = canvas[r0:r1, c0:c1].max()
    return res


# ---- instance records


def test_instance_json_roundtrip(tmp_path):
    insts = [square(1, 2, 3, type_label=4, prob=0.25), square(10, 10, 5)]
    doc = dump_instances(insts, tmp_path / "nuc.json")
    assert set(doc) == {"0", "1"}
    assert load_instances(tmp_path / "nuc.json") == insts


def test_load_instances_orders_numeric_keys():
    a, b = square(0, 0, 2).to_json(), square(5, 5, 2).to_json()
    got = load_instances({"10": b, "2": a})
    assert got[0].box == (0.0, 0.0, 2.0, 2.0)


def test_missing_type_fields_default():
    rec = InstanceRecord.from_json({"box": [0, 0, 1, 1], "centroid": [0, 0], "contour": [], "type": None, "prob": None})
    assert rec.type_label == 0 and rec.type_prob == 1.0


# ---- downsampling


@given(st.integers(1, 40), st.integers(1, 40))
def test_block_bounds_partition_source(n_src, n_out):
    bounds = block_bounds(n_src, n_out)
    assert len(bounds) == n_out
    for lo, hi in bounds:
        assert 0 <= lo < hi <= n_src
    if n_out <= n_src:
        # blocks tile the source exactly once
        assert bounds[0][0] == 0 and bounds[-1][1] == n_src
        assert all(bounds[i][1] == bounds[i + 1][0] for i in range(n_out - 1))


@settings(max_examples=60)
@given(st.integers(1, 24), st.integers(1, 24), st.integers(1, 24), st.integers(1, 24), st.integers(0, 10_000))
def test_downsample_matches_loop_oracle(h0, w0, h, w, seed):
    canvas = np.random.default_rng(seed).random((h0, w0)).astype(np.float32)
    np.testing.assert_array_equal(downsample_max(canvas, (h, w)), loop_downsample(canvas, (h, w)))


def test_thin_line_survives_downsampling():
    canvas = np.zeros((97, 97), dtype=np.float32)
    canvas[50, :] = 1
    out = downsample_max(canvas, (10, 10))
    assert out.sum(axis=0).min() == 1


# ---- lines and polygons


@settings(max_examples=300)
@given(st.integers(-30, 30), st.integers(-30, 30), st.integers(-30, 30), st.integers(-30, 30))
def test_bresenham_matches_skimage(x0, y0, x1, y1):
    rr, cc = sk_line(y0, x0, y1, x1)
    assert sorted(bresenham(x0, y0, x1, y1)) == sorted(zip(cc.tolist(), rr.tolist()))


def test_bresenham_endpoints_and_steps():
    pts = bresenham(0, 0, 5, 2)
    assert pts[0] == (0, 0) and pts[-1] == (5, 2)
    assert all(max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1 for a, b in zip(pts, pts[1:]))


@settings(max_examples=150)
@given(st.lists(st.tuples(st.integers(0, 19), st.integers(0, 19)), min_size=3, max_size=7))
def test_polygon_interior_matches_matplotlib(vertices):
    pts = np.array(vertices)
    shape = (20, 20)
    yy, xx = np.mgrid[0:20, 0:20]
    inside = MplPath(pts.astype(float)).contains_points(np.c_[xx.ravel(), yy.ravel()], radius=0.0).reshape(shape)
    boundary = np.zeros(shape, dtype=bool)
    for i in range(len(pts)):
        (xa, ya), (xb, yb) = pts[i], pts[(i + 1) % len(pts)]
        rr, cc = sk_line(int(ya), int(xa), int(yb), int(xb))
        boundary[rr, cc] = True
    got = polygon_interior(pts, shape)
    # strict interiors agree; matplotlib is ambiguous only on the boundary, which both include
    np.testing.assert_array_equal(got & ~boundary, inside & ~boundary)
    assert (got >= boundary).all()


def test_square_interior_area():
    pts = np.array([[2, 2], [6, 2], [6, 6], [2, 6]])
    assert polygon_interior(pts, (10, 10)).sum() == 25


# ---- rasterizers


def test_bbox_coverage_rule():
    # x <= c < x + w, y <= r < y + h
    out = rasterize_bboxes([InstanceRecord((1, 2, 3, 2), (2, 3), ())], (6, 6), (6, 6))[0]
    expect = np.zeros((6, 6))
    expect[2:4, 1:4] = 1
    np.testing.assert_array_equal(out, expect)


def test_bbox_fractional_coordinates():
    out = rasterize_bboxes([InstanceRecord((0.5, 0.5, 2, 1), (1, 1), ())], (4, 4), (4, 4))[0]
    assert np.argwhere(out).tolist() == [[1, 1], [1, 2]]


def test_bbox_outside_canvas_names_index():
    insts = [square(0, 0, 2), InstanceRecord((5, 5, 4, 4), (6, 6), ())]
    with pytest.raises(RasterizationError) as err:
        rasterize_bboxes(insts, (8, 8), (8, 8))
    assert err.value.index == 1


def test_centroid_disc_shapes():
    one = rasterize_centroids([InstanceRecord((0, 0, 1, 1), (3, 3), ())], 0, (7, 7), (7, 7))[0]
    assert np.argwhere(one).tolist() == [[3, 3]]
    plus = rasterize_centroids([InstanceRecord((0, 0, 1, 1), (3, 3), ())], 1, (7, 7), (7, 7))[0]
    assert plus.sum() == 5 and plus[2, 3] == plus[3, 2] == 1 and plus[2, 2] == 0
    disc2 = rasterize_centroids([InstanceRecord((0, 0, 1, 1), (3, 3), ())], 2, (7, 7), (7, 7))[0]
    assert disc2.sum() == 13


def test_centroid_rounds_half_up_and_clips():
    out = rasterize_centroids([InstanceRecord((0, 0, 1, 1), (2.5, 1.5), ())], 0, (5, 5), (5, 5))[0]
    assert np.argwhere(out).tolist() == [[2, 3]]
    edge = rasterize_centroids([InstanceRecord((0, 0, 1, 1), (0, 0), ())], 1, (5, 5), (5, 5))[0]
    assert edge.sum() == 3


def test_centroid_outside_canvas():
    with pytest.raises(RasterizationError):
        rasterize_centroids([InstanceRecord((0, 0, 1, 1), (5, 1), ())], 1, (5, 5), (5, 5))


def test_contour_is_traced_boundary_only():
    out = rasterize_contours([square(2, 2, 4)], (10, 10), (10, 10))[0]
    assert out.sum() == 16 and out[4, 4] == 0


def test_contour_needs_three_vertices():
    bad = InstanceRecord((0, 0, 2, 2), (1, 1), ((0, 0), (1, 1)))
    with pytest.raises(RasterizationError) as err:
        rasterize_contours([square(0, 0, 2), bad], (8, 8), (8, 8))
    assert err.value.index == 1


def test_type_onehot_channels():
    insts = [square(0, 0, 2, type_label=1), square(5, 5, 2, type_label=4)]
    out = rasterize_type_onehot(insts, 6, (8, 8), (8, 8))
    assert out.shape == (6, 8, 8)
    assert out[1].sum() == 9 and out[4].sum() == 9
    assert out[[0, 2, 3, 5]].sum() == 0


def test_type_onehot_rejects_bad_label():
    with pytest.raises(RasterizationError) as err:
        rasterize_type_onehot([square(0, 0, 2, type_label=6)], 6, (8, 8), (8, 8))
    assert err.value.index == 0


def test_type_prob_takes_overlap_max():
    insts = [square(0, 0, 4, prob=0.3), square(2, 2, 4, prob=0.8)]
    out = rasterize_type_prob(insts, (8, 8), (8, 8))[0]
    assert out[0, 0] == pytest.approx(0.3) and out[3, 3] == pytest.approx(0.8) and out[7, 7] == 0


def test_type_prob_out_of_range():
    with pytest.raises(RasterizationError):
        rasterize_type_prob([square(0, 0, 2, prob=1.5)], (8, 8), (8, 8))


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_rasters_in_unit_interval_with_expected_shape(seed):
    rng = np.random.default_rng(seed)
    insts = []
    for _ in range(rng.integers(0, 6)):
        x, y = rng.integers(0, 40, size=2)
        insts.append(square(int(x), int(y), int(rng.integers(1, 8)), int(rng.integers(0, 6)), float(rng.random())))
    tb = histopathology_toolbox((48, 48), (12, 12))
    stack = compute_tool_stack(None, {"instances": insts}, tb)
    assert stack.shape == (10, 12, 12) and stack.dtype == np.float32
    assert stack.min() >= 0 and stack.max() <= 1


def test_empty_instances_give_zero_maps():
    stack = compute_tool_stack(None, {"instances": []}, histopathology_toolbox((16, 16), (8, 8)))
    assert stack.shape == (10, 8, 8) and not stack.any()


def test_downsampled_raster_equals_downsampled_full_raster():
    insts = [square(3, 4, 9), square(20, 17, 6)]
    full = rasterize_bboxes(insts, (33, 33), (33, 33))[0]
    np.testing.assert_array_equal(rasterize_bboxes(insts, (33, 33), (7, 7))[0], loop_downsample(full, (7, 7)))


# ---- color tools


def test_shades_of_gray_matches_direct_formula():
    rng = np.random.default_rng(0)
    img = rng.uniform(0.05, 0.9, size=(3, 16, 16))
    p = 6.0
    illum = np.array([np.mean(img[c] ** p) ** (1 / p) for c in range(3)])
    expect = img / illum[:, None, None]
    expect = expect / expect.max() if expect.max() > 1 else expect
    np.testing.assert_allclose(shades_of_gray_normalize(img, p), expect, rtol=1e-10)


def test_shades_of_gray_p1_is_gray_world():
    img = np.random.default_rng(1).uniform(0.1, 0.5, size=(3, 8, 8))
    out = shades_of_gray_normalize(img, 1.0)
    means = out.reshape(3, -1).mean(axis=1)
    np.testing.assert_allclose(means / means[0], np.ones(3), rtol=1e-10)


def test_shades_of_gray_removes_color_cast():
    img = np.random.default_rng(2).uniform(0.1, 0.6, size=(3, 8, 8))
    cast = img * np.array([1.0, 0.7, 0.4])[:, None, None]
    np.testing.assert_allclose(shades_of_gray_normalize(cast), shades_of_gray_normalize(img), rtol=1e-10)


def test_shades_of_gray_input_checks():
    with pytest.raises(ValueError):
        shades_of_gray_normalize(np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        shades_of_gray_normalize(np.full((3, 4, 4), 2.0))
    with pytest.raises(ValueError):
        shades_of_gray_normalize(np.full((4, 4), 0.5))


def test_color_rule_half_open_bounds():
    rule = ColorRule("x", r=(0.2, 0.5))
    rgb = np.zeros((3, 3, 1))
    rgb[0, :, 0] = [0.2, 0.5, 0.35]
    assert rule(rgb).ravel().tolist() == [True, False, True]


def test_color_marker_filters_small_and_outside_lesion():
    rgb = np.full((3, 20, 20), 0.7)
    rgb[:, 2:6, 2:6] = 0.05  # 16 px black patch inside lesion
    rgb[:, 10, 10] = 0.05  # single pixel, removed
    rgb[:, 15:19, 15:19] = 0.05  # outside lesion
    lesion = np.zeros((20, 20))
    lesion[:14, :14] = 1
    out = color_marker_map(rgb, MALIGNANT_COLOR_RULES[:1], lesion, min_area=10)
    assert out.shape == (1, 20, 20)
    assert out[0, 2:6, 2:6].all() and out.sum() == 16


def test_color_marker_fills_small_holes():
    rgb = np.full((3, 20, 20), 0.05)
    rgb[:, 8, 8] = 0.7
    out = color_marker_map(rgb, MALIGNANT_COLOR_RULES[:1], np.ones((20, 20)), min_area=10)
    assert out.all()


def test_color_marker_lesion_shape_mismatch():
    with pytest.raises(ValueError):
        color_marker_map(np.zeros((3, 4, 4)), BROWN_COLOR_RULES, np.ones((5, 5)))


def test_superpixel_decoding():
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[0, 1] = (1, 0, 0)
    rgb[1, 0] = (0, 1, 0)
    rgb[1, 1] = (2, 1, 1)
    idx = decode_superpixel_rgb(rgb)
    assert idx.tolist() == [[0, 1], [256, 2 + 256 + 65536]]
    out = decode_superpixel_labels(idx, {"streaks": [1, 256]}, (2, 2))["streaks"]
    np.testing.assert_array_equal(out[0], [[0, 1], [1, 0]])


def test_superpixel_unknown_index():
    with pytest.raises(RasterizationError):
        decode_superpixel_labels(np.zeros((4, 4), dtype=int), {"streaks": [3]}, (4, 4))


def test_dermatology_toolbox_end_to_end():
    rng = np.random.default_rng(0)
    img = rng.uniform(0.3, 0.8, size=(3, 32, 32))
    img[:, 8:16, 8:16] = 0.02
    lesion = np.zeros((32, 32))
    lesion[4:28, 4:28] = 1
    sp = np.arange(64).reshape(8, 8).repeat(4, 0).repeat(4, 1)
    ann = {"lesion_mask": lesion, "superpixels": sp, "superpixel_positives": {"streaks": [0, 9]}}
    tb = dermatology_toolbox(out_size=(16, 16))
    stack = compute_tool_stack(img, ann, tb)
    assert stack.shape == (7, 16, 16)
    assert stack[tb.index("derm_lesion_segmenter")].sum() == 144
    assert stack[tb.index("derm_streaks_detector")].sum() == 8
    assert stack[tb.index("derm_pigment_network")].sum() == 0
    assert stack[tb.index("derm_marker_malignant_union"), 4:8, 4:8].all()


# ---- registry


def const_tool(tool_id, channels=1, value=0.5, modality="synthetic"):
    return ToolSpec(tool_id, modality, channels, "", lambda img, ann: np.full((channels, 4, 4), value))


def test_toolbox_layout():
    tb = Toolbox([const_tool("a"), const_tool("b", 3), const_tool("c", 2)])
    assert tb.channels_per_tool == (1, 3, 2) and tb.total_channels == 6
    assert tb.channel_slice(1) == slice(1, 4) and tb.channel_slice(2) == slice(4, 6)
    assert tb.reordered(["c", "a", "b"]).tool_ids == ("c", "a", "b")
    with pytest.raises(KeyError):
        tb.index("zz")
    with pytest.raises(ValueError):
        tb.reordered(["a", "b"])


def test_toolbox_rejects_duplicates_and_empty():
    with pytest.raises(ValueError):
        Toolbox([const_tool("a"), const_tool("a")])
    with pytest.raises(ValueError):
        Toolbox([])


def test_modality_mask():
    tb = Toolbox([const_tool("a"), const_tool("b", modality="dermatology")])
    assert tb.modality_mask("dermatology").tolist() == [0, 1]


def test_stack_follows_toolbox_order():
    tb = Toolbox([const_tool("a", value=0.1), const_tool("b", 2, value=0.9)])
    stack = compute_tool_stack(None, {}, tb)
    assert stack[:, 0, 0].tolist() == pytest.approx([0.1, 0.9, 0.9])


def test_tool_error_names_tool():
    tb = Toolbox([const_tool("a"), const_tool("bad", value=1.5)])
    with pytest.raises(ToolError) as err:
        compute_tool_stack(None, {}, tb)
    assert err.value.tool_id == "bad"


def test_wrong_channel_count_is_tool_error():
    spec = ToolSpec("x", "synthetic", 2, "", lambda img, ann: np.zeros((1, 4, 4)))
    with pytest.raises(ToolError):
        compute_tool_stack(None, {}, Toolbox([spec]))


def test_toolspec_validation():
    with pytest.raises(ValueError):
        ToolSpec("x", "radiology", 1, "", lambda i, a: None)
    with pytest.raises(ValueError):
        ToolSpec("x", "synthetic", 0, "", lambda i, a: None)


def test_builtin_descriptions_cover_toolboxes():
    ids = histopathology_toolbox().tool_ids + dermatology_toolbox().tool_ids
    assert set(ids) == set(TOOL_DESCRIPTIONS)
    assert histopathology_toolbox().total_channels == 10


def test_stack_roundtrip(tmp_path):
    tb = histopathology_toolbox((8, 8), (8, 8))
    stack = compute_tool_stack(None, {"instances": [square(1, 1, 3)]}, tb)
    save_stack(tmp_path / "s", stack, tb)
    back, header = load_stack(tmp_path / "s")
    np.testing.assert_array_equal(back, stack)
    assert header["tool_ids"] == list(tb.tool_ids) and header["channels_per_tool"] == [1, 1, 1, 6, 1]
    json.loads((tmp_path / "s.json").read_text())
    with pytest.raises(ValueError):
        save_stack(tmp_path / "t", stack[:3], tb)


def test_round_half_up_convention_in_contours():
    pts = ((0.5, 0.5), (3.5, 0.5), (3.5, 2.5))
    out = rasterize_contours([InstanceRecord((0, 0, 4, 3), (2, 1), pts)], (5, 5), (5, 5))[0]
    assert out[1, 1] == 1 and out[1, 4] == 1 and out[3, 4] == 1
    assert math.isclose(out[0].sum(), 0)
