import numpy as np
import pytest

from dcn2.checks import run_gradcheck
from dcn2.deform_roipool import (
    Affine,
    BinField,
    PoolSpec,
    RoI,
    aligned_pool_forward,
    format_roi_lines,
    make_roi_branch,
    mdpool_backward,
    mdpool_forward,
    parse_roi_lines,
    roi_branch_backward,
    roi_branch_forward,
)
from dcn2.errors import ArgumentError, ShapeError
from dcn2.oracle import aligned_roipool_oracle
from dcn2.sampling import bilinear_sample


def test_constant_plane_identity_field():
    x = np.full((1, 3, 8, 8), 4.25)
    spec = PoolSpec(2, 3, samples=2)
    rois = [RoI(0, 1.0, 1.0, 6.5, 6.0)]
    out = mdpool_forward(x, rois, spec, [BinField.identity(spec.k)])
    assert np.allclose(out, 4.25, atol=1e-12)


def test_zero_modulation_zeroes_bin():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 8, 8))
    spec = PoolSpec(2, 2)
    mods = np.array([0.0, 1.0, 1.0, 0.3])
    field = BinField(np.zeros(8), mods)
    out = mdpool_forward(x, [RoI(0, 1, 1, 6, 6)], spec, [field])
    assert np.all(out[0, :, 0, 0] == 0.0)
    assert np.abs(out[0, :, 0, 1]).max() > 0


def test_whole_map_roi_single_bin_grid_positions():
    plane = np.array([[1.0, 2.0], [3.0, 4.0]])
    x = plane.reshape(1, 1, 2, 2)
    spec = PoolSpec(1, 1, samples=2)
    out = mdpool_forward(x, [RoI(0, 0.0, 0.0, 1.0, 1.0)], spec, [BinField.identity(1)])
    # independent enumeration of the stated grid placement
    expected = np.mean([
        bilinear_sample(plane, (0.25, 0.25)),
        bilinear_sample(plane, (0.25, 0.75)),
        bilinear_sample(plane, (0.75, 0.25)),
        bilinear_sample(plane, (0.75, 0.75)),
    ])
    assert out[0, 0, 0, 0] == pytest.approx(expected)
    assert out[0, 0, 0, 0] == pytest.approx(2.5)


def test_matches_aligned_oracle_identity_field():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 9, 10))
    spec = PoolSpec(3, 2, samples=3)
    rois = [
        RoI(0, 0.7, 1.1, 8.2, 7.9),
        RoI(1, 2.0, 0.0, 9.0, 8.0),
        RoI(0, 4.0, 4.0, 4.0, 4.0),  # degenerate point RoI is valid
    ]
    got = aligned_pool_forward(x, rois, spec)
    want = aligned_roipool_oracle(x, rois, 3, 2, 3)
    assert np.abs(got - want).max() < 1e-5


def test_translation_invariance_away_from_borders():
    rng = np.random.default_rng(2)
    content = rng.normal(size=(3, 5, 5))
    x = np.zeros((1, 3, 16, 16))
    x[0, :, 3:8, 3:8] = content
    x2 = np.zeros((1, 3, 16, 16))
    x2[0, :, 6:11, 7:12] = content  # shifted by (3, 4)
    spec = PoolSpec(2, 2)
    field = BinField(rng.uniform(-0.5, 0.5, 8), rng.uniform(0.2, 1.0, 4))
    a = mdpool_forward(x, [RoI(0, 2.3, 2.6, 8.9, 8.1)], spec, [field])
    b = mdpool_forward(x2, [RoI(0, 6.3, 5.6, 12.9, 11.1)], spec, [field])
    assert np.abs(a - b).max() < 1e-10


def test_modulation_monotonicity_nonnegative_maps():
    rng = np.random.default_rng(3)
    x = np.abs(rng.normal(size=(1, 2, 8, 8)))
    spec = PoolSpec(2, 2)
    roi = RoI(0, 1.2, 1.4, 6.3, 6.1)
    offs = rng.uniform(-1, 1, 8)
    for _ in range(20):
        m1 = rng.uniform(0, 1, 4)
        m2 = m1.copy()
        bump = int(rng.integers(0, 4))
        m2[bump] = min(1.0, m1[bump] + rng.uniform(0, 1 - m1[bump] + 1e-12))
        o1 = mdpool_forward(x, [roi], spec, [BinField(offs, m1)])
        o2 = mdpool_forward(x, [roi], spec, [BinField(offs, m2)])
        by, bx = divmod(bump, 2)
        assert np.all(o2[0, :, by, bx] >= o1[0, :, by, bx] - 1e-12)


def test_batch_index_validated():
    x = np.zeros((1, 1, 4, 4))
    with pytest.raises(ArgumentError):
        mdpool_forward(x, [RoI(1, 0, 0, 2, 2)], PoolSpec(1, 1), [BinField.identity(1)])


def test_degenerate_roi_collapses_to_point():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 1, 6, 6))
    out = mdpool_forward(x, [RoI(0, 2.5, 3.5, 2.5, 3.5)], PoolSpec(2, 2),
                         [BinField.identity(4)])
    point = bilinear_sample(x[0, 0], (3.5, 2.5))
    assert np.allclose(out, point)


def test_gradcheck_mdpool_blocks():
    reports = run_gradcheck("mdpool", seeds=5)
    for rep in reports:
        assert {b.name for b in rep.blocks} == {"x", "offsets", "modulation"}
        assert rep.passed, rep.to_json()


def test_backward_zero_modulation_kills_grad_x():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 8, 8))
    spec = PoolSpec(1, 1)
    field = BinField(np.array([0.3, -0.4]), np.array([0.0]))
    upstream = rng.normal(size=(1, 2, 1, 1))
    gx, goff, gmod = mdpool_backward(x, [RoI(0, 1, 1, 6, 6)], spec, [field], upstream)
    assert np.all(gx == 0)
    assert np.all(goff == 0)
    assert np.abs(gmod).max() > 0


def test_backward_constant_input_zero_offset_grad():
    x = np.full((1, 2, 8, 8), 2.0)
    spec = PoolSpec(2, 2)
    rng = np.random.default_rng(6)
    field = BinField(rng.uniform(-0.5, 0.5, 8), rng.uniform(0.2, 0.9, 4))
    upstream = rng.normal(size=(1, 2, 2, 2))
    _, goff, _ = mdpool_backward(x, [RoI(0, 2, 2, 5.5, 5.5)], spec, [field], upstream)
    assert np.abs(goff).max() < 1e-9


def test_roi_branch_zero_init_gives_identity_field():
    rng = np.random.default_rng(7)
    fc1, fc2, out_w = make_roi_branch(in_dim=12, k=4, hidden=16, rng=rng)
    pooled = rng.normal(size=(3, 2, 2))
    field = roi_branch_forward(pooled, fc1, fc2, out_w, RoI(0, 0, 0, 10, 10))
    assert np.all(field.offsets == 0.0)
    assert np.all(field.modulation == 0.5)


def test_roi_branch_normalized_offsets_scale_with_roi():
    # force raw outputs: zero hidden path, bias drives the output layer
    fc1 = Affine(np.zeros((4, 8)), np.zeros(4))
    fc2 = Affine(np.zeros((4, 4)), np.zeros(4))
    raw = np.zeros(3)
    raw_bias = np.array([0.5, 0.5, 0.0])
    out_w = Affine(np.zeros((3, 4)), raw_bias)
    roi = RoI(0, 5.0, 5.0, 25.0, 15.0)  # height 10, width 20
    field = roi_branch_forward(np.zeros((2, 2, 2)), fc1, fc2, out_w, roi)
    assert field.offsets[0] == pytest.approx(5.0)   # dy = 0.5 * height
    assert field.offsets[1] == pytest.approx(10.0)  # dx = 0.5 * width
    assert field.modulation[0] == pytest.approx(0.5)


def test_roi_branch_default_hidden_width():
    fc1, fc2, out_w = make_roi_branch(in_dim=8, k=1)
    assert fc1.out_dim == 1024
    assert fc2.out_dim == 1024
    assert out_w.weight.shape == (3, 1024)
    assert np.all(out_w.weight == 0.0)


def test_roi_branch_gradcheck():
    reports = run_gradcheck("roi_branch", seeds=5)
    for rep in reports:
        assert rep.passed, rep.to_json()
    names = {b.name for b in reports[0].blocks}
    assert names == {"pooled", "fc1_weight", "fc1_bias", "fc2_weight", "fc2_bias",
                     "out_weight", "out_bias"}


def test_roi_branch_backward_shapes():
    rng = np.random.default_rng(8)
    fc1, fc2, out_w = make_roi_branch(in_dim=12, k=4, hidden=16, rng=rng)
    out_w = Affine(rng.normal(size=out_w.weight.shape) * 0.1, rng.normal(size=12) * 0.1)
    pooled = rng.normal(size=(3, 2, 2))
    roi = RoI(0, 1, 1, 9, 7)
    field, cache = roi_branch_forward(pooled, fc1, fc2, out_w, roi, want_cache=True)
    gp, (gw1, gb1), (gw2, gb2), (gwo, gbo) = roi_branch_backward(
        fc1, fc2, out_w, cache, np.ones(8), np.ones(4))
    assert gp.shape == pooled.shape
    assert gw1.shape == fc1.weight.shape and gb1.shape == fc1.bias.shape
    assert gw2.shape == fc2.weight.shape and gb2.shape == fc2.bias.shape
    assert gwo.shape == out_w.weight.shape and gbo.shape == out_w.bias.shape


def test_roi_file_round_trip():
    rois = [RoI(0, 1.5, 2.25, 10.0, 12.5), RoI(3, 0.0, 0.0, 4.0, 4.0)]
    text = format_roi_lines(rois)
    back = parse_roi_lines(text)
    assert back == rois


def test_roi_file_rejects_malformed_line():
    with pytest.raises(ArgumentError):
        parse_roi_lines("0 1 2 3\n")
    with pytest.raises(ArgumentError):
        parse_roi_lines("0 a b c d\n")


def test_roi_invariants():
    with pytest.raises(ArgumentError):
        RoI(0, 5.0, 0.0, 4.0, 1.0)  # x2 < x1


def test_field_count_must_match_rois():
    with pytest.raises(ShapeError):
        mdpool_forward(np.zeros((1, 1, 4, 4)), [RoI(0, 0, 0, 2, 2)], PoolSpec(1, 1), [])
