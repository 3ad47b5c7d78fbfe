import numpy as np
import pytest

from voxmamba.network import ModelConfig, build_model
from voxmamba.pipeline import (AxisOps, CompatibilityError, PatchGrid, PipelineError, SegmentConfig,
                               coverage_count, crop_or_pad, extract_patches, hippocampus_crop,
                               hippocampus_offset, make_grid, preprocess, reconstruct_votes,
                               rescale_intensity, restore_geometry, segment_hippocampus, segment_volume)
from voxmamba.volumes import ClassTable, LabelMap, Volume


@pytest.fixture(scope="module")
def small_model():
    return build_model(ModelConfig.desk_scale(patch_size=16, n_classes=4, state_dim=4), seed=0)


# -- preprocessing ----------------------------------------------------------------

def test_rescale_examples():
    assert not rescale_intensity(np.full((3, 3, 3), 7.0)).any()
    out = rescale_intensity(np.array([10.0, 20.0, 30.0]).reshape(1, 1, 3))
    assert out.ravel().tolist() == [0.0, 0.5, 1.0]
    with pytest.raises(ValueError):
        rescale_intensity(np.array([[[np.nan]]]))


def test_center_crop_260_to_256():
    v = Volume(np.random.default_rng(0).random((260, 10, 9)))
    out = preprocess(v, (256, 10, 9))
    info = out.meta["preprocess"]
    assert out.dims == (256, 10, 9) and info["crop_pad"][0] == (2, 0)
    assert np.array_equal(out.data, rescale_intensity(v.data)[2:258])


def test_pad_and_restore_geometry(rng):
    a = rng.integers(0, 5, size=(7, 4, 6))
    ops = AxisOps.parse("2,-0,1")
    v = Volume(a.astype(np.float32))
    pre = preprocess(v, (8, 3, 6), ops)
    assert pre.dims == (8, 3, 6) and pre.data.min() >= 0 and pre.data.max() <= 1
    # map labels through the same geometry, then invert
    labels = crop_or_pad(ops.apply(a), (8, 3, 6))
    back = restore_geometry(labels, pre.meta["preprocess"])
    assert back.shape == a.shape
    kept = restore_geometry(np.ones((8, 3, 6), int), pre.meta["preprocess"]).astype(bool)
    assert np.array_equal(back[kept], a[kept])


def test_axis_ops_parse_and_invert(rng):
    ops = AxisOps.parse("1, -2, 0")
    assert ops.permutation == (1, 2, 0) and ops.flips == (False, True, False)
    a = rng.random((2, 3, 4))
    assert ops.apply(a).shape == (3, 4, 2)
    assert np.array_equal(ops.invert(ops.apply(a)), a)
    for bad in ("0,1", "0,0,1"):
        with pytest.raises(ValueError):
            AxisOps.parse(bad)


# -- grid ---------------------------------------------------------------------------

def test_grid_examples():
    assert make_grid(128, 96, 16) == [0, 16, 32]
    assert make_grid(256, 96, 16) == list(range(0, 161, 16))
    assert make_grid(96, 96, 7) == [0]
    assert make_grid(100, 96, 16) == [0, 4]  # clamped final offset
    with pytest.raises(ValueError):
        make_grid(64, 96, 16)


@pytest.mark.parametrize("dim,p,s", [(128, 96, 16), (256, 96, 32), (100, 32, 30), (48, 32, 16), (33, 8, 5)])
def test_grid_invariants(dim, p, s):
    o = make_grid(dim, p, s)
    assert o == sorted(set(o)) and o[0] == 0 and o[-1] == dim - p
    assert all(b - a <= s for a, b in zip(o, o[1:]))
    covered = np.zeros(dim, bool)
    for x in o:
        covered[x:x + p] = True
    assert covered.all()
    closed = (dim - p) // s + 1 + (1 if (dim - p) % s else 0)
    assert len(o) == closed


def test_patch_counts():
    assert PatchGrid.for_dims((128,) * 3, 96, 16).n_patches == 27
    assert PatchGrid.for_dims((256,) * 3, 96, 16).n_patches == 1331
    assert PatchGrid.for_dims((256,) * 3, 96, 32).n_patches == 216


def test_extract_patches_content_and_coverage(rng):
    v = Volume(rng.random((20, 18, 16)))
    grid = PatchGrid.for_dims(v.dims, 8, 5)
    patches = extract_patches(v, grid)
    assert len(patches) == grid.n_patches
    for (z, y, x), t in patches:
        assert np.array_equal(t.data[0], v.data[z:z + 8, y:y + 8, x:x + 8])
    assert coverage_count(v.dims, grid).min() >= 1
    single = extract_patches(Volume(rng.random((8, 8, 8))), PatchGrid.for_dims((8, 8, 8), 8, 3))
    assert len(single) == 1 and single[0][0] == (0, 0, 0)


# -- voting -------------------------------------------------------------------------

def one_hot_patches(labels, K, p, s):
    grid = PatchGrid.for_dims(labels.shape, p, s)
    eye = np.eye(K, dtype=np.float32)
    for z, y, x in grid.origins():
        sub = labels[z:z + p, y:y + p, x:x + p]
        yield (z, y, x), np.moveaxis(eye[sub], -1, 0)


@pytest.mark.parametrize("s", [16, 32])
def test_vote_identity(rng, s):
    labels = rng.integers(0, 5, size=(64, 48, 40))
    lm = reconstruct_votes(one_hot_patches(labels, 5, 32, s), labels.shape)
    assert np.array_equal(lm.indices, labels)


def test_vote_hand_accumulation_and_ties():
    a = np.zeros((2, 1, 1, 2), np.float32)
    a[:, 0, 0, 0] = [0.6, 0.4]
    a[:, 0, 0, 1] = [0.5, 0.5]
    b = np.zeros((2, 1, 1, 1), np.float32)
    b[:, 0, 0, 0] = [0.3, 0.7]
    lm = reconstruct_votes([((0, 0, 0), a), ((0, 0, 1), b)], (1, 1, 2))
    # voxel 1 sums to (0.8, 1.2) -> class 1; voxel 0 keeps (0.6, 0.4) -> class 0
    assert lm.indices.ravel().tolist() == [0, 1]
    tie = reconstruct_votes([((0, 0, 0), np.full((3, 1, 1, 1), 1 / 3, np.float32))], (1, 1, 1))
    assert tie.indices.item() == 0


def test_vote_errors():
    p = np.ones((2, 2, 2, 2), np.float32) / 2
    with pytest.raises(PipelineError):
        reconstruct_votes([((0, 0, 0), p)], (3, 2, 2))
    with pytest.raises(ValueError):
        reconstruct_votes([((1, 0, 0), p)], (2, 2, 2))
    with pytest.raises(CompatibilityError):
        reconstruct_votes([((0, 0, 0), p)], (2, 2, 2), ClassTable.generic(3))


# -- inference ------------------------------------------------------------------------

def test_segment_volume_deterministic(small_model, rng):
    v = Volume(rng.random((32, 32, 24)) * 100)
    cfg = SegmentConfig(ClassTable.generic(4), stride=8)
    a = segment_volume(small_model, v, cfg)
    b = segment_volume(small_model, v, SegmentConfig(ClassTable.generic(4), stride=8, threads=3))
    assert a.dims == v.dims and np.array_equal(a.indices, b.indices)
    assert set(np.unique(a.indices)) <= set(range(4))
    assert a.meta["n_patches"] == 3 * 3 * 2 and small_model.training  # mode restored afterwards


def test_segment_volume_with_geometry(small_model, rng):
    v = Volume(rng.random((20, 30, 18)))
    cfg = SegmentConfig(ClassTable.generic(4), stride=16, target_dims=(16, 32, 32), axis_ops=AxisOps.parse("1,0,-2"))
    out = segment_volume(small_model, v, cfg)
    assert out.dims == v.dims


def test_segment_volume_errors(small_model):
    with pytest.raises(CompatibilityError):
        segment_volume(small_model, Volume(np.zeros((16, 16, 16))), SegmentConfig(ClassTable.generic(5)))
    with pytest.raises(CompatibilityError):
        segment_volume(small_model, Volume(np.zeros((8, 16, 16))), SegmentConfig(ClassTable.generic(4)))


def hippo_seg(dims, lo, hi):
    t = ClassTable.generic(5, hippocampus=(3, 4))
    idx = np.zeros(dims, int)
    idx[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:(lo[2] + hi[2]) // 2] = 3
    idx[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, (lo[2] + hi[2]) // 2:hi[2] + 1] = 4
    return LabelMap(idx, t)


def test_hippocampus_offset_centroid_and_clamp():
    seg = hippo_seg((64, 64, 64), (20, 24, 30), (29, 33, 41))
    # centre (24.5, 28.5, 35.5) rounds half up, minus p/2 = 8
    assert hippocampus_offset(seg, 16) == (17, 21, 28)
    corner = hippo_seg((64, 64, 64), (0, 1, 0), (3, 4, 5))
    assert hippocampus_offset(corner, 16) == (0, 0, 0)
    far = hippo_seg((64, 64, 64), (60, 60, 58), (63, 63, 63))
    assert hippocampus_offset(far, 16) == (48, 48, 48)


def test_hippocampus_errors():
    empty = LabelMap(np.zeros((32, 32, 32), int), ClassTable.generic(5, hippocampus=(3, 4)))
    with pytest.raises(PipelineError):
        hippocampus_offset(empty, 16)
    big = hippo_seg((64, 64, 64), (0, 0, 0), (20, 5, 5))
    with pytest.raises(PipelineError, match="exceeds"):
        hippocampus_offset(big, 16)
    no_roles = LabelMap(np.ones((32, 32, 32), int), ClassTable.generic(5))
    with pytest.raises(PipelineError):
        hippocampus_offset(no_roles, 16)


def test_hippocampus_crop_content(rng):
    seg = hippo_seg((40, 40, 40), (10, 10, 10), (14, 14, 14))
    v = Volume(rng.random((40, 40, 40)))
    o, patch = hippocampus_crop(seg, v, 16)
    assert patch.shape == (1, 16, 16, 16)
    assert np.array_equal(patch.data[0], v.data[o[0]:o[0] + 16, o[1]:o[1] + 16, o[2]:o[2] + 16])


def test_segment_hippocampus_placement(small_model, rng):
    seg = hippo_seg((40, 40, 40), (10, 12, 14), (15, 17, 19))
    v = Volume(rng.random((40, 40, 40)))
    t = ClassTable.generic(4)
    a = segment_hippocampus(small_model, v, seg, t)
    b = segment_hippocampus(small_model, v, seg, t)
    assert a.dims == v.dims and np.array_equal(a.indices, b.indices)
    o = a.meta["hippocampus_offset"]
    outside = np.ones(v.dims, bool)
    outside[o[0]:o[0] + 16, o[1]:o[1] + 16, o[2]:o[2] + 16] = False
    assert not a.indices[outside].any()
    with pytest.raises(CompatibilityError):
        segment_hippocampus(small_model, v, seg, ClassTable.generic(3))
