import numpy as np
import pytest

from mrfcount.data import (Annotation, CrowdDataset, bilinear_resize,
                           dataset_from_arrays, horizontal_flip, load_annotations,
                           load_dataset, load_image, make_priors,
                           points_in_rect, sample_training_patches,
                           save_annotations, synth_generate, tile_image,
                           write_synth_dataset)

# chi-square critical value, 15 degrees of freedom at p = 0.001
CHI2_CRIT_15 = 37.6973


def write_annotation_file(tmp_path, lines, with_images=True):
    path = tmp_path / "annotations.tsv"
    path.write_text("\n".join(lines) + "\n")
    if with_images:
        from PIL import Image

        for line in lines:
            name, w, h = line.split("\t")[:3]
            img_path = tmp_path / name
            img_path.parent.mkdir(parents=True, exist_ok=True)
            Image.new("RGB", (int(w), int(h))).save(img_path)
    return path


# -- annotations -------------------------------------------------------------------


def test_load_annotations_three_points(tmp_path):
    path = write_annotation_file(
        tmp_path, ["img.png\t100\t80\t1.5,2.5;10,20;99,79"])
    anns = load_annotations(path)
    assert len(anns) == 1 and anns[0].count == 3
    np.testing.assert_allclose(anns[0].points[0], [1.5, 2.5])


def test_load_annotations_empty_points(tmp_path):
    path = write_annotation_file(tmp_path, ["img.png\t64\t64\t"])
    anns = load_annotations(path)
    assert anns[0].count == 0


def test_load_annotations_rejects_boundary_point(tmp_path):
    # bounds are half-open: x == width is outside
    path = write_annotation_file(tmp_path, ["img.png\t100\t80\t100,40"])
    with pytest.raises(ValueError) as exc:
        load_annotations(path)
    assert "line 1" in str(exc.value)


def test_load_annotations_parse_error_has_line_number(tmp_path):
    path = write_annotation_file(
        tmp_path, ["img.png\t64\t64\t", "img.png\t64\t64\t3;4"])
    with pytest.raises(ValueError) as exc:
        load_annotations(path)
    assert "line 2" in str(exc.value)


def test_load_annotations_missing_image(tmp_path):
    path = write_annotation_file(tmp_path, ["gone.png\t64\t64\t"],
                                 with_images=False)
    with pytest.raises(FileNotFoundError):
        load_annotations(path)
    assert len(load_annotations(path, check_images=False)) == 1


def test_annotations_save_load_roundtrip(tmp_path):
    anns = [Annotation("img.png", 50, 40,
                       np.array([[0.123456789, 39.999999], [12.0, 3.0]]))]
    path = tmp_path / "a.tsv"
    save_annotations(path, anns)
    (tmp_path / "img.png").write_bytes(b"")
    back = load_annotations(path, check_images=False)
    np.testing.assert_array_equal(back[0].points, anns[0].points)


# -- tiling ------------------------------------------------------------------------


def test_tile_512x384_gives_12_patches():
    img = np.zeros((384, 512, 3), dtype=np.float32)
    assert len(tile_image(img, None, 128)) == 12


def test_tile_500x300_pads_to_12_patches():
    img = np.ones((300, 500, 3), dtype=np.float32)
    patches = tile_image(img, None, 128)
    assert len(patches) == 12
    # padded region is zero-filled
    right_edge = [p for p in patches if p.origin == (384, 0)][0]
    assert right_edge.pixels[:, :, 116:].sum() == 0.0


def test_tile_counts_partition_points():
    rng = np.random.default_rng(0)
    points = np.column_stack([rng.uniform(0, 500, 57), rng.uniform(0, 300, 57)])
    ann = Annotation("x", 500, 300, points)
    img = np.zeros((300, 500, 3), dtype=np.float32)
    patches = tile_image(img, ann, 128)
    assert sum(p.count for p in patches) == 57


def test_tile_half_open_boundaries():
    # a point exactly on an interior patch edge belongs to the right/lower patch
    ann = Annotation("x", 256, 256, np.array([[128.0, 10.0]]))
    img = np.zeros((256, 256, 3), dtype=np.float32)
    patches = {p.origin: p.count for p in tile_image(img, ann, 128)}
    assert patches[(128, 0)] == 1 and patches[(0, 0)] == 0


def test_points_in_rect_half_open():
    pts = np.array([[0.0, 0.0], [10.0, 5.0], [9.9999, 9.9999]])
    assert points_in_rect(pts, 0, 0, 10) == 2


# -- priors -------------------------------------------------------------------------


def patch_from(pixels):
    from mrfcount.data import PatchSample

    return PatchSample(pixels=pixels.astype(np.float32), count=3,
                       image_id="x", origin=(0, 0))


def test_make_priors_shapes():
    trip = make_priors(patch_from(np.zeros((3, 128, 128))))
    assert trip.i1.shape == (3, 256, 256)
    assert trip.i2.shape == (3, 128, 128)
    assert trip.i3.shape == (3, 64, 64)
    assert trip.count == 3


def test_make_priors_constant_patch():
    trip = make_priors(patch_from(np.full((3, 64, 64), 0.37)))
    np.testing.assert_allclose(trip.i1, 0.37, atol=1e-6)
    np.testing.assert_allclose(trip.i3, 0.37, atol=1e-6)


def test_downscale_of_blockwise_constant_is_exact():
    rng = np.random.default_rng(1)
    blocks = rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
    i2 = np.repeat(np.repeat(blocks, 2, axis=1), 2, axis=2)
    trip = make_priors(patch_from(i2))
    np.testing.assert_allclose(trip.i3, blocks, atol=1e-6)


def test_bilinear_resize_half_pixel_row():
    row = np.array([[[0.0, 1.0]]])
    out = bilinear_resize(row, 1, 4)
    np.testing.assert_allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0])


def test_flip_involution_and_count():
    rng = np.random.default_rng(2)
    p = patch_from(rng.uniform(0, 1, (3, 16, 16)))
    flipped = horizontal_flip(p)
    assert flipped.count == p.count
    assert not np.array_equal(flipped.pixels, p.pixels)
    np.testing.assert_array_equal(horizontal_flip(flipped).pixels, p.pixels)


def test_flip_commutes_with_priors():
    rng = np.random.default_rng(3)
    p = patch_from(rng.uniform(0, 1, (3, 32, 32)))
    a = make_priors(horizontal_flip(p))
    b = make_priors(p)
    np.testing.assert_allclose(a.i1, b.i1[:, :, ::-1], atol=1e-6)
    np.testing.assert_allclose(a.i3, b.i3[:, :, ::-1], atol=1e-6)


# -- sampling -----------------------------------------------------------------------


def synth_dataset(n=5, extent=256, counts=(5, 15), seed=0):
    images, anns = synth_generate(n, extent, counts, 5.0, seed)
    return dataset_from_arrays(images, anns)


def test_sampling_deterministic_under_seed():
    ds = synth_dataset()
    a = sample_training_patches(ds, 10, seed=5)
    b = sample_training_patches(ds, 10, seed=5)
    assert len(a) == len(b)
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa.pixels, pb.pixels)
        assert pa.count == pb.count and pa.origin == pb.origin


def test_augmentation_doubles_sample_count():
    ds = synth_dataset()
    samples = sample_training_patches(ds, 10, seed=6, augment=True)
    assert len(samples) == 20
    bare = sample_training_patches(ds, 10, seed=6, augment=False)
    assert len(bare) == 10


def test_sampled_patches_are_resized_to_patch_side():
    ds = synth_dataset(extent=512)
    for s in sample_training_patches(ds, 20, seed=7):
        assert s.pixels.shape == (3, 128, 128)


def test_sampled_counts_bounded_by_image_totals():
    ds = synth_dataset()
    totals = {a.image_id: a.count for a in ds.annotations}
    for s in sample_training_patches(ds, 30, seed=8):
        assert 0 <= s.count <= totals[s.image_id]


@pytest.mark.parametrize("seed", [9, 123, 4096])
def test_sampled_origins_roughly_uniform(seed):
    # chi-square over a 4x4 grid of origins at a single source scale
    ds = synth_dataset(n=1, extent=640)
    samples = sample_training_patches(ds, 1600, seed=seed, scales=(1.0,),
                                      augment=False)
    span = 640 - 128 + 1
    grid = np.zeros((4, 4))
    for s in samples:
        gx = min(int(s.origin[0] * 4 / span), 3)
        gy = min(int(s.origin[1] * 4 / span), 3)
        grid[gy, gx] += 1
    expected = len(samples) / 16
    chi2 = ((grid - expected) ** 2 / expected).sum()
    assert chi2 < CHI2_CRIT_15


# -- synthesis ----------------------------------------------------------------------


def test_synth_zero_count_range_gives_blank_annotations():
    images, anns = synth_generate(3, 128, (0, 0), 5.0, seed=1)
    assert all(a.count == 0 for a in anns)


def test_synth_deterministic():
    a_imgs, a_anns = synth_generate(3, 96, (2, 9), 4.0, seed=11)
    b_imgs, b_anns = synth_generate(3, 96, (2, 9), 4.0, seed=11)
    for x, y in zip(a_imgs, b_imgs):
        np.testing.assert_array_equal(x, y)
    for x, y in zip(a_anns, b_anns):
        np.testing.assert_array_equal(x.points, y.points)


def test_synth_mean_count_matches_uniform_expectation():
    _, anns = synth_generate(1000, 64, (10, 20), 3.0, seed=12)
    mean = np.mean([a.count for a in anns])
    assert abs(mean - 15.0) < 0.5


def test_synth_points_inside_bounds():
    _, anns = synth_generate(10, (200, 100), (5, 25), 5.0, seed=13)
    for a in anns:
        assert np.all(a.points[:, 0] >= 0) and np.all(a.points[:, 0] < 200)
        assert np.all(a.points[:, 1] >= 0) and np.all(a.points[:, 1] < 100)


def test_synth_write_and_load_roundtrip(tmp_path):
    images, anns = synth_generate(4, 96, (1, 6), 4.0, seed=14)
    ann_path = write_synth_dataset(tmp_path, images, anns)
    ds = load_dataset(ann_path)
    assert len(ds) == 4
    np.testing.assert_allclose(ds.images[0],
                               images[0].astype(np.float32) / 255.0)
    assert [a.count for a in ds.annotations] == [a.count for a in anns]


def test_count_conservation_across_extents():
    rng = np.random.default_rng(15)
    for _ in range(10):
        w = int(rng.integers(100, 500))
        h = int(rng.integers(100, 400))
        images, anns = synth_generate(1, (w, h), (0, 40), 4.0,
                                      seed=int(rng.integers(1 << 30)))
        patches = tile_image(images[0].astype(np.float32) / 255.0, anns[0], 128)
        assert sum(p.count for p in patches) == anns[0].count
