import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scrsdm import dataio
from scrsdm.dataio import (AnnotatedSample, AnnotationError, LandmarkScheme, canonical_scheme, extract_patch,
                           extract_patches, interocular_distance, load_annotated_set, read_pts, save_image,
                           split_by_subject, to_scheme, write_pts)

EXPECTED_FROM_68 = list(range(17, 60)) + [61, 62, 63, 65, 66, 67]


def test_canonical_scheme_layout(scheme):
    assert scheme.n_points == 49
    assert list(scheme.from_68) == EXPECTED_FROM_68
    assert scheme.group_sizes == {"eyebrows": 10, "nose": 9, "eye_right": 6, "eye_left": 6, "mouth": 18}
    # outer eye corners of the 68-point layout
    a, b = scheme.interocular
    assert (scheme.from_68[a], scheme.from_68[b]) == (36, 45)


def test_partition_every_index_once(scheme):
    idx = sorted(i for g in scheme.neighborhoods.values() for i in g)
    assert idx == list(range(49))


def test_scheme_rejects_overlap():
    with pytest.raises(ValueError, match="partition"):
        LandmarkScheme("bad", 3, {"a": (0, 1), "b": (1, 2)}, (0, 2))
    with pytest.raises(ValueError, match="interocular"):
        LandmarkScheme("bad", 3, {"a": (0, 1, 2)}, (1, 1))


def test_scheme_dict_round_trip(scheme):
    assert LandmarkScheme.from_dict(scheme.to_dict()) == scheme


def test_interocular_345(scheme):
    shape = np.zeros((49, 2))
    a, b = scheme.interocular
    shape[b] = (3, 4)
    assert interocular_distance(shape, scheme) == 5.0
    assert interocular_distance(2 * shape, scheme) == 10.0


def test_interocular_degenerate(scheme):
    with pytest.raises(ValueError, match="zero"):
        interocular_distance(np.ones((49, 2)), scheme)


@given(arrays(np.float64, st.tuples(st.integers(1, 70), st.just(2)), elements=st.floats(-1e6, 1e6)))
def test_vectorize_round_trip(points):
    v = dataio.vectorize(points)
    assert v.shape == (2 * len(points),)
    assert np.array_equal(v[:2], points[0])
    assert np.array_equal(dataio.devectorize(v), points)


def test_pts_round_trip_and_subset(tmp_path, scheme):
    pts = np.column_stack([np.arange(68) * 1.5, np.arange(68) * 0.25 + 3])
    write_pts(tmp_path / "a.pts", pts)
    back = read_pts(tmp_path / "a.pts")
    assert np.allclose(back, pts, atol=1e-6)
    sub = to_scheme(back, scheme)
    assert sub.shape == (49, 2)
    assert np.allclose(sub[0], pts[17], atol=1e-6)
    assert np.allclose(sub[-1], pts[67], atol=1e-6)


@pytest.mark.parametrize("text", ["", "version: 1\nn_points: 2\n{\n1 2\n}\n", "n_points: 1\n{\n1 x\n}\n",
                                  "version: 1\nn_points: 1\n{\n1 nan\n}\n"])
def test_malformed_pts_names_file(tmp_path, text):
    p = tmp_path / "broken.pts"
    p.write_text(text)
    with pytest.raises(AnnotationError, match="broken.pts"):
        read_pts(p)


def test_to_scheme_rejects_wrong_count(scheme):
    with pytest.raises(AnnotationError):
        to_scheme(np.zeros((5, 2)), scheme)


def test_empty_directory(tmp_path):
    assert load_annotated_set(tmp_path) == []


def test_load_set_pairs_and_bounds(tmp_path, scheme, caplog):
    img = np.linspace(0, 1, 80 * 100).reshape(80, 100)
    pts = np.column_stack([np.linspace(10, 90, 68), np.linspace(5, 70, 68)])
    save_image(tmp_path / "s1_0.png", img)
    write_pts(tmp_path / "s1_0.pts", pts)
    save_image(tmp_path / "lonely.png", img)
    with caplog.at_level("WARNING"):
        samples = load_annotated_set(tmp_path)
    assert [s.id for s in samples] == ["s1_0"]
    assert "lonely" in caplog.text
    assert samples[0].ground_truth.shape == (49, 2)
    assert np.abs(samples[0].image - img).max() <= 0.5 / 255 + 1e-12

    write_pts(tmp_path / "s1_0.pts", pts + [0, 20])
    with pytest.raises(AnnotationError, match="s1_0"):
        load_annotated_set(tmp_path)


def test_rgb_luma(tmp_path):
    from PIL import Image

    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    rgb[..., 0] = 255
    Image.fromarray(rgb).save(tmp_path / "r.png")
    assert np.allclose(dataio.load_image(tmp_path / "r.png"), 0.299)


def test_subject_key():
    s = AnnotatedSample(np.zeros((2, 2)), np.zeros((1, 2)), "s012_03")
    assert s.subject == "s012"
    assert AnnotatedSample(np.zeros((2, 2)), np.zeros((1, 2)), "plain").subject == "plain"


def test_split_by_subject_is_disjoint(tiny_faces):
    samples, _ = tiny_faces
    rest, held = split_by_subject(samples, 0.25, seed=4)
    assert {s.subject for s in rest}.isdisjoint({s.subject for s in held})
    assert len({s.subject for s in held}) == 2
    assert len(rest) + len(held) == len(samples)
    assert [s.id for s in split_by_subject(samples, 0.25, seed=4)[1]] == [s.id for s in held]


# -- patches --------------------------------------------------------------------

def test_constant_patch():
    img = np.full((40, 50), 0.5)
    assert np.all(extract_patch(img, (3.2, 17.9)) == 0.5)


def test_patch_interior_matches_crop(rng):
    img = rng.random((100, 120))
    patch = extract_patch(img, (60, 50), 32)
    assert np.array_equal(patch, img[34:66, 44:76])


def test_patch_rounding_half_up(rng):
    img = rng.random((60, 60))
    assert np.array_equal(extract_patch(img, (30.5, 29.5)), img[14:46, 15:47])


def test_patch_corner_replicates_edge():
    img = np.add.outer(np.arange(20.0), 100 * np.arange(20.0))  # value = row + 100*col
    patch = extract_patch(img, (0, 0), 8)
    # rows -4..3 and cols -4..3 are clamped to 0
    assert np.array_equal(patch[:5, :5], np.zeros((5, 5)))
    assert np.array_equal(patch[4, :], np.r_[np.zeros(4), 100 * np.arange(4.0)])
    assert np.array_equal(patch[:, 4], np.r_[np.zeros(4), np.arange(4.0)])


@settings(max_examples=40, deadline=None)
@given(st.integers(16, 40), st.integers(16, 40), st.integers(-10, 10), st.integers(-10, 10))
def test_patch_translation_consistent(cx, cy, dx, dy):
    img = np.random.default_rng(cx * 100 + cy).random((100, 100))
    shifted = np.roll(img, (dy, dx), axis=(0, 1))
    a = extract_patch(img, (cx + 20, cy + 20), 16)
    b = extract_patch(shifted, (cx + 20 + dx, cy + 20 + dy), 16)
    assert np.array_equal(a, b)


def test_patch_side_validation():
    with pytest.raises(ValueError):
        extract_patches(np.zeros((10, 10)), [(5, 5)], 7)


def test_batched_patches_match_single(rng):
    img = rng.random((64, 64))
    centers = rng.uniform(-5, 70, size=(6, 2))
    batch = extract_patches(img, centers, 16)
    for c, p in zip(centers, batch):
        assert np.array_equal(p, extract_patch(img, c, 16))
