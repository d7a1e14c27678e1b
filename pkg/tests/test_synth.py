import numpy as np

from scrsdm import synth
from scrsdm.dataio import interocular_distance


def test_dataset_shapes_and_ids(tiny_faces, scheme):
    samples, pts68 = tiny_faces
    assert len(samples) == 24 and len(pts68) == 24
    assert samples[0].id == "s000_00" and samples[-1].id == "s007_02"
    assert len({s.subject for s in samples}) == 8
    for s, p in zip(samples, pts68):
        assert s.image.shape == (160, 160) and 0 <= s.image.min() and s.image.max() <= 1
        assert p.shape == (68, 2)
        assert np.array_equal(s.ground_truth, p[list(scheme.from_68)])
        assert 40 < interocular_distance(s.ground_truth, scheme) < 80


def test_deterministic():
    a, _ = synth.make_dataset(1, 2, seed=4, size=128)
    b, _ = synth.make_dataset(1, 2, seed=4, size=128)
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.ground_truth, y.ground_truth) for x, y in zip(a, b))


def test_landmarks_sit_on_structure(tiny_faces):
    # eye centres are darker than the surrounding skin
    samples, pts68 = tiny_faces
    for s, p in zip(samples[:6], pts68[:6]):
        eye = p[36:42].mean(0)
        cheek = p[[1, 2, 3]].mean(0) * 0.5 + p[31] * 0.5
        r, c = int(round(eye[1])), int(round(eye[0]))
        rc, cc = int(round(cheek[1])), int(round(cheek[0]))
        assert s.image[r - 1:r + 2, c - 1:c + 2].mean() < s.image[rc - 1:rc + 2, cc - 1:cc + 2].mean()
