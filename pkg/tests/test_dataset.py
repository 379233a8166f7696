import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deoccl.dataset import (
    DatasetError,
    DatasetSplit,
    DegenerateEyeRegion,
    LandmarkDetector,
    LandmarkSet,
    MaskSpec,
    NoFaceError,
    ProviderUnavailable,
    SampleSource,
    SessionManifest,
    SessionSource,
    SyntheticLandmarkProvider,
    batch_iter,
    get_provider,
    ingest_session,
    iter_batches,
    make_sample,
    read_manifest,
    split_sessions,
    synthesize_hmd_mask,
    synthesize_session_masks,
)
from deoccl.imaging import BinaryMask, ImageTensor, save_image, save_mask
from deoccl.synthetic import toy_face, write_toy_session


def box_oracle(x0, y0, x1, y1, size):
    """Pixel (px, py) covers [px, px+1) x [py, py+1); it is masked when that
    cell touches the continuous box."""
    out = np.zeros((size, size), np.float32)
    for py in range(size):
        for px in range(size):
            if px + 1 > x0 and px <= x1 and py + 1 > y0 and py <= y1:
                out[py, px] = 1
    return out


def eye_landmarks(points):
    return LandmarkSet(points, "test", tuple(range(len(points))))


def test_degenerate_eye_region():
    with pytest.raises(DegenerateEyeRegion):
        synthesize_hmd_mask(eye_landmarks([(60, 100), (196, 100)]), MaskSpec(0, 0), 256)


def test_mask_box_example():
    lm = eye_landmarks([(60, 90), (196, 120), (120, 100)])
    mask = synthesize_hmd_mask(lm, MaskSpec(0.1, 0.5), 256).data[0]
    ys, xs = np.nonzero(mask)
    assert (xs.min(), ys.min(), xs.max(), ys.max()) == (46, 75, 209, 135)
    w, h = 136, 30
    np.testing.assert_array_equal(mask, box_oracle(60 - 0.1 * w, 90 - 0.5 * h, 196 + 0.1 * w, 120 + 0.5 * h, 256))


eye_points = st.lists(
    st.tuples(st.floats(0, 63), st.floats(0, 63)), min_size=2, max_size=8
).filter(lambda pts: max(p[0] for p in pts) > min(p[0] for p in pts) and max(p[1] for p in pts) > min(p[1] for p in pts))


@settings(max_examples=60, deadline=None)
@given(
    pts=eye_points,
    hm=st.floats(0, 1.5),
    vm=st.floats(0, 1.5),
    shape=st.sampled_from(["rectangle", "rounded-rectangle"]),
    perm_seed=st.integers(0, 1000),
)
def test_mask_contains_eyes_and_ignores_order(pts, hm, vm, shape, perm_seed):
    spec = MaskSpec(hm, vm, shape)
    try:
        mask = synthesize_hmd_mask(eye_landmarks(pts), spec, 64)
    except DegenerateEyeRegion:
        return  # box swallowed the whole frame
    assert set(np.unique(mask.data)) <= {0.0, 1.0}
    for x, y in pts:
        assert mask.data[0, int(math.floor(y)), int(math.floor(x))] == 1
    shuffled = [pts[i] for i in np.random.default_rng(perm_seed).permutation(len(pts))]
    np.testing.assert_array_equal(synthesize_hmd_mask(eye_landmarks(shuffled), spec, 64).data, mask.data)
    if shape == "rectangle":
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
        w, h = max(xs) - min(xs), max(ys) - min(ys)
        expect = box_oracle(min(xs) - hm * w, min(ys) - vm * h, max(xs) + hm * w, max(ys) + vm * h, 64)
        np.testing.assert_array_equal(mask.data[0], expect)


def test_rounded_rectangle_cuts_corners():
    lm = eye_landmarks([(20, 28), (44, 36)])
    rect = synthesize_hmd_mask(lm, MaskSpec(0.5, 1.0), 64).data[0]
    rounded = synthesize_hmd_mask(lm, MaskSpec(0.5, 1.0, "rounded-rectangle"), 64).data[0]
    ys, xs = np.nonzero(rect)
    assert rect[ys.min(), xs.min()] == 1 and rounded[ys.min(), xs.min()] == 0
    assert np.all(rounded <= rect)


class CountingProvider:
    schema_id = "counting"
    eye_indices = (0, 1)

    def __init__(self, points=((10.0, 10.0), (20.0, 14.0), (15.0, 25.0)), face=True):
        self.points, self.face, self.calls = list(points), face, 0

    def __call__(self, img):
        self.calls += 1
        return self.points if self.face else None


def test_detect_landmarks_pass_through_and_cache():
    provider = CountingProvider()
    det = LandmarkDetector(provider)
    img = ImageTensor(np.zeros((3, 32, 32), np.float32))
    lm = det(img, "f0")
    assert lm.points == tuple(provider.points) and lm.schema_id == "counting"
    assert det(img, "f0") is lm
    assert provider.calls == 1


def test_detect_landmarks_no_face():
    det = LandmarkDetector(CountingProvider(face=False))
    img = ImageTensor(np.zeros((3, 32, 32), np.float32))
    with pytest.raises(NoFaceError):
        det(img, "a")
    with pytest.raises(NoFaceError):
        det(img, "b")
    assert det.skipped == 2
    with pytest.raises(ProviderUnavailable):
        get_provider("dlib-68")


def test_make_sample_examples():
    gt = toy_face(32, 0)
    zero = BinaryMask(np.zeros((1, 32, 32), np.float32))
    full = BinaryMask(np.ones((1, 32, 32), np.float32))
    np.testing.assert_array_equal(make_sample(gt, zero).occluded.data, gt.data)
    np.testing.assert_array_equal(make_sample(gt, full, -1.0).occluded.data, -1.0)
    det = LandmarkDetector(SyntheticLandmarkProvider())
    mask = synthesize_hmd_mask(det(gt), MaskSpec(), 32)
    s = make_sample(gt, mask)
    for c in range(3):
        for y in range(32):
            for x in range(32):
                if mask.data[0, y, x] == 0:
                    assert s.occluded.data[c, y, x] == gt.data[c, y, x]
                else:
                    assert s.occluded.data[c, y, x] == -1.0


def manifest(subject, session, tag, n=2):
    return SessionManifest(session, subject, tag, tuple(f"frames/{i:06d}.png" for i in range(n)))


def test_split_examples():
    split = split_sessions([manifest("u", "s1", "A"), manifest("u", "s2", "B")], ["B"])
    assert [s.appearance_tag for s in split.train_sessions] == ["A"]
    assert [s.appearance_tag for s in split.test_sessions] == ["B"]
    with pytest.raises(DatasetError):
        split_sessions([manifest("u", "s1", "A")], ["B"])


def test_split_three_subjects():
    ms = [manifest(u, f"{u}-{t}", t) for u in ("p", "q", "r") for t in ("A", "B")]
    split = split_sessions(ms, {"p": ["A"], "q": ["B"], "r": ["B"]})
    assert len(split.train_sessions) == 3 and len(split.test_sessions) == 3
    train = {s.session_id for s in split.train_sessions}
    test = {s.session_id for s in split.test_sessions}
    assert train.isdisjoint(test) and train | test == {m.session_id for m in ms}


@settings(max_examples=50, deadline=None)
@given(
    layout=st.lists(st.integers(2, 4), min_size=1, max_size=5),
    seed=st.integers(0, 10_000),
)
def test_split_never_shares_sessions(layout, seed):
    rng = np.random.default_rng(seed)
    ms = []
    for u, n_tags in enumerate(layout):
        for t in range(n_tags):
            for k in range(rng.integers(1, 3)):
                ms.append(manifest(f"u{u}", f"u{u}-t{t}-{k}", f"t{t}"))
    held = {f"u{u}": [f"t{rng.integers(0, n)}"] for u, n in enumerate(layout)}
    split = split_sessions(ms, held)
    train = {s.session_id for s in split.train_sessions}
    test = {s.session_id for s in split.test_sessions}
    assert train.isdisjoint(test)
    for s in split.test_sessions:
        assert s.appearance_tag not in {t.appearance_tag for t in split.train_sessions if t.subject_id == s.subject_id}


def test_split_invariants_enforced():
    with pytest.raises(ValueError):
        DatasetSplit((manifest("u", "s1", "A"),), (manifest("u", "s2", "A"),))


def toy_source(n, size=16):
    gt = [toy_face(size, i) for i in range(n)]
    return SampleSource.from_images(gt)


def test_batch_sizes():
    assert [len(b) for b in iter_batches(toy_source(10), 4, seed=0, epoch=0)] == [4, 4, 2]


def test_batch_count_full_scale():
    assert len(range(0, 3600, 50)) == math.ceil(3600 / 50) == 72
    from deoccl.dataset import num_batches

    assert num_batches(3600, 50) == 72


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 13), bs=st.integers(1, 6), seed=st.integers(0, 99), epoch=st.integers(0, 9))
def test_batch_epoch_is_permutation_and_deterministic(n, bs, seed, epoch):
    src = toy_source(n)
    ids = [f for b in iter_batches(src, bs, seed, epoch) for f in b.frame_ids]
    assert sorted(ids) == sorted(src.frame_ids)
    again = [f for b in iter_batches(src, bs, seed, epoch) for f in b.frame_ids]
    assert ids == again


def test_ingest_and_manifest(tmp_path):
    raw = write_toy_session(tmp_path / "raw", 3, 40)
    m = ingest_session(raw, "alice", "red", 16, tmp_path / "data", session_id="s1")
    assert m.frame_count == 3
    text = (tmp_path / "data/alice/s1/manifest.txt").read_text()
    assert text.splitlines()[0] == "deoccl-manifest v1"
    assert read_manifest(tmp_path / "data/alice/s1") == m
    ingest_session(raw, "alice", "red", 16, tmp_path / "data", session_id="s1")
    assert (tmp_path / "data/alice/s1/manifest.txt").read_text() == text


def test_ingest_single_frame_and_errors(tmp_path):
    raw = write_toy_session(tmp_path / "one", 1, 16)
    assert ingest_session(raw, "a", "x", 16, tmp_path / "d").frame_count == 1
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="no frames"):
        ingest_session(tmp_path / "empty", "a", "x", 16, tmp_path / "d")
    (raw / "frame_0001.png").write_bytes(b"garbage")
    with pytest.raises(DatasetError, match="frame_0001.png"):
        ingest_session(raw, "a", "x", 16, tmp_path / "d")


def test_ingest_long_session(tmp_path):
    raw = tmp_path / "raw"
    img = ImageTensor(np.zeros((3, 8, 8), np.float32))
    for i in range(3600):
        save_image(img, raw / f"{i:05d}.png")
    assert ingest_session(raw, "u", "a", 8, tmp_path / "data").frame_count == 3600


def test_session_source_and_batch_iter(tmp_path):
    ms = []
    for k, tag in enumerate(("A", "B")):
        raw = write_toy_session(tmp_path / f"raw{k}", 5, 32, appearance=k)
        m = ingest_session(raw, "u", tag, 16, tmp_path / "data", session_id=f"s{k}")
        det = LandmarkDetector(SyntheticLandmarkProvider())
        for i in range(m.frame_count):
            from deoccl.imaging import load_image

            mask = synthesize_hmd_mask(det(load_image(m.frame_path(i))), MaskSpec(), 16)
            save_mask(mask, m.mask_path(i))
        ms.append(m)
    split = split_sessions(ms, ["B"])
    test_ids = [f for b in batch_iter(split, "test", 2) for f in b.frame_ids]
    assert test_ids == [f"u/s1/{i:06d}" for i in range(5)]
    train = list(batch_iter(split, "train", 2, seed=3, epoch=1))
    assert sorted(f for b in train for f in b.frame_ids) == [f"u/s0/{i:06d}" for i in range(5)]
    src = SessionSource(split.train_sessions)
    for i in range(len(src)):
        s = src[i]
        visible = s.mask.data[0] == 0
        assert s.mask.area > 0
        np.testing.assert_array_equal(s.occluded.data[:, visible], s.ground_truth.data[:, visible])
    with pytest.raises(DatasetError):
        list(batch_iter(DatasetSplit((), ()), "train", 2))


class EveryOtherFace:
    """Finds a face on even calls only."""

    schema_id = "every-other"
    eye_indices = tuple(range(12))

    def __init__(self):
        self.n = 0
        self.inner = SyntheticLandmarkProvider()

    def __call__(self, img):
        self.n += 1
        return self.inner(img) if self.n % 2 else None


def test_session_mask_pass_skips_faceless_frames(tmp_path):
    raw = write_toy_session(tmp_path / "raw", 5, 32)
    m = ingest_session(raw, "u", "a", 32, tmp_path / "data")
    det = LandmarkDetector(EveryOtherFace())
    res = synthesize_session_masks(m, det, MaskSpec())
    assert res.written == 3 and len(res.skipped) == 2 and det.skipped == 2
    kept = read_manifest(m.root)
    assert kept.frames == ("frames/000000.png", "frames/000002.png", "frames/000004.png")
    kept.validate()
    assert not (m.root / "frames" / "000001.png").exists()
    assert all(kept.mask_path(i).is_file() for i in range(3))
    src = SessionSource([kept])
    assert len(src) == 3 and src[0].mask.area > 0
