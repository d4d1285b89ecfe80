import numpy as np
import pytest

from truckvlm.io import FrameFormatError, frame_files, ingest_frames, read_frame, write_frame
from truckvlm.prompting import ClassLabel
from truckvlm.synth import (
    PRESETS, CLASS_ARCHETYPES, SyntheticScene, VehicleSpec, generate, read_memberships, read_vehicle_labels,
    sample_box_surface, three_class_scene, twelve_class_scene, write_scene,
)


def test_frame_round_trip(tmp_path):
    pts = np.array([[1.0, 2.0, 3.0], [-4.5, 0.25, 1e-3]])
    write_frame(tmp_path / "f.txt", pts, 1.25, extra_columns=[7, 9])
    frame, extra = read_frame(tmp_path / "f.txt", columns=4)
    assert frame.timestamp == 1.25
    assert np.allclose(frame.points, pts, atol=1e-6)
    assert extra.ravel().tolist() == [7, 9]


@pytest.mark.parametrize("body, match", [
    ("1 2\n", "expected 'x y z'"),
    ("1 2 z\n", "non-numeric"),
    ("1 2 nan\n", "non-finite"),
    ("# timestamp soon\n", "bad timestamp"),
])
def test_malformed_frames(tmp_path, body, match):
    (tmp_path / "f.txt").write_text(body)
    with pytest.raises(FrameFormatError, match=match):
        read_frame(tmp_path / "f.txt")


def test_empty_frame_and_missing_file(tmp_path):
    (tmp_path / "e.txt").write_text("# timestamp 0.5\n")
    frame, _ = read_frame(tmp_path / "e.txt")
    assert len(frame) == 0 and frame.timestamp == 0.5
    with pytest.raises(FrameFormatError, match="cannot read"):
        read_frame(tmp_path / "nope.txt")


def test_ingest_orders_and_checks_timestamps(tmp_path):
    for i in (2, 0, 1):
        write_frame(tmp_path / f"frame_{i:05d}.txt", np.ones((2, 3)) * i)
    frames = ingest_frames(tmp_path, frame_dt=0.2)
    assert [f.timestamp for f in frames] == [0.0, 0.2, 0.4]
    assert [f.points[0, 0] for f in frames] == [0.0, 1.0, 2.0]
    write_frame(tmp_path / "frame_00003.txt", np.ones((1, 3)), timestamp=0.1)
    with pytest.raises(FrameFormatError, match="does not increase"):
        ingest_frames(tmp_path)
    with pytest.raises(FrameFormatError):
        frame_files(tmp_path / "missing")


def test_box_surface_samples_lie_on_faces():
    rng = np.random.default_rng(0)
    length, width, height = 6.0, 2.5, 3.0
    pts = sample_box_surface((length, width, height), 5000, rng)
    on_face = (
        np.isclose(np.abs(pts[:, 0]), length / 2) | np.isclose(np.abs(pts[:, 1]), width / 2)
        | np.isclose(pts[:, 2], height)
    )
    assert on_face.all() and len(pts) == 5000
    assert np.all(np.abs(pts[:, 0]) <= length / 2 + 1e-12) and pts[:, 2].min() >= 0


def test_generation_is_deterministic_and_labelled():
    scene = three_class_scene(n_frames=4, azimuth_rays=360, elevation_rays=8)
    a, b = generate(scene, seed=5), generate(scene, seed=5)
    for (ta, pa), (tb, pb) in zip(a.frames, b.frames):
        assert ta == tb and np.array_equal(pa, pb)
    for (_, pts), members in zip(a.frames, a.memberships):
        assert len(pts) == len(members)
        assert set(np.unique(members)) <= {-1, 0, 1, 2, 3, 4, 5}
    assert len(a.background) == scene.background_frames


def test_true_transforms_match_vehicle_motion():
    v = VehicleSpec(0, ClassLabel.BOBTAIL, (-5.0, 8.0), (10.0, 0.0))
    scene = SyntheticScene((v,), n_frames=3, background=False, azimuth_rays=36, elevation_rays=4)
    data = generate(scene)
    t = data.transforms[(0, 0)]
    assert np.allclose(t.rotation, np.eye(3)) and np.allclose(t.translation, [1.0, 0.0, 0.0])
    pts0 = data.frames[0][1]
    pts1 = data.frames[1][1]
    assert np.allclose(t.apply(pts0), pts1)


def test_unreachable_vehicle_rejected():
    v = VehicleSpec(0, ClassLabel.BOBTAIL, (500.0, 500.0), (0.0, 0.0))
    with pytest.raises(ValueError, match="never enters"):
        generate(SyntheticScene((v,)))


def test_presets_cover_requested_classes():
    assert {v.label for v in twelve_class_scene().vehicles} == set(ClassLabel)
    assert len({v.label for v in three_class_scene().vehicles}) == 3
    assert set(PRESETS) == {"crossing", "three-class", "twelve-class"}
    assert set(CLASS_ARCHETYPES) == set(ClassLabel)


def test_write_scene_layout(tmp_path):
    scene = three_class_scene(n_frames=3, azimuth_rays=90, elevation_rays=4, background_frames=2)
    data = generate(scene, seed=1)
    write_scene(scene, data, tmp_path)
    assert len(list((tmp_path / "frames").glob("*.txt"))) == 3
    assert len(list((tmp_path / "background").glob("*.txt"))) == 2
    labels = read_vehicle_labels(tmp_path / "truth")
    assert labels == {v.vehicle_id: v.label for v in scene.vehicles}
    members = read_memberships(tmp_path / "truth")
    assert [m.tolist() for m in members] == [m.tolist() for m in data.memberships]
    assert len(ingest_frames(tmp_path / "frames")) == 3
