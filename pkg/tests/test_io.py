import numpy as np
import pytest

from tempogs import io
from tempogs.geometry import Match2D3D, PointCloud

from conftest import ring_camera


@pytest.mark.parametrize("binary", [True, False])
def test_point_cloud_round_trip_is_exact(tmp_path, rng, binary):
    cloud = PointCloud(rng.normal(size=(50, 3)), rng.uniform(size=(50, 3)))
    io.write_point_cloud(tmp_path / "c.ply", cloud, binary=binary)
    back = io.read_point_cloud(tmp_path / "c.ply")
    np.testing.assert_array_equal(back.points, cloud.points)
    np.testing.assert_array_equal(back.colors, cloud.colors)


def test_ply_reads_uchar_colors(tmp_path):
    path = tmp_path / "u8.ply"
    path.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n"
                    "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n1 2 3 255 0 51\n")
    cloud = io.read_point_cloud(path)
    np.testing.assert_allclose(cloud.points, [[1, 2, 3]])
    np.testing.assert_allclose(cloud.colors, [[1.0, 0.0, 0.2]])


def test_cameras_and_matches_round_trip(tmp_path):
    cams = [ring_camera(i, 40.0 * i) for i in range(3)]
    io.write_cameras(tmp_path / "cams.json", cams)
    back = io.read_cameras(tmp_path / "cams.json")
    for a, b in zip(cams, back):
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)
        assert (a.id, a.fx, a.cx) == (b.id, b.fx, b.cx)
    matches = [Match2D3D(1, (3.25, 4.5), 7)]
    io.write_matches(tmp_path / "m.json", matches)
    assert io.read_matches(tmp_path / "m.json") == matches


def test_image_round_trip_is_8_bit(tmp_path, rng):
    img = np.round(rng.uniform(size=(20, 30, 3)) * 255) / 255
    io.save_image(tmp_path / "a.png", img)
    np.testing.assert_array_equal(io.load_image(tmp_path / "a.png"), img)


def test_missing_file_names_the_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nothere.json"):
        io.read_json(tmp_path / "nothere.json")


def test_atomic_write_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.json"
    with pytest.raises(RuntimeError):
        with io.atomic_path(target) as tmp:
            tmp.write_text("partial")
            raise RuntimeError("boom")
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []
