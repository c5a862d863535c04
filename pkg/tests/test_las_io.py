import struct

import numpy as np
import pytest

from canopymap.errors import DataError
from canopymap.las_io import (
    read_las,
    read_points,
    read_xyz_csv,
    write_las,
    write_points,
    write_xyz_csv,
)
from canopymap.lidar import PointCloud


@pytest.fixture
def cloud(rng):
    pts = np.column_stack(
        [
            rng.uniform(447000, 447200, 500),
            rng.uniform(4637000, 4637200, 500),
            rng.uniform(0, 120, 500),
        ]
    )
    return PointCloud(pts)


class TestLas:
    def test_roundtrip_within_quantization(self, tmp_path, cloud):
        p = tmp_path / "c.las"
        write_las(p, cloud, scale=0.001)
        back = read_las(p)
        assert len(back) == len(cloud)
        np.testing.assert_allclose(back.points, cloud.points, atol=0.0011)

    def test_header_fields(self, tmp_path, cloud):
        p = tmp_path / "c.las"
        write_las(p, cloud)
        raw = p.read_bytes()
        assert raw[:4] == b"LASF"
        assert raw[24] == 1 and raw[25] == 2  # version 1.2
        fmt = raw[104]
        assert fmt == 0
        count = struct.unpack_from("<I", raw, 107)[0]
        assert count == len(cloud)

    def test_rejects_bad_signature(self, tmp_path):
        p = tmp_path / "x.las"
        p.write_bytes(b"NOPE" + b"\x00" * 300)
        with pytest.raises(DataError):
            read_las(p)

    def test_rejects_laz_compression_bit(self, tmp_path, cloud):
        p = tmp_path / "c.las"
        write_las(p, cloud)
        raw = bytearray(p.read_bytes())
        raw[104] |= 0x80
        p.write_bytes(bytes(raw))
        with pytest.raises(DataError):
            read_las(p)

    def test_rejects_truncated_records(self, tmp_path, cloud):
        p = tmp_path / "c.las"
        write_las(p, cloud)
        raw = p.read_bytes()
        p.write_bytes(raw[:-7])
        with pytest.raises(DataError):
            read_las(p)

    def test_coordinate_overflow_rejected(self, tmp_path):
        # i32 * 0.001 scale caps coordinates ~2.1e6 from the offset
        cloud = PointCloud(np.array([[0.0, 0.0, 0.0], [3.0e6, 0.0, 0.0]]))
        with pytest.raises(DataError):
            write_las(tmp_path / "c.las", cloud)

    def test_min_max_header_values(self, tmp_path):
        cloud = PointCloud(np.array([[10.0, 20.0, 1.0], [30.0, 5.0, 7.5]]))
        p = tmp_path / "c.las"
        write_las(p, cloud)
        raw = p.read_bytes()
        max_x, min_x, max_y, min_y, max_z, min_z = struct.unpack_from("<6d", raw, 179)
        assert (min_x, max_x) == (10.0, 30.0)
        assert (min_y, max_y) == (5.0, 20.0)
        assert (min_z, max_z) == (1.0, 7.5)


class TestXyzCsv:
    def test_roundtrip_exact(self, tmp_path, cloud):
        p = tmp_path / "c.csv"
        write_xyz_csv(p, cloud)
        back = read_xyz_csv(p)
        np.testing.assert_array_equal(back.points, cloud.points)

    def test_requires_header(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("1,2,3\n")
        with pytest.raises(DataError):
            read_xyz_csv(p)

    def test_bad_cell_reports_line(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("x,y,z\n1,2,3\n1,oops,3\n")
        with pytest.raises(DataError, match=":3:"):
            read_xyz_csv(p)


class TestDispatch:
    def test_by_extension(self, tmp_path, cloud):
        write_points(tmp_path / "a.las", cloud)
        write_points(tmp_path / "b.csv", cloud)
        assert len(read_points(tmp_path / "a.las")) == len(cloud)
        assert len(read_points(tmp_path / "b.csv")) == len(cloud)

    def test_laz_rejected(self, tmp_path):
        (tmp_path / "x.laz").write_bytes(b"LASF" + b"\x00" * 300)
        with pytest.raises(DataError):
            read_points(tmp_path / "x.laz")
