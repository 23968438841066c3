import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from capnet.errors import FormatError
from capnet.imageio import decode_pnm, encode_pnm, image_io, resize_bilinear


class TestPnm:
    def test_white_pixel(self):
        np.testing.assert_array_equal(decode_pnm(b"P6\n1 1\n255\n\xff\xff\xff"), np.ones((3, 1, 1)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.just(3), st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(0, 1)))
    def test_quantization_bound(self, x):
        assert np.max(np.abs(decode_pnm(encode_pnm(x)) - x)) <= 1 / 510 + 1e-15

    def test_clamps(self):
        np.testing.assert_array_equal(decode_pnm(encode_pnm(np.array([[-1.0, 2.0]]))), [[0.0, 1.0]])

    def test_round_half_up(self):
        x = np.array([[0.5 / 255, 1.5 / 255]])
        np.testing.assert_array_equal(decode_pnm(encode_pnm(x)) * 255, [[1, 2]])

    def test_comment_in_header(self):
        np.testing.assert_array_equal(decode_pnm(b"P5\n# hi\n2 1\n255\n\x00\xff"), [[0.0, 1.0]])

    @pytest.mark.parametrize("buf,offset", [(b"P3\n1 1\n255\n", 0), (b"P6\n1 x\n255\n", 5),
                                            (b"P6\n1 1\n65535\n", 7), (b"P6\n1", 4)])
    def test_bad_header_reports_offset(self, buf, offset):
        with pytest.raises(FormatError, match=f"byte {offset}"):
            decode_pnm(buf)

    def test_truncated_pixels(self):
        with pytest.raises(FormatError, match="truncated"):
            decode_pnm(b"P6\n2 2\n255\n\x00\x00")

    def test_file_round_trip(self, tmp_path):
        x = np.random.default_rng(0).uniform(size=(3, 4, 5))
        image_io(tmp_path / "a.ppm", "write", x)
        assert image_io(tmp_path / "a.ppm", "read").shape == (3, 4, 5)


class TestResize:
    def test_constant(self):
        np.testing.assert_allclose(resize_bilinear(np.full((3, 7, 5), 0.3), (11, 4)), 0.3, atol=1e-15)

    def test_identity(self):
        x = np.random.default_rng(1).uniform(size=(6, 6))
        np.testing.assert_allclose(resize_bilinear(x, (6, 6)), x, atol=1e-15)

    def test_upsample_midpoint(self):
        out = resize_bilinear(np.array([[0.0, 1.0]]), (1, 4))
        np.testing.assert_allclose(out, [[0.0, 0.25, 0.75, 1.0]])

    def test_read_with_resize(self, tmp_path):
        image_io(tmp_path / "g.pgm", "write", np.full((8, 8), 1.0))
        np.testing.assert_array_equal(image_io(tmp_path / "g.pgm", "read", size=(4, 4)), np.ones((4, 4)))
