"""Binary PPM (P6) / PGM (P5) reading and writing, and bilinear resizing."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import FormatError, ValidationError


def _read_header(buf: bytes) -> Tuple[bytes, int, int, int, int]:
    """Parse magic, width, height, maxval; return them and the data offset."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError(f"truncated header at byte {pos}")
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((buf[start:pos], start))
    magic, at = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {magic!r} at byte {at}")
    nums = []
    for tok, at in tokens[1:]:
        if not tok.isdigit():
            raise FormatError(f"non-numeric header field {tok!r} at byte {at}")
        nums.append(int(tok))
    w, h, maxval = nums
    if w < 1 or h < 1:
        raise FormatError(f"non-positive image size at byte {tokens[1][1]}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} at byte {tokens[3][1]} (only 255)")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after header at byte {pos}")
    return magic, w, h, maxval, pos + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    """Bytes of a P6/P5 file -> float array (3 x H x W or H x W) in [0, 1]."""
    magic, w, h, _, off = _read_header(buf)
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    if len(buf) - off < need:
        raise FormatError(f"pixel data truncated: need {need} bytes from byte {off}, have {len(buf) - off}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).astype(np.float64) / 255.0
    if ch == 3:
        return data.reshape(h, w, 3).transpose(2, 0, 1).copy()
    return data.reshape(h, w)


def to_bytes(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize with round-half-up."""
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_pnm(x: np.ndarray) -> bytes:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        if x.shape[0] != 3:
            raise ValidationError(f"RGB image must be 3 x H x W, got {x.shape}")
        h, w = x.shape[1:]
        body = to_bytes(x.transpose(1, 2, 0)).tobytes()
        return b"P6\n%d %d\n255\n" % (w, h) + body
    if x.ndim == 2:
        h, w = x.shape
        return b"P5\n%d %d\n255\n" % (w, h) + to_bytes(x).tobytes()
    raise ValidationError(f"cannot encode array of shape {x.shape} as PNM")


def resize_bilinear(img: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres (edge-clamped).

    Works on H x W or C x H x W arrays.
    """
    out_h, out_w = size
    squeeze = img.ndim == 2
    x = img[None] if squeeze else img
    in_h, in_w = x.shape[1:]

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(in_h, out_h)
    c0, c1, fc = axis(in_w, out_w)
    top = x[:, r0][:, :, c0] * (1 - fc) + x[:, r0][:, :, c1] * fc
    bot = x[:, r1][:, :, c0] * (1 - fc) + x[:, r1][:, :, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    return out[0] if squeeze else out


def image_io(path, mode: str, payload: Optional[np.ndarray] = None,
             size: Optional[Tuple[int, int]] = None):
    """Read (``mode='read'``) or write (``mode='write'``) a PPM/PGM file.

    On read, ``size`` optionally resizes bilinearly to (H, W).
    """
    path = Path(path)
    if mode == "read":
        img = decode_pnm(path.read_bytes())
        if size is not None and img.shape[-2:] != tuple(size):
            img = resize_bilinear(img, size)
        return img
    if mode == "write":
        if payload is None:
            raise ValidationError("write needs a payload")
        path.write_bytes(encode_pnm(payload))
        return path
    raise ValidationError(f"unknown image_io mode {mode!r}")
