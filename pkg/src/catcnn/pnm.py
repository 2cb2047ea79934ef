"""Binary PGM (P5) / PPM (P6) reading and writing, 8 or 16 bit."""

from __future__ import annotations

import os
import re

import numpy as np


class PNMError(ValueError):
    pass


_TOKEN = re.compile(rb"\s*((?:#[^\n]*\n\s*)*)(\S+)")
_COMMENT = re.compile(rb"#([^\n]*)\n")


def _header(buf: bytes, path) -> tuple[bytes, int, int, int, int, list[str]]:
    pos = 0
    tokens = []
    comments = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise PNMError(f"{path}: truncated header at byte {pos}")
        comments += [c.decode("utf-8", "replace").strip() for c in _COMMENT.findall(m.group(1))]
        tokens.append(m.group(2))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"{path}: unsupported magic {magic!r} at byte 0 (need P5 or P6)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise PNMError(f"{path}: malformed header near byte {pos}: {e}") from None
    if not 0 < maxval < 65536 or w < 1 or h < 1:
        raise PNMError(f"{path}: bad header values width={w} height={h} maxval={maxval}")
    # exactly one whitespace byte separates header from raster
    return magic, w, h, maxval, pos + 1, comments


def read_pnm(path) -> tuple[np.ndarray, int, list[str]]:
    """Return (raw integer raster [C,H,W], maxval, header comments)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, w, h, maxval, start, comments = _header(buf, path)
    c = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * c
    need = n * dtype.itemsize
    if len(buf) - start < need:
        raise PNMError(f"{path}: raster truncated at byte {len(buf)}, expected {start + need}")
    raw = np.frombuffer(buf, dtype=dtype, count=n, offset=start).astype(np.int64)
    return raw.reshape(h, w, c).transpose(2, 0, 1), maxval, comments


def write_pnm(path, raster: np.ndarray, maxval: int, comments: list[str] = ()) -> None:
    """Write integer raster [C,H,W] (C in {1,3}) or [H,W]."""
    a = np.asarray(raster)
    if a.ndim == 2:
        a = a[None]
    c, h, w = a.shape
    if c not in (1, 3):
        raise PNMError(f"cannot write {c}-channel image as PGM/PPM")
    magic = b"P5" if c == 1 else b"P6"
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = magic + b"\n"
    for line in comments:
        header += b"# " + line.encode("utf-8") + b"\n"
    header += f"{w} {h}\n{maxval}\n".encode()
    body = np.clip(a, 0, maxval).astype(dtype).transpose(1, 2, 0).tobytes()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header + body)


def read_image(path) -> np.ndarray:
    """Float image [C,H,W] in [0,1]; PNG goes through Pillow when available."""
    if str(path).lower().endswith(".png"):
        try:
            from PIL import Image
        except ImportError as e:  # pragma: no cover
            raise PNMError(f"{path}: PNG support needs Pillow") from e
        with Image.open(path) as im:
            arr = np.asarray(im)
        maxval = 65535 if arr.dtype == np.uint16 else 255
        arr = arr.astype(np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = arr[..., :3].transpose(2, 0, 1)
        return arr / maxval
    raw, maxval, _ = read_pnm(path)
    return raw.astype(np.float64) / maxval


def write_image(path, image: np.ndarray, bits: int = 16) -> None:
    maxval = 65535 if bits == 16 else 255
    a = np.asarray(image, dtype=np.float64)
    write_pnm(path, np.floor(np.clip(a, 0.0, 1.0) * maxval + 0.5).astype(np.int64), maxval)
