"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only.

Images live in memory as float32 (C, H, W) arrays scaled to [0, 1].
"""
import numpy as np


class RasterError(ValueError):
    pass


class BadMagicError(RasterError):
    pass


class UnsupportedDepthError(RasterError):
    pass


class TruncatedRasterError(RasterError):
    pass


def _header_tokens(buf):
    """Yield (token, end_offset) for the four whitespace-separated header fields."""
    tokens = []
    i = 0
    n = len(buf)
    while len(tokens) < 4:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise TruncatedRasterError("header ends before width/height/maxval")
        j = i
        while j < n and not buf[j:j + 1].isspace():
            j += 1
        tokens.append(buf[i:j])
        i = j
    # exactly one whitespace byte separates maxval from the pixel data
    return tokens, i + 1


def decode_raster(buf):
    if buf[:2] not in (b"P5", b"P6"):
        raise BadMagicError(f"not a binary PGM/PPM file (magic {buf[:2]!r})")
    tokens, offset = _header_tokens(buf)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise RasterError(f"malformed header fields {tokens[1:]}") from None
    if maxval != 255:
        raise UnsupportedDepthError(f"maxval {maxval} unsupported; only 8-bit (255) images are read")
    channels = 1 if tokens[0] == b"P5" else 3
    need = width * height * channels
    data = buf[offset:offset + need]
    if len(data) < need:
        raise TruncatedRasterError(f"expected {need} pixel bytes, found {len(data)}")
    pixels = np.frombuffer(data, np.uint8).reshape(height, width, channels)
    return pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255)


def load_raster(path):
    with open(path, "rb") as f:
        return decode_raster(f.read())


def to_uint8(img):
    """(C,H,W) floats in [0,1] -> (H,W,C) uint8."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    return np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def encode_raster(img):
    pixels = img if img.dtype == np.uint8 and img.ndim == 3 and img.shape[2] in (1, 3) else to_uint8(img)
    h, w, c = pixels.shape
    if c not in (1, 3):
        raise RasterError(f"can only write 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def save_raster(img, path):
    """Write a (C,H,W) float image, or an (H,W,C) uint8 array, as PGM/PPM."""
    with open(path, "wb") as f:
        f.write(encode_raster(img))
