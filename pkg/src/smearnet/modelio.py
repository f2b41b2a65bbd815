"""Binary model files.

Float model (little-endian)::

    "MDF1" | u16 format=1 | u32 len + config JSON | u32 param count
    | per param: u16 len + name | u8 rank | u32 extents[rank] | f32 data

The config JSON is the NetworkConfig dict plus a ``"meta"`` entry holding
training metadata. Parameter order is the network's layer order.
"""
import json
import math
import struct

import numpy as np

from .network import ModelState, NetworkConfig

FORMAT_VERSION = 1
FLOAT_MAGIC = b"MDF1"


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


def encode_header(magic, config, meta):
    doc = config.to_dict()
    doc["meta"] = meta
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<HI", FORMAT_VERSION, len(blob)) + blob


def encode_name(name):
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def encode_param(name, arr):
    arr = np.asarray(arr)
    head = encode_name(name) + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4").tobytes()


def encode_params(params):
    return struct.pack("<I", len(params)) + b"".join(
        encode_param(name, arr) for name, arr in params.items())


def param_record_size(name, shape):
    return 2 + len(name.encode("utf-8")) + 1 + 4 * len(shape) + 4 * math.prod(shape)


class Reader:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.buf):
            raise TruncatedModelError(
                f"file ends at byte {len(self.buf)}, needed {n} more bytes at offset {self.off}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def name(self):
        (n,) = self.unpack("H")
        return self.take(n).decode("utf-8")

    def header(self, magic):
        got = self.buf[:4]
        if len(got) < 4:
            raise TruncatedModelError("file shorter than its magic number")
        if got != magic:
            raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")
        self.take(4)
        version, length = self.unpack("HI")
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"format version {version}, this reader supports {FORMAT_VERSION}")
        try:
            doc = json.loads(self.take(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ModelFormatError(f"bad config JSON: {exc}") from None
        meta = doc.pop("meta", {})
        return NetworkConfig.from_dict(doc), meta

    def params(self):
        (count,) = self.unpack("I")
        out = {}
        for _ in range(count):
            name = self.name()
            (rank,) = self.unpack("B")
            shape = self.unpack(f"{rank}I")
            n = math.prod(shape)
            out[name] = np.frombuffer(self.take(4 * n), "<f4").astype(np.float32).reshape(shape)
        return out

    def done(self):
        if self.off != len(self.buf):
            raise ModelFormatError(f"{len(self.buf) - self.off} trailing bytes after model data")


def model_to_bytes(model):
    return encode_header(FLOAT_MAGIC, model.config, model.meta) + encode_params(model.params)


def model_from_bytes(buf):
    r = Reader(buf)
    config, meta = r.header(FLOAT_MAGIC)
    params = r.params()
    r.done()
    from .network import parameter_shapes

    expected = parameter_shapes(config)
    if list(expected) != list(params) or any(params[k].shape != tuple(v) for k, v in expected.items()):
        raise ModelFormatError("stored parameters do not match the stored config")
    return ModelState(config, params, meta)


def save_model(model, path):
    data = model_to_bytes(model)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_model(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
