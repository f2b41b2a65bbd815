"""Trained quantization: per-layer k-means weight sharing, codebook packing and centroid fine-tuning.

Quantized model file (little-endian)::

    "MDQ1" | u16 format=1 | u32 len + config JSON | u32 layer count
    | per layer: u16 len + name | u16 k | f32 centroids[k] | u64 len + packed indices
    | side parameters, encoded exactly like the float file's parameter block

Indices are packed LSB-first at ``bits = max(1, ceil(log2 k))`` bits each.
"""
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import modelio
from . import network as net
from . import tensor_ops as ops

QUANT_MAGIC = b"MDQ1"


class QuantizedFormatError(modelio.ModelFormatError):
    pass


def index_bits(k):
    return max(1, math.ceil(math.log2(k))) if k > 1 else 1


def pack_indices(ids, bits):
    """Pack integer ids (< 2**bits, bits <= 8) into bytes, LSB first."""
    ids = np.asarray(ids, np.uint8).ravel()
    if bits < 1 or bits > 8:
        raise ValueError("bits must be in 1..8")
    planes = (ids[:, None] >> np.arange(bits, dtype=np.uint8)) & 1
    return np.packbits(planes.ravel(), bitorder="little").tobytes()


def unpack_indices(buf, bits, count):
    flat = np.unpackbits(np.frombuffer(buf, np.uint8), bitorder="little")[:count * bits]
    if flat.size != count * bits:
        raise QuantizedFormatError(f"packed stream holds fewer than {count} indices")
    planes = flat.reshape(count, bits).astype(np.uint8)
    return (planes << np.arange(bits, dtype=np.uint8)).sum(axis=1).astype(np.uint8)


def packed_size(count, k):
    return math.ceil(count * index_bits(k) / 8)


def layer_payload_bytes(count, k):
    """Packed index bytes plus f32 codebook for one layer."""
    return packed_size(count, k) + 4 * k


@dataclass
class KMeansResult:
    centroids: np.ndarray  # float64, ascending
    assignments: np.ndarray
    inertia: float
    history: list  # inertia after every assignment step
    iterations: int


def kmeans_1d(values, k, seed=0, max_iter=300):
    """Lloyd's algorithm on scalars with centroids initialised evenly over [min, max].

    Ties go to the lower-index centroid. An emptied cluster is re-seeded at
    the value lying farthest from its current centroid. Stops once the
    assignment repeats or after ``max_iter`` assignment steps. Centroids are
    returned in ascending order with assignments remapped to match. The
    procedure is fully deterministic; ``seed`` is accepted for API symmetry.
    """
    v = np.asarray(values, np.float64).ravel()
    n_distinct = np.unique(v).size
    if k < 1 or k > n_distinct:
        raise ValueError(f"k={k} needs 1 <= k <= number of distinct values ({n_distinct})")
    c = np.linspace(v.min(), v.max(), k) if k > 1 else np.array([v.mean()])
    history = []
    prev = None
    it = 0
    for it in range(1, max_iter + 1):
        d = np.abs(v[:, None] - c[None, :])
        a = d.argmin(axis=1)
        dist = d[np.arange(v.size), a]
        history.append(float(np.sum(dist * dist)))
        counts = np.bincount(a, minlength=k)
        if prev is not None and np.array_equal(a, prev) and counts.all():
            break
        prev = a
        sums = np.bincount(a, weights=v, minlength=k)
        c = np.where(counts > 0, sums / np.maximum(counts, 1), c)
        for j in np.flatnonzero(counts == 0):
            far = int(dist.argmax())
            c[j] = v[far]
            dist[far] = 0.0
    order = np.argsort(c, kind="stable")
    remap = np.empty(k, np.int64)
    remap[order] = np.arange(k)
    return KMeansResult(c[order], remap[a], history[-1], history, it)


@dataclass
class LayerCodebook:
    name: str
    shape: tuple
    centroids: np.ndarray  # float32[k]
    indices: np.ndarray  # uint8, one per weight, flattened

    @property
    def k(self):
        return len(self.centroids)

    @property
    def bits(self):
        return index_bits(self.k)

    def weights(self):
        if self.indices.size and int(self.indices.max()) >= self.k:
            raise QuantizedFormatError(
                f"layer {self.name!r}: index {int(self.indices.max())} >= k={self.k}")
        return self.centroids[self.indices].reshape(self.shape)


@dataclass
class QuantizedModel:
    config: net.NetworkConfig
    codebooks: dict  # name -> LayerCodebook
    side: dict  # name -> float32 array (biases, batchnorm)
    meta: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


@dataclass
class QuantizeConfig:
    k: int = 16
    per_layer: dict = field(default_factory=dict)  # parameter name -> k
    finetune_epochs: int = 5
    finetune_lr: float = 1e-4
    batch_size: int = 256
    seed: int = 42

    def __post_init__(self):
        if self.k < 2 or any(v < 2 for v in self.per_layer.values()):
            raise ValueError("k must be >= 2")
        if self.k > 256 or any(v > 256 for v in self.per_layer.values()):
            raise ValueError("k must be <= 256")

    def k_for(self, name):
        return self.per_layer.get(name, self.k)


def quantized_names(config):
    """Conv and dense weight tensors; biases and batchnorm stay in full precision."""
    return [n for n in net.parameter_shapes(config) if n.endswith(".weight")]


def quantize_model(model, qcfg):
    names = set(quantized_names(model.config))
    codebooks, side, notes = {}, {}, []
    for name, arr in model.params.items():
        if name not in names:
            side[name] = arr.copy()
            continue
        k = qcfg.k_for(name)
        distinct = np.unique(arr).size
        if distinct < k:
            msg = f"{name}: only {distinct} distinct weights, k clamped from {k} to {distinct}"
            warnings.warn(msg)
            notes.append(msg)
            k = distinct
        km = kmeans_1d(arr, k, qcfg.seed)
        codebooks[name] = LayerCodebook(name, arr.shape, km.centroids.astype(np.float32),
                                        km.assignments.astype(np.uint8))
    meta = dict(model.meta)
    meta["quantization"] = {name: cb.k for name, cb in codebooks.items()}
    return QuantizedModel(model.config, codebooks, side, meta, notes)


def dequantize(qm):
    """Full-precision ModelState whose quantized weights are codebook lookups."""
    params = {}
    for name in net.parameter_shapes(qm.config):
        if name in qm.codebooks:
            params[name] = qm.codebooks[name].weights()
        else:
            params[name] = qm.side[name].copy()
    meta = {k: v for k, v in qm.meta.items() if k != "quantization"}
    return net.ModelState(qm.config, params, meta)


def forward_quantized(qm, batch, mode="infer"):
    """Dequantize-on-load execution."""
    return net.forward(dequantize(qm), batch, mode)


def centroid_gradients(codebook, weight_grad):
    """Sum of weight gradients over the members of every cluster."""
    return np.bincount(codebook.indices, weights=np.asarray(weight_grad, np.float64).ravel(),
                       minlength=codebook.k)


def finetune(qm, dataset, qcfg, on_epoch=None):
    """Retrain centroids (assignments frozen) plus biases and batchnorm with Adam.

    Returns ``(QuantizedModel, log)``; index streams are never modified.
    """
    X = np.asarray(dataset.patches, np.float32)
    y = np.asarray(dataset.labels).astype(np.int64)
    if X.shape[0] == 0:
        raise ValueError("cannot finetune on an empty dataset")
    codebooks = {n: LayerCodebook(cb.name, cb.shape, cb.centroids.copy(), cb.indices)
                 for n, cb in qm.codebooks.items()}
    side = {n: a.copy() for n, a in qm.side.items()}
    model = dequantize(QuantizedModel(qm.config, codebooks, side, qm.meta))
    for n in side:
        model.params[n] = side[n]  # share storage so running stats land in `side`
    trainable = {f"{n}.centroids": cb.centroids for n, cb in codebooks.items()}
    trainable.update({n: a for n, a in side.items() if net.is_trainable(n)})
    state = ops.AdamState(lr=qcfg.finetune_lr)
    rng = np.random.default_rng(qcfg.seed)
    log = []
    for epoch in range(qcfg.finetune_epochs):
        order = rng.permutation(len(X))
        total, correct = 0.0, 0
        for start in range(0, len(X), qcfg.batch_size):
            idx = order[start:start + qcfg.batch_size]
            for n, cb in codebooks.items():
                model.params[n] = cb.weights()
            loss, probs, grads = net.loss_and_grads(model, X[idx], y[idx])
            step = {n: g for n, g in grads.items() if n in side}
            for n, cb in codebooks.items():
                step[f"{n}.centroids"] = centroid_gradients(cb, grads[n])
            ops.adam_step(trainable, step, state)
            total += loss * len(idx)
            correct += int((probs.argmax(axis=1) == y[idx]).sum())
        rec = {"epoch": epoch + 1, "loss": total / len(X), "accuracy": correct / len(X)}
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    meta = dict(qm.meta)
    meta["finetune_epochs"] = meta.get("finetune_epochs", 0) + qcfg.finetune_epochs
    return QuantizedModel(qm.config, codebooks, side, meta, list(qm.warnings)), log


# ---------------------------------------------------------------------------
# MDQ1 file

def _layer_record(cb):
    packed = pack_indices(cb.indices, cb.bits)
    return (modelio.encode_name(cb.name) + struct.pack("<H", cb.k)
            + cb.centroids.astype("<f4").tobytes() + struct.pack("<Q", len(packed)) + packed)


def layer_record_size(name, count, k):
    return 2 + len(name.encode("utf-8")) + 2 + 4 * k + 8 + packed_size(count, k)


def quantized_to_bytes(qm):
    out = [modelio.encode_header(QUANT_MAGIC, qm.config, qm.meta),
           struct.pack("<I", len(qm.codebooks))]
    out += [_layer_record(cb) for cb in qm.codebooks.values()]
    out.append(modelio.encode_params(qm.side))
    return b"".join(out)


def quantized_from_bytes(buf):
    r = modelio.Reader(buf)
    config, meta = r.header(QUANT_MAGIC)
    shapes = net.parameter_shapes(config)
    (count,) = r.unpack("I")
    codebooks = {}
    for _ in range(count):
        name = r.name()
        if name not in shapes:
            raise QuantizedFormatError(f"layer {name!r} is not part of the stored config")
        (k,) = r.unpack("H")
        centroids = np.frombuffer(r.take(4 * k), "<f4").astype(np.float32)
        (nbytes,) = r.unpack("Q")
        n = math.prod(shapes[name])
        if nbytes != packed_size(n, k):
            raise QuantizedFormatError(
                f"layer {name!r}: {nbytes} packed bytes, expected {packed_size(n, k)}")
        idx = unpack_indices(r.take(nbytes), index_bits(k), n)
        if idx.size and int(idx.max()) >= k:
            raise QuantizedFormatError(f"layer {name!r}: index {int(idx.max())} >= k={k}")
        codebooks[name] = LayerCodebook(name, tuple(shapes[name]), centroids, idx)
    side = r.params()
    r.done()
    return QuantizedModel(config, codebooks, side, meta)


def save_quantized(qm, path):
    data = quantized_to_bytes(qm)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_quantized(path):
    with open(path, "rb") as f:
        return quantized_from_bytes(f.read())


# ---------------------------------------------------------------------------
# size accounting

@dataclass
class LayerSize:
    name: str
    weights: int
    k: int
    bits: int
    original_bytes: int
    compressed_bytes: int

    @property
    def factor(self):
        return self.original_bytes / self.compressed_bytes


@dataclass
class CompressionReport:
    layers: list
    original_header_bytes: int
    compressed_header_bytes: int
    side_bytes_original: int
    side_bytes_compressed: int
    original_bytes: int
    compressed_bytes: int

    @property
    def factor(self):
        return self.original_bytes / self.compressed_bytes

    def to_dict(self):
        return {
            "layers": [{"name": l.name, "weights": l.weights, "k": l.k, "bits": l.bits,
                        "original_kB": l.original_bytes / 1000,
                        "compressed_kB": l.compressed_bytes / 1000,
                        "factor": round(l.factor, 4)} for l in self.layers],
            "original_bytes": self.original_bytes,
            "compressed_bytes": self.compressed_bytes,
            "original_kB": self.original_bytes / 1000,
            "compressed_kB": self.compressed_bytes / 1000,
            "factor": round(self.factor, 4),
        }

    def to_text(self):
        rows = [("layer", "weights", "k", "bits", "float kB", "quant kB", "factor")]
        for l in self.layers:
            rows.append((l.name, str(l.weights), str(l.k), str(l.bits),
                         f"{l.original_bytes / 1000:.1f}", f"{l.compressed_bytes / 1000:.1f}",
                         f"{l.factor:.1f}x"))
        rows.append(("side parameters", "", "", "", f"{self.side_bytes_original / 1000:.1f}",
                     f"{self.side_bytes_compressed / 1000:.1f}", ""))
        rows.append(("headers", "", "", "", f"{self.original_header_bytes / 1000:.1f}",
                     f"{self.compressed_header_bytes / 1000:.1f}", ""))
        rows.append(("total", "", "", "", f"{self.original_bytes / 1000:.1f}",
                     f"{self.compressed_bytes / 1000:.1f}", f"{self.factor:.1f}x"))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(r, widths))) for r in rows)


def compression_report(model, qm):
    """Byte accounting that sums exactly to the MDF1 and MDQ1 file sizes; kB = bytes / 1000."""
    if model.config.to_dict() != qm.config.to_dict():
        raise ValueError("model and quantized model have different configs")
    layers = []
    for name, cb in qm.codebooks.items():
        n = math.prod(cb.shape)
        layers.append(LayerSize(name, n, cb.k, cb.bits,
                                modelio.param_record_size(name, cb.shape),
                                layer_record_size(name, n, cb.k)))
    side_orig = sum(modelio.param_record_size(n, a.shape)
                    for n, a in model.params.items() if n not in qm.codebooks)
    side_comp = 4 + sum(modelio.param_record_size(n, a.shape) for n, a in qm.side.items())
    head_orig = len(modelio.encode_header(modelio.FLOAT_MAGIC, model.config, model.meta)) + 4
    head_comp = len(modelio.encode_header(QUANT_MAGIC, qm.config, qm.meta)) + 4
    orig = head_orig + side_orig + sum(l.original_bytes for l in layers)
    comp = head_comp + side_comp + sum(l.compressed_bytes for l in layers)
    return CompressionReport(layers, head_orig, head_comp, side_orig, side_comp, orig, comp)
