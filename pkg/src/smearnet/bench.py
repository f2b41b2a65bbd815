"""Inference latency/throughput measurement and model footprint reporting."""
import json
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import modelio
from . import network as net
from . import quantize as qz

# Per-sample figures of the original hardware study, kept for side-by-side
# reading only; they are never compared against local measurements.
REFERENCE = {
    "Movidius NCS + Raspberry Pi3": {"time_per_sample_ms": 2.7, "power_W": 2.9, "energy_mJ": 8.0},
    "Intel i5-6300U": {"time_per_sample_ms": 1.1, "power_W": 18.5, "energy_mJ": 20.4},
}


def latency_stats(latencies_ms):
    a = np.asarray(latencies_ms, np.float64)
    return {"mean": float(a.mean()), "median": float(np.median(a)),
            "p95": float(np.percentile(a, 95)), "min": float(a.min())}


def host_description():
    return f"{platform.system()} {platform.machine()} / {platform.processor() or 'unknown cpu'} / " \
           f"Python {platform.python_version()} / numpy {np.__version__}"


@dataclass
class BenchReport:
    samples_run: int
    warmup_count: int
    latencies_ms: list
    mean_ms: float
    median_ms: float
    p95_ms: float
    min_ms: float
    throughput_per_s: float
    float_kB: float = None
    quantized_kB: float = None
    batch_throughput_per_s: float = None
    batch_size: int = None
    host: str = field(default_factory=host_description)
    power: str = "unmeasured"
    reference: dict = field(default_factory=lambda: REFERENCE)

    def to_dict(self, include_samples=False):
        d = asdict(self)
        if not include_samples:
            d.pop("latencies_ms")
        return d

    def to_json(self, include_samples=False):
        return json.dumps(self.to_dict(include_samples), indent=2, sort_keys=True)

    def to_text(self):
        rows = [("Platform", "this host"),
                ("Time(/sample) (ms)", f"{self.mean_ms:.3f}"),
                ("  median / p95 / min (ms)", f"{self.median_ms:.3f} / {self.p95_ms:.3f} / {self.min_ms:.3f}"),
                ("Throughput (samples/s)", f"{self.throughput_per_s:.1f}"),
                ("Power (W)", self.power),
                ("Energy Consumption (mJ)", self.power)]
        if self.batch_throughput_per_s is not None:
            rows.insert(4, (f"Batched throughput, batch {self.batch_size} (samples/s)",
                            f"{self.batch_throughput_per_s:.1f}"))
        if self.float_kB is not None:
            rows.append(("Weight memory, float (kB)", f"{self.float_kB:.1f}"))
        if self.quantized_kB is not None:
            rows.append(("Weight memory, quantized (kB)", f"{self.quantized_kB:.1f}"))
        rows.append(("Samples timed / warmup", f"{self.samples_run} / {self.warmup_count}"))
        width = max(len(r[0]) for r in rows)
        lines = [f"{a.ljust(width)}  {b}" for a, b in rows]
        lines.append(f"host: {self.host}")
        for name, ref in self.reference.items():
            lines.append(f"reference, {name}: {ref['time_per_sample_ms']} ms/sample, "
                         f"{ref['power_W']} W, {ref['energy_mJ']} mJ")
        return "\n".join(lines)


def _as_model(model_or_qm):
    if isinstance(model_or_qm, qz.QuantizedModel):
        return qz.dequantize(model_or_qm)
    return model_or_qm


def bench_inputs(model, count, seed):
    c, h, w = model.config.input
    rng = np.random.default_rng(seed)
    return rng.random((count, c, h, w), dtype=np.float32)


def bench_inference(model_or_qm, patch_size=None, count=1000, warmup=50, seed=0, batch_size=None):
    """Time ``count`` single-sample inferences after ``warmup`` untimed ones.

    Quantized models are dequantized once, before timing. With
    ``batch_size`` set, a separate batched-throughput pass is reported; it
    never feeds the single-sample statistics.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    model = _as_model(model_or_qm)
    if patch_size is not None and tuple(model.config.input[1:]) != (patch_size, patch_size):
        raise ValueError(f"model expects {model.config.input[1:]} inputs, not {patch_size}px")
    inputs = bench_inputs(model, count + warmup, seed)
    for i in range(warmup):
        net.forward(model, inputs[i:i + 1], "infer")
    lat = np.empty(count)
    for i in range(count):
        x = inputs[warmup + i:warmup + i + 1]
        t0 = time.perf_counter_ns()
        net.forward(model, x, "infer")
        lat[i] = (time.perf_counter_ns() - t0) / 1e6
    stats = latency_stats(lat)
    report = BenchReport(count, warmup, lat.tolist(), stats["mean"], stats["median"],
                         stats["p95"], stats["min"], 1000.0 * count / lat.sum())
    if batch_size:
        report.batch_size = batch_size
        report.batch_throughput_per_s = batch_throughput(model, inputs[warmup:], batch_size)
    return report


def batch_throughput(model, inputs, batch_size):
    t0 = time.perf_counter_ns()
    for start in range(0, len(inputs), batch_size):
        net.forward(model, inputs[start:start + batch_size], "infer")
    return len(inputs) / ((time.perf_counter_ns() - t0) / 1e9)


def footprint_report(model, qm=None):
    """Serialized sizes in kB (bytes / 1000); delegates to the compression report when ``qm`` is given."""
    if qm is None:
        return {"float_bytes": len(modelio.model_to_bytes(model)),
                "float_kB": len(modelio.model_to_bytes(model)) / 1000}
    rep = qz.compression_report(model, qm)
    d = rep.to_dict()
    d["float_bytes"], d["float_kB"] = rep.original_bytes, rep.original_bytes / 1000
    d["quantized_bytes"], d["quantized_kB"] = rep.compressed_bytes, rep.compressed_bytes / 1000
    return d
