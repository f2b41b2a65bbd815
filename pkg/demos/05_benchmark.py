"""Time 1000 single-sample inferences and report the weight footprint."""
import sys
from pathlib import Path

from smearnet import bench
from smearnet import modelio
from smearnet import quantize as qz

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
if not (out / "model.mdq").exists():
    sys.exit("run 03_quantize.py first")

model = modelio.load_model(out / "model.mdf")
qm = qz.load_quantized(out / "model.mdq")

report = bench.bench_inference(model, count=1000, warmup=50, seed=0, batch_size=256)
fp = bench.footprint_report(model, qm)
report.float_kB, report.quantized_kB = fp["float_kB"], fp["quantized_kB"]
print(report.to_text())

# quantized weights are expanded once at load time, so latency matches the float model
qrep = bench.bench_inference(qm, count=200, warmup=20)
print("quantized model: mean %.3f ms/sample" % qrep.mean_ms)

(out / "bench.json").write_text(report.to_json() + "\n")
print("report ->", out / "bench.json")
