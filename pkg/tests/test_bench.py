import numpy as np
import pytest

from smearnet import bench, modelio
from smearnet import network as net
from smearnet import quantize as qz


@pytest.fixture(scope="module")
def model():
    return net.init_model(net.default_config(20), 17)


def test_single_count_stats(model):
    rep = bench.bench_inference(model, count=1, warmup=0)
    assert rep.samples_run == 1 and len(rep.latencies_ms) == 1
    assert rep.mean_ms == rep.median_ms == rep.min_ms == rep.p95_ms


def test_stats_recomputed_independently(model):
    rep = bench.bench_inference(model, count=40, warmup=2, seed=3)
    lat = sorted(rep.latencies_ms)
    assert rep.mean_ms == float(np.mean(rep.latencies_ms))
    assert rep.min_ms == lat[0]
    assert rep.median_ms == (lat[19] + lat[20]) / 2
    assert rep.min_ms <= rep.median_ms <= rep.p95_ms
    # single-sample timing: throughput x mean latency is one sample
    assert rep.throughput_per_s * rep.mean_ms / 1000 == pytest.approx(1.0)


def test_inputs_reproducible(model):
    a = bench.bench_inputs(model, 5, seed=9)
    b = bench.bench_inputs(model, 5, seed=9)
    assert a.tobytes() == b.tobytes()


def test_report_rendering(model):
    rep = bench.bench_inference(model, count=3, warmup=1, batch_size=3)
    text = rep.to_text()
    assert "Time(/sample) (ms)" in text and "unmeasured" in text and "2.7 ms/sample" in text
    d = rep.to_dict()
    assert d["power"] == "unmeasured" and "latencies_ms" not in d
    assert "latencies_ms" in rep.to_dict(include_samples=True)


def test_quantized_model_accepted(model):
    qm = qz.quantize_model(model, qz.QuantizeConfig(k=4))
    assert bench.bench_inference(qm, patch_size=20, count=2, warmup=0).samples_run == 2
    with pytest.raises(ValueError):
        bench.bench_inference(model, patch_size=30, count=1)
    with pytest.raises(ValueError):
        bench.bench_inference(model, count=0)


def test_footprint_equals_files(model, tmp_path):
    qm = qz.quantize_model(model, qz.QuantizeConfig(k=16))
    modelio.save_model(model, tmp_path / "m.mdf")
    qz.save_quantized(qm, tmp_path / "m.mdq")
    fp = bench.footprint_report(model, qm)
    assert fp["float_bytes"] == (tmp_path / "m.mdf").stat().st_size
    assert fp["quantized_bytes"] == (tmp_path / "m.mdq").stat().st_size
    assert fp["float_kB"] / fp["quantized_kB"] >= 6
    assert bench.footprint_report(model)["float_bytes"] == fp["float_bytes"]


def test_parameter_free_footprint():
    cfg = net.NetworkConfig((2, 1, 1), [net.LayerSpec("flatten"), net.LayerSpec("softmax")])
    m = net.init_model(cfg, 0)
    header = len(modelio.encode_header(modelio.FLOAT_MAGIC, cfg, m.meta)) + 4
    assert bench.footprint_report(m)["float_bytes"] == header


def test_batched_throughput_not_slower(model):
    inputs = bench.bench_inputs(model, 256, seed=0)
    single = bench.bench_inference(model, count=256, warmup=10).throughput_per_s
    batched = bench.batch_throughput(model, inputs, 64)
    assert batched >= 0.8 * single
