"""End-to-end acceptance checks, one test per criterion.

The trained model, patch sets and quantized model are built once per module
and shared by criteria 3, 4 and 7. Measured values are attached to each
test and printed with the per-criterion PASS/FAIL summary.
"""
import time

import numpy as np
import pytest

from smearnet import bench, detect as dt, metrics as mt, modelio
from smearnet import dataset as ds
from smearnet import network as net
from smearnet import quantize as qz
from smearnet import tensor_ops as ops

from oracles import (ap_sweep, auc_pairwise, batchnorm_ref, conv2d_ref, dense_ref, max_rel_err,
                     maxpool_ref, nms_ref, numeric_grad, rect_iou)

SEED = 42
TRAIN_EPOCHS = 10
FINETUNE_EPOCHS = 3


def note(request, text):
    request.node.user_properties.append(("detail", text))


# --- shared pipeline -------------------------------------------------------------

@pytest.fixture(scope="module")
def patches():
    images = ds.generate_synthetic(ds.SynthConfig(seed=SEED), 300)
    ps = ds.prepare_patches(images, patch_size=20, neg_per_image=12, augment=2, seed=SEED)
    return ds.split(ps, 0.3, SEED)


@pytest.fixture(scope="module")
def trained(patches):
    train_ps, _ = patches
    model = net.init_model(net.default_config(20), SEED)
    t0 = time.perf_counter()
    model, log = net.train(model, train_ps, net.TrainingConfig(lr=1e-4, batch_size=256,
                                                               epochs=TRAIN_EPOCHS, seed=SEED))
    return model, log, time.perf_counter() - t0


@pytest.fixture(scope="module")
def finetuned(trained, patches):
    model = trained[0]
    qcfg = qz.QuantizeConfig(k=16, finetune_epochs=FINETUNE_EPOCHS, finetune_lr=1e-4,
                             batch_size=256, seed=SEED)
    qm = qz.quantize_model(model, qcfg)
    tuned, _ = qz.finetune(qm, patches[0], qcfg)
    return qm, tuned


def evaluate(model, ps):
    return mt.roc(mt.ScoredLabelSet(net.predict_scores(model, ps.patches), ps.labels))


# --- C1 --------------------------------------------------------------------------

def test_c01_kernel_oracles(request):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n, c, f = (int(v) for v in rng.integers(1, [3, 5, 5]))
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        hw = int(rng.integers(k, 10))
        x = rng.uniform(-10, 10, (n, c, hw, hw))
        p = ops.ConvParams(rng.uniform(-10, 10, (f, c, k, k)), rng.uniform(-10, 10, f), stride, pad)
        worst = max(worst, np.max(np.abs(ops.conv2d_forward(x, p) - conv2d_ref(x, p.weights, p.bias, stride, pad))))
    for _ in range(100):
        shape = tuple(int(v) for v in rng.integers([1, 1, 3, 3], [5, 9, 17, 17]))
        x = rng.uniform(-10, 10, shape)
        stride = int(rng.integers(1, 3))
        out, _ = ops.maxpool3x3(x, stride)
        worst = max(worst, np.max(np.abs(out - maxpool_ref(x, stride))))
    for _ in range(100):
        shape = tuple(int(v) for v in rng.integers([2, 1, 1, 1], [5, 9, 17, 17]))
        c = shape[1]
        x = rng.uniform(-10, 10, shape)
        p = ops.BatchNormParams(rng.uniform(-2, 2, c), rng.uniform(-2, 2, c), np.zeros(c), np.ones(c))
        out, _ = ops.batchnorm_forward(x, p, "train")
        worst = max(worst, np.max(np.abs(out - batchnorm_ref(x, p.gamma, p.beta, p.epsilon))))
    for _ in range(100):
        n, d_in, d_out = (int(v) for v in rng.integers(1, [5, 65, 17]))
        x = rng.uniform(-10, 10, (n, d_in))
        w, b = rng.uniform(-10, 10, (d_out, d_in)), rng.uniform(-10, 10, d_out)
        worst = max(worst, np.max(np.abs(ops.dense_forward(x, w, b) - dense_ref(x, w, b))))
    elapsed = time.perf_counter() - t0
    note(request, f"max abs err {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-6
    assert elapsed < 30


# --- C2 --------------------------------------------------------------------------

def test_c02_gradients(request):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    errs = {}

    x = rng.uniform(-1, 1, (2, 3, 6, 6))
    p = ops.ConvParams(rng.uniform(-1, 1, (4, 3, 3, 3)), rng.uniform(-1, 1, 4), 2, 1)
    g = rng.standard_normal(ops.conv2d_forward(x, p).shape)
    gx, gw, gb = ops.conv2d_backward(x, p, g)
    f = lambda: float(np.sum(ops.conv2d_forward(x, p) * g))  # noqa: E731
    errs["conv"] = max(max_rel_err(gx, numeric_grad(f, x, 1e-3)),
                       max_rel_err(gw, numeric_grad(f, p.weights, 1e-3)),
                       max_rel_err(gb, numeric_grad(f, p.bias, 1e-3)))

    # distinct values keep the argmax stable under perturbation
    x = rng.permutation(np.arange(2 * 2 * 7 * 7, dtype=np.float64)).reshape(2, 2, 7, 7) / 10
    out, idx = ops.maxpool3x3(x, 2)
    g = rng.standard_normal(out.shape)
    f = lambda: float(np.sum(ops.maxpool3x3(x, 2)[0] * g))  # noqa: E731
    errs["maxpool"] = max_rel_err(ops.maxpool_backward(idx, g), numeric_grad(f, x, 1e-3))

    x = rng.uniform(-2, 2, (4, 3, 3, 3))
    bp = ops.BatchNormParams(rng.uniform(0.5, 2, 3), rng.uniform(-1, 1, 3), np.zeros(3), np.ones(3))
    out, cache = ops.batchnorm_forward(x, bp, "train")
    g = rng.standard_normal(out.shape)
    gx, gg, gbeta = ops.batchnorm_backward(cache, g)
    f = lambda: float(np.sum(ops.batchnorm_forward(x, bp, "train")[0] * g))  # noqa: E731
    errs["batchnorm"] = max(max_rel_err(gx, numeric_grad(f, x, 1e-3)),
                            max_rel_err(gg, numeric_grad(f, bp.gamma, 1e-3)),
                            max_rel_err(gbeta, numeric_grad(f, bp.beta, 1e-3)))

    x, w, b = rng.uniform(-1, 1, (3, 7)), rng.uniform(-1, 1, (5, 7)), rng.uniform(-1, 1, 5)
    g = rng.standard_normal((3, 5))
    gx, gw, gb = ops.dense_backward(x, w, g)
    f = lambda: float(np.sum(ops.dense_forward(x, w, b) * g))  # noqa: E731
    errs["dense"] = max(max_rel_err(gx, numeric_grad(f, x, 1e-3)),
                        max_rel_err(gw, numeric_grad(f, w, 1e-3)),
                        max_rel_err(gb, numeric_grad(f, b, 1e-3)))

    x = rng.uniform(-1, 1, (3, 8))
    x[np.abs(x) < 0.05] = 0.5
    g = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(ops.relu(x) * g))  # noqa: E731
    errs["relu"] = max_rel_err(ops.relu_backward(x, g), numeric_grad(f, x, 1e-3))

    logits, labels = rng.uniform(-3, 3, (6, 2)), rng.integers(0, 2, 6)
    _, glog = ops.bce_loss(ops.softmax(logits), labels)
    f = lambda: ops.bce_loss(ops.softmax(logits), labels)[0]  # noqa: E731
    errs["softmax+bce"] = max_rel_err(glog, numeric_grad(f, logits, 1e-3))

    cfg = net.NetworkConfig((1, 8, 8), [
        net.LayerSpec("conv", "conv1", in_channels=1, out_channels=3, kernel=3, stride=1, padding=1),
        net.LayerSpec("relu", "relu1"),
        net.LayerSpec("fire", "fire2", in_channels=3, squeeze=2, expand1x1=2, expand3x3=2),
        net.LayerSpec("flatten"),
        net.LayerSpec("dense", "fc", in_features=4 * 8 * 8, out_features=2),
        net.LayerSpec("softmax"),
    ])
    m = net.init_model(cfg, 2)
    m = net.ModelState(cfg, {k: v.astype(np.float64) for k, v in m.params.items()}, m.meta)
    for k, v in m.params.items():
        if k.endswith(".bias"):
            v[...] = rng.uniform(-0.1, 0.1, v.shape)
    x, y = rng.uniform(-1, 1, (3, 1, 8, 8)), np.array([0, 1, 1])
    _, _, grads = net.loss_and_grads(m, x, y)
    f = lambda: net.loss_and_grads(m, x, y)[0]  # noqa: E731
    errs["end-to-end"] = max(max_rel_err(grads[k], numeric_grad(f, m.params[k], 1e-6)) for k in grads)

    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    note(request, f"worst rel err {errs[worst]:.2e} ({worst}), {elapsed:.1f}s")
    assert all(e < 1e-4 for e in errs.values()), errs
    assert elapsed < 60


# --- C3 --------------------------------------------------------------------------

def test_c03_synthetic_end_to_end(request, patches, trained):
    train_ps, test_ps = patches
    model, log, seconds = trained
    curve = evaluate(model, test_ps)
    note(request, f"{len(train_ps)} train / {len(test_ps)} test patches, {TRAIN_EPOCHS} epochs in "
                  f"{seconds:.0f}s, AUC {curve.auc:.4f}, AP {curve.ap:.4f}")
    assert len(train_ps) >= 2000 and len(test_ps) >= 1000
    assert train_ps.patch_size == 20
    assert len(log) <= 20
    assert curve.auc >= 0.99 and curve.ap >= 0.95
    assert seconds < 600


# --- C4 --------------------------------------------------------------------------

def test_c04_trained_quantization(request, trained, finetuned, patches, tmp_path):
    model = trained[0]
    _, tuned = finetuned
    float_auc = evaluate(model, patches[1]).auc
    quant_auc = evaluate(qz.dequantize(tuned), patches[1]).auc
    fsize = modelio.save_model(model, tmp_path / "m.mdf")
    qsize = qz.save_quantized(tuned, tmp_path / "m.mdq")
    rep = qz.compression_report(model, tuned)
    note(request, f"AUC float {float_auc:.4f} vs k=16 {quant_auc:.4f} after {FINETUNE_EPOCHS} epochs; "
                  f"{fsize} -> {qsize} bytes ({fsize / qsize:.2f}x)")
    assert abs(float_auc - quant_auc) <= 0.005
    assert qsize * 6 <= fsize
    assert rep.original_bytes == (tmp_path / "m.mdf").stat().st_size
    assert rep.compressed_bytes == (tmp_path / "m.mdq").stat().st_size


# --- C5 --------------------------------------------------------------------------

def test_c05_footprint(request):
    m = net.init_model(net.default_config(20), SEED)
    kb = len(modelio.model_to_bytes(m)) / 1000
    note(request, f"{kb:.1f} kB vs 549.4 kB ({(kb - 549.4) / 549.4:+.1%})")
    assert abs(kb - 549.4) / 549.4 <= 0.10


# --- C6 --------------------------------------------------------------------------

def test_c06_nms(request):
    rng = np.random.default_rng(6)
    cfg = dt.DetectionConfig()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(0, 201))
        cands = []
        for _ in range(n):
            x, y = (int(v) for v in rng.integers(0, 120, 2))
            w, h = (int(v) for v in rng.integers(8, 40, 2))
            cands.append(dt.Detection(ds.BoundingBox(x, y, w, h), float(rng.integers(990, 1000)) / 1000))
        kept = dt.nms(cands, cfg.overlap_threshold)
        as_tuple = [(d.box.x, d.box.y, d.box.w, d.box.h, d.score) for d in kept]
        assert as_tuple == nms_ref([(d.box.x, d.box.y, d.box.w, d.box.h, d.score) for d in cands],
                                   cfg.overlap_threshold)
        for i, a in enumerate(as_tuple):
            for b in as_tuple[i + 1:]:
                worst = max(worst, rect_iou(a, b))
    note(request, f"max pairwise IoU of kept boxes {worst:.3f}")
    assert worst <= 0.3


# --- C7 --------------------------------------------------------------------------

def test_c07_detection(request, trained):
    model = trained[0]
    cfg = dt.DetectionConfig(window=20, detection_threshold=0.99, overlap_threshold=0.3)
    images = ds.generate_synthetic(ds.SynthConfig(seed=SEED), 50, start=100_000)
    tp = fp = fn = 0
    for img in images:
        a, b, c = dt.match_detections(dt.detect(img.pixels, model, cfg), img.boxes, 0.3)
        tp, fp, fn = tp + a, fp + b, fn + c
    precision, recall = tp / max(tp + fp, 1), tp / max(tp + fn, 1)

    blanks = ds.generate_synthetic(ds.SynthConfig(seed=SEED, blob_count=(0, 0)), 10, start=200_000)
    blank_dets = sum(len(dt.detect(img.pixels, model, cfg)) for img in blanks)

    single = ds.generate_synthetic(ds.SynthConfig(seed=SEED, blob_count=(1, 1)), 5, start=300_000)
    singles_ok = 0
    for img in single:
        dets = dt.detect(img.pixels, model, cfg)
        blob = img.meta["blobs"][0]
        if len(dets) == 1:
            box = dets[0].box
            singles_ok += box.x <= blob["cx"] < box.x + box.w and box.y <= blob["cy"] < box.y + box.h

    note(request, f"TP {tp} FP {fp} FN {fn}: precision {precision:.3f}, recall {recall:.3f}; "
                  f"{blank_dets} detections on 10 blank images; {singles_ok}/5 single-blob images exact")
    assert recall >= 0.9 and precision >= 0.8
    assert blank_dets == 0
    assert singles_ok == 5


# --- C8 --------------------------------------------------------------------------

def test_c08_evaluation_oracles(request):
    rng = np.random.default_rng(8)
    worst_auc = worst_ap = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        data = mt.ScoredLabelSet(scores, labels)
        worst_auc = max(worst_auc, abs(mt.roc(data).auc - auc_pairwise(scores.tolist(), labels.tolist())))
        worst_ap = max(worst_ap, abs(mt.precision_recall(data).ap - ap_sweep(scores.tolist(), labels.tolist())))
    note(request, f"max |AUC err| {worst_auc:.1e}, max |AP err| {worst_ap:.1e}")
    assert worst_auc <= 1e-9 and worst_ap <= 1e-9


# --- C9 --------------------------------------------------------------------------

def _artifacts(tmp_path, tag):
    images = ds.generate_synthetic(ds.SynthConfig(seed=9), 12)
    ps = ds.prepare_patches(images, neg_per_image=12, augment=2, seed=9)
    ds.save_patchset(ps, tmp_path / f"{tag}.pst")
    model = net.init_model(net.default_config(20), 9)
    model, _ = net.train(model, ps, net.TrainingConfig(batch_size=32, epochs=2, seed=9))
    modelio.save_model(model, tmp_path / f"{tag}.mdf")
    qcfg = qz.QuantizeConfig(k=16, finetune_epochs=1, batch_size=32, seed=9)
    qm = qz.quantize_model(model, qcfg)
    qz.save_quantized(qm, tmp_path / f"{tag}.mdq")
    tuned, _ = qz.finetune(qm, ps, qcfg)
    qz.save_quantized(tuned, tmp_path / f"{tag}.ft.mdq")
    cfg = dt.DetectionConfig(detection_threshold=0.5)
    dt.write_detections(((im.source, dt.detect(im.pixels, model, cfg)) for im in images[:4]),
                        tmp_path / f"{tag}.jsonl")
    return {kind: (tmp_path / f"{tag}.{kind}").read_bytes()
            for kind in ("pst", "mdf", "mdq", "ft.mdq", "jsonl")}


def test_c09_determinism(request, tmp_path):
    a = _artifacts(tmp_path, "a")
    b = _artifacts(tmp_path, "b")
    same = [k for k in a if a[k] == b[k]]
    note(request, f"identical: {', '.join(same)}")
    assert same == list(a)


# --- C10 -------------------------------------------------------------------------

def test_c10_bench(request):
    model = net.init_model(net.default_config(20), SEED)
    rep = bench.bench_inference(model, count=1000, warmup=50, seed=SEED)
    lat = np.array(rep.latencies_ms)
    note(request, f"mean {rep.mean_ms:.3f} ms, median {rep.median_ms:.3f}, p95 {rep.p95_ms:.3f}, "
                  f"min {rep.min_ms:.3f}, {rep.throughput_per_s:.0f} samples/s")
    assert rep.samples_run == len(lat) == 1000 and rep.warmup_count == 50
    assert rep.mean_ms == float(lat.mean()) and rep.median_ms == float(np.median(lat))
    assert rep.p95_ms == float(np.percentile(lat, 95)) and rep.min_ms == float(lat.min())
    assert rep.min_ms <= rep.median_ms <= rep.p95_ms
    assert rep.throughput_per_s == pytest.approx(1000 / rep.mean_ms)
    assert rep.power == "unmeasured"
    assert rep.reference["Intel i5-6300U"]["time_per_sample_ms"] == 1.1
    assert rep.reference["Movidius NCS + Raspberry Pi3"]["time_per_sample_ms"] == 2.7
