"""Command-line workflow: synth -> extract -> train -> quantize -> finetune -> detect -> eval -> bench.

Every run writes a JSON manifest next to its output. Option values resolve
as: command-line flag, then ``--config`` JSON file, then built-in default.
Exit codes: 0 success, 1 usage error, 2 data or format error.
"""
import argparse
import datetime as _dt
import json
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from . import bench as bn
from . import dataset as ds
from . import detect as dt
from . import metrics as mt
from . import modelio
from . import network as net
from . import quantize as qz
from .raster import RasterError, load_raster


class UsageError(Exception):
    pass


DATA_ERRORS = (modelio.ModelFormatError, RasterError, ds.PatchFormatError, ds.AnnotationError,
               net.ConfigError, ValueError, KeyError, OSError)

# (flag, type, default, help); type None marks a boolean switch
COMMON = [("--seed", int, 42, "random seed"),
          ("--config", str, None, "JSON file of option values (flags take precedence)"),
          ("--workers", int, 1, "worker threads where a command supports them")]

COMMANDS = {
    "synth": ("generate synthetic microscopy images and annotations", [
        ("--out", str, None, "output directory (required)"),
        ("--images", int, 300, "number of images"),
        ("--height", int, 100, "image height"),
        ("--width", int, 100, "image width"),
        ("--max-blobs", int, 4, "maximum blobs per image"),
        ("--start", int, 0, "index of the first image"),
    ]),
    "extract": ("build a labelled patch archive from annotated images", [
        ("--annotations", str, None, "JSON-lines annotation file (required)"),
        ("--out", str, None, "output .pst archive (required)"),
        ("--patch-size", int, 20, "patch side in pixels"),
        ("--neg-per-image", int, 12, "negative patches sampled per image"),
        ("--max-neg-tries", int, 200, "sampling attempts per image"),
        ("--augment", int, 2, "positive multiplier via dihedral transforms"),
        ("--pos-fraction", float, 0.3, "target positive fraction after rebalancing"),
        ("--test-fraction", float, None, "hold out this fraction of source images"),
        ("--test-out", str, None, "archive for the held-out split"),
    ]),
    "train": ("train the classifier on a patch archive", [
        ("--patches", str, None, "training .pst archive (required)"),
        ("--out", str, None, "output .mdf model (required)"),
        ("--epochs", int, 20, "training epochs"),
        ("--lr", float, 1e-4, "Adam learning rate"),
        ("--batch-size", int, 256, "minibatch size"),
        ("--init", str, None, "initial weights from an existing .mdf model"),
    ]),
    "quantize": ("k-means weight sharing of a float model", [
        ("--model", str, None, "input .mdf model (required)"),
        ("--out", str, None, "output .mdq model (required)"),
        ("--k", int, 16, "clusters per weight tensor"),
        ("--report", str, None, "write the compression report JSON here"),
    ]),
    "finetune": ("retrain codebook centroids with assignments frozen", [
        ("--model", str, None, "input .mdq model (required)"),
        ("--patches", str, None, "training .pst archive (required)"),
        ("--out", str, None, "output .mdq model (required)"),
        ("--epochs", int, 5, "finetune epochs"),
        ("--lr", float, 1e-4, "Adam learning rate"),
        ("--batch-size", int, 256, "minibatch size"),
    ]),
    "infer": ("score every patch of an archive", [
        ("--model", str, None, ".mdf or .mdq model (required)"),
        ("--patches", str, None, ".pst archive (required)"),
        ("--out", str, None, "output CSV of index,label,score (required)"),
    ]),
    "detect": ("sliding-window detection over whole images", [
        ("--model", str, None, ".mdf or .mdq model (required)"),
        ("--image", str, None, "single PPM/PGM image"),
        ("--annotations", str, None, "JSON-lines file: detect on every listed image"),
        ("--out", str, None, "output JSON-lines detections (required)"),
        ("--overlay-dir", str, None, "write annotated PPM overlays here"),
        ("--stride", int, None, "window stride (default window/4)"),
        ("--detection-threshold", float, 0.99, "minimum positive probability"),
        ("--overlap-threshold", float, 0.3, "NMS IoU threshold"),
        ("--batch-size", int, 256, "windows scored per forward pass"),
    ]),
    "eval": ("ROC/PR evaluation on a patch archive", [
        ("--model", str, None, ".mdf or .mdq model (required)"),
        ("--patches", str, None, "test .pst archive (required)"),
        ("--out", str, None, "export prefix for <out>.csv / <out>.json"),
        ("--threshold", float, 0.99, "operating point for the confusion summary"),
    ]),
    "bench": ("per-sample inference latency", [
        ("--model", str, None, ".mdf or .mdq model (required)"),
        ("--count", int, 1000, "timed inferences"),
        ("--warmup", int, 50, "untimed warmup inferences"),
        ("--batch-size", int, 256, "batch size for the separate throughput pass (0 = skip)"),
        ("--out", str, None, "write the JSON report here"),
    ]),
    "inspect": ("print model header, layers and sizes; optionally dump activation maps", [
        ("--model", str, None, ".mdf or .mdq model (required)"),
        ("--layer", str, None, "layer whose activations to dump"),
        ("--patches", str, None, "archive supplying the sample for --layer"),
        ("--index", int, 0, "patch index within --patches"),
        ("--out", str, None, "output PGM for the activation grid"),
    ]),
}

REQUIRED = {
    "synth": ["out"], "extract": ["annotations", "out"], "train": ["patches", "out"],
    "quantize": ["model", "out"], "finetune": ["model", "patches", "out"],
    "infer": ["model", "patches", "out"], "detect": ["model", "out"],
    "eval": ["model", "patches"], "bench": ["model"], "inspect": ["model"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_help()}")


def _dest(flag):
    return flag.lstrip("-").replace("-", "_")


def build_parser():
    p = _Parser(prog="smearnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"smearnet {__version__}")
    p.add_argument("--replay", metavar="MANIFEST", help="re-run a command from its manifest")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, (help_text, options) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        for flag, typ, default, h in options + COMMON:
            sp.add_argument(flag, type=typ, default=None,
                            help=f"{h} (default: {default})")
    return p


def resolve(command, ns):
    """Merge flags over the --config file over defaults."""
    options = COMMANDS[command][1] + COMMON
    file_values = {}
    if ns.config:
        with open(ns.config, encoding="utf-8") as f:
            file_values = {k.replace("-", "_"): v for k, v in json.load(f).items()}
    known = {_dest(o[0]) for o in options}
    unknown = set(file_values) - known
    if unknown:
        raise UsageError(f"unknown keys in {ns.config}: {sorted(unknown)}; valid: {sorted(known)}")
    out = {}
    for flag, typ, default, _ in options:
        key = _dest(flag)
        val = getattr(ns, key, None)
        if val is None:
            val = file_values.get(key, default)
        out[key] = val
    missing = [k for k in REQUIRED[command] if out.get(k) is None]
    if missing:
        flags = ", ".join(o[0] for o in options)
        raise UsageError(f"{command}: missing required option(s) "
                         f"{', '.join('--' + m.replace('_', '-') for m in missing)}; options: {flags}")
    return out


def load_any_model(path):
    """Returns ``(ModelState, QuantizedModel or None)`` for either file type."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] == qz.QUANT_MAGIC:
        qm = qz.quantized_from_bytes(buf)
        return qz.dequantize(qm), qm
    return modelio.model_from_bytes(buf), None


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _manifest_path(cmd, opts):
    out = opts.get("out")
    if cmd == "synth":
        return os.path.join(out, "manifest.json")
    if out:
        return out + ".manifest.json"
    return None


def _write_manifest(cmd, opts, started, outputs):
    path = _manifest_path(cmd, opts)
    if path is None:
        return None
    doc = {"subcommand": cmd, "options": opts, "seed": opts.get("seed"),
           "inputs": {k: v for k, v in opts.items()
                      if k in ("annotations", "patches", "model", "image", "init", "config") and v},
           "outputs": outputs, "version": __version__, "started": started, "finished": _now()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_synth(o):
    cfg = ds.SynthConfig(image_size=(o["height"], o["width"]), blob_count=(0, o["max_blobs"]),
                         seed=o["seed"])
    images = ds.generate_synthetic(cfg, o["images"], start=o["start"])
    ann = ds.write_dataset(images, o["out"])
    print(f"wrote {len(images)} images, {sum(len(i.boxes) for i in images)} annotations -> {ann}")
    return [ann]


def cmd_extract(o):
    images = ds.load_annotations(o["annotations"])
    ps = ds.prepare_patches(images, o["patch_size"], o["neg_per_image"], o["max_neg_tries"],
                            o["augment"], o["pos_fraction"], o["seed"])
    outputs = []
    if o["test_fraction"]:
        if not o["test_out"]:
            raise UsageError("extract: --test-fraction needs --test-out")
        train_ps, test_ps = ds.split(ps, o["test_fraction"], o["seed"])
        ds.save_patchset(test_ps, o["test_out"])
        outputs.append(o["test_out"])
        print(f"test split: {len(test_ps)} patches ({int(test_ps.labels.sum())} positive) -> {o['test_out']}")
        ps = train_ps
    ds.save_patchset(ps, o["out"])
    print(f"{len(ps)} patches ({int(ps.labels.sum())} positive) -> {o['out']}")
    return [o["out"]] + outputs


def cmd_train(o):
    ps = ds.load_patchset(o["patches"])
    if o["init"]:
        model = modelio.load_model(o["init"])
    else:
        model = net.init_model(net.default_config(ps.patch_size, ps.patches.shape[1]), o["seed"])
    cfg = net.TrainingConfig(lr=o["lr"], batch_size=o["batch_size"], epochs=o["epochs"], seed=o["seed"])
    model, log = net.train(model, ps, cfg, on_epoch=lambda r: print(
        f"epoch {r['epoch']:3d}  loss {r['loss']:.6f}  accuracy {r['accuracy']:.4f}"))
    n = modelio.save_model(model, o["out"])
    print(f"model -> {o['out']} ({n / 1000:.1f} kB)")
    return [o["out"]]


def cmd_quantize(o):
    model = modelio.load_model(o["model"])
    qm = qz.quantize_model(model, qz.QuantizeConfig(k=o["k"], seed=o["seed"]))
    qz.save_quantized(qm, o["out"])
    rep = qz.compression_report(model, qm)
    print(rep.to_text())
    outputs = [o["out"]]
    if o["report"]:
        with open(o["report"], "w", encoding="utf-8") as f:
            json.dump(rep.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        outputs.append(o["report"])
    return outputs


def cmd_finetune(o):
    qm = qz.load_quantized(o["model"])
    ps = ds.load_patchset(o["patches"])
    qcfg = qz.QuantizeConfig(finetune_epochs=o["epochs"], finetune_lr=o["lr"],
                             batch_size=o["batch_size"], seed=o["seed"])
    qm, _ = qz.finetune(qm, ps, qcfg, on_epoch=lambda r: print(
        f"epoch {r['epoch']:3d}  loss {r['loss']:.6f}  accuracy {r['accuracy']:.4f}"))
    n = qz.save_quantized(qm, o["out"])
    print(f"quantized model -> {o['out']} ({n / 1000:.1f} kB)")
    return [o["out"]]


def cmd_infer(o):
    model, _ = load_any_model(o["model"])
    ps = ds.load_patchset(o["patches"])
    scores = net.predict_scores(model, ps.patches)
    with open(o["out"], "w", encoding="utf-8") as f:
        f.write("index,label,score\n")
        for i, (y, s) in enumerate(zip(ps.labels, scores)):
            f.write(f"{i},{int(y)},{float(s):.6g}\n")
    print(f"scored {len(scores)} patches -> {o['out']}")
    return [o["out"]]


def cmd_detect(o):
    model, _ = load_any_model(o["model"])
    if bool(o["image"]) == bool(o["annotations"]):
        raise UsageError("detect: give exactly one of --image or --annotations")
    if o["image"]:
        images = [ds.AnnotatedImage(load_raster(o["image"]), [], os.path.basename(o["image"]))]
    else:
        images = ds.load_annotations(o["annotations"])
    cfg = dt.DetectionConfig(window=model.config.input[1], stride=o["stride"],
                             detection_threshold=o["detection_threshold"],
                             overlap_threshold=o["overlap_threshold"], batch_size=o["batch_size"])
    with ThreadPoolExecutor(max_workers=max(1, o["workers"])) as pool:
        results = list(pool.map(lambda im: dt.detect(im.pixels, model, cfg), images))
    dt.write_detections(((im.source, d) for im, d in zip(images, results)), o["out"])
    outputs = [o["out"]]
    tp = fp = fn = 0
    for im, dets in zip(images, results):
        a, b, c = dt.match_detections(dets, im.boxes)
        tp, fp, fn = tp + a, fp + b, fn + c
        if o["overlay_dir"]:
            os.makedirs(o["overlay_dir"], exist_ok=True)
            stem = os.path.splitext(os.path.basename(im.source))[0]
            path = os.path.join(o["overlay_dir"], f"{stem}_detections.ppm")
            dt.render_detections(im.pixels, dets, im.boxes, path)
            outputs.append(path)
    print(f"{sum(len(d) for d in results)} detections in {len(images)} image(s) -> {o['out']}")
    if o["annotations"]:
        print(f"matched against annotations: TP {tp}  FP {fp}  FN {fn}  "
              f"precision {tp / max(tp + fp, 1):.4f}  recall {tp / max(tp + fn, 1):.4f}")
    return outputs


def cmd_eval(o):
    model, _ = load_any_model(o["model"])
    ps = ds.load_patchset(o["patches"])
    data = mt.ScoredLabelSet(net.predict_scores(model, ps.patches), ps.labels)
    curve = mt.roc(data)
    conf = mt.confusion_at(data, o["threshold"])
    print(f"AUC {curve.auc:.6f}  AP {curve.ap:.6f}  ({curve.n_pos} positive / {curve.n_neg} negative)")
    print(f"at threshold {o['threshold']}: TP {conf.tp} FP {conf.fp} TN {conf.tn} FN {conf.fn}  "
          f"precision {conf.precision:.4f} recall {conf.recall:.4f} f1 {conf.f1:.4f}")
    if o["out"]:
        return list(mt.export_curves(curve, o["out"]))
    return []


def cmd_bench(o):
    model, qm = load_any_model(o["model"])
    rep = bn.bench_inference(qm if qm is not None else model, count=o["count"], warmup=o["warmup"],
                             seed=o["seed"], batch_size=o["batch_size"] or None)
    with open(o["model"], "rb") as f:
        size = len(f.read()) / 1000
    if qm is None:
        rep.float_kB = size
    else:
        rep.quantized_kB = size
    print(rep.to_text())
    if o["out"]:
        with open(o["out"], "w", encoding="utf-8") as f:
            f.write(rep.to_json() + "\n")
        return [o["out"]]
    return []


def cmd_inspect(o):
    model, qm = load_any_model(o["model"])
    kind = "quantized (MDQ1)" if qm is not None else "float (MDF1)"
    print(f"{o['model']}: {kind}, input {tuple(model.config.input)}, meta {json.dumps(model.meta, sort_keys=True)}")
    shapes = model.config.shapes()
    for name, spec, shape in zip(model.config.layer_names(), model.config.layers, shapes):
        print(f"  {name:<12} {spec.kind:<10} -> {shape}")
    for name, arr in model.params.items():
        extra = f"  k={qm.codebooks[name].k}" if qm is not None and name in qm.codebooks else ""
        print(f"  {name:<26} {str(arr.shape):<18} {arr.size * 4 / 1000:8.1f} kB{extra}")
    print(f"total float parameter size {model.parameter_bytes() / 1000:.1f} kB")
    if o["layer"]:
        if not (o["patches"] and o["out"]):
            raise UsageError("inspect: --layer needs --patches and --out")
        if o["layer"] not in model.config.layer_names():
            raise UsageError(f"inspect: unknown layer {o['layer']!r}; valid: "
                             f"{', '.join(model.config.layer_names())}")
        ps = ds.load_patchset(o["patches"])
        grid = net.dump_activations(model, ps.patches[o["index"]], o["layer"], o["out"])
        print(f"activation grid {grid.shape[1]}x{grid.shape[0]} -> {o['out']}")
        return [o["out"]]
    return []


HANDLERS = {"synth": cmd_synth, "extract": cmd_extract, "train": cmd_train,
            "quantize": cmd_quantize, "finetune": cmd_finetune, "infer": cmd_infer,
            "detect": cmd_detect, "eval": cmd_eval, "bench": cmd_bench, "inspect": cmd_inspect}


def run(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.replay:
        with open(ns.replay, encoding="utf-8") as f:
            doc = json.load(f)
        command, opts = doc["subcommand"], doc["options"]
    else:
        if ns.command is None:
            raise UsageError(parser.format_help())
        command = ns.command
        opts = resolve(command, ns)
    started = _now()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        outputs = HANDLERS[command](opts)
    _write_manifest(command, opts, started, outputs)
    return 0


def main(argv=None):
    try:
        return run(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
