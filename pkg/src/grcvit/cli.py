"""Command line front end.

Exit codes: 0 success, 2 bad arguments, 3 I/O failure, 4 numeric failure.
Every command writes ``resolved_config.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import complexity as cx
from . import estimator as est
from .imgcore import (
    GrayImage,
    ImageError,
    RgbImage,
    SyntheticSpec,
    generate,
    load_image,
    resize_rgb,
    textured_rgb,
)
from .model import flops as fl
from .model.config import reference_config, tiny_config
from .model.network import GrcViT, route_and_forward
from .model.train import FineTrainConfig, ToyDataset, parse_routing, textured_dataset, train_fine_toy
from .tensor import ops
from .tensor.gradcheck import analytic_grads

log = logging.getLogger("grcvit")

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm")
GRADCHECK_THRESHOLD = 1e-3


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


# keys each command accepts from flags or the config file, with defaults
COMMON = {"input": None, "out": None, "seed": 0, "size": 64, "period": 1, "value": 0.5}
DEFAULTS = {
    "profile": {**COMMON, "estimator": None, "alpha": None, "beta": None, "workers": 1, "freq_mode": "ratio"},
    "train-estimator": {**COMMON, "epochs": 15, "preset": "desk", "lr": None, "batch": None,
                        "margin": 0.05, "routing_weight": 0.1, "target_range": "fused"},
    "flops": {"input": None, "out": None},
    "train-toy": {**COMMON, "size": 32, "epochs": 10, "routing": "adaptive", "estimator": None,
                  "checkpoint": None, "model": "tiny", "lr": None, "batch": 32, "count": 600,
                  "test_count": 150, "flip": True},
    "route": {**COMMON, "size": 32, "estimator": None, "alpha": None, "beta": None,
              "checkpoint": None, "model": "tiny"},
    "gradcheck": {"out": None, "seed": 0, "step": 1e-5, "max_coords": None},
    "attn-dump": {**COMMON, "size": 32, "checkpoint": None, "granularity": None,
                  "estimator": None, "model": "tiny"},
}


def read_config_file(path) -> dict:
    """JSON object, or ``key = value`` lines (values parsed as JSON when possible)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        doc = json.loads(text)
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        return doc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            from_file = read_config_file(args.config)
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        from_file = {k.replace("-", "_"): v for k, v in from_file.items()}
        unknown = sorted(set(from_file) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {unknown}")
        cfg.update(from_file)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _write_resolved(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(cfg: dict) -> Path:
    if not cfg.get("out"):
        raise UsageError("--out is required")
    return Path(cfg["out"])


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Inputs


def synthetic_images(text: str, cfg: dict) -> list[tuple[str, GrayImage]]:
    """``synthetic:<kind>[:<count>]``; kind ``textured`` cycles the three classes."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise UsageError(f"bad synthetic input {text!r}")
    kind = parts[1]
    count = int(parts[2]) if len(parts) == 3 else 1
    if count < 0:
        raise UsageError("synthetic count must be >= 0")
    size, seed = int(cfg["size"]), int(cfg["seed"])
    out = []
    for i in range(count):
        if kind == "textured":
            spec = SyntheticSpec("textured-class", size, size, seed=seed * 1_000_003 + i, class_id=i % 3)
        else:
            try:
                spec = SyntheticSpec(kind, size, size, period=int(cfg["period"]), seed=seed + i,
                                     value=float(cfg["value"]))
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
        out.append((f"synthetic-{kind}-{i:05d}", generate(spec)))
    return out


def load_inputs(cfg: dict):
    """(id, image) pairs from a directory, a single file or a synthetic spec."""
    src = cfg.get("input")
    if not src:
        raise UsageError("--input is required")
    if str(src).startswith("synthetic:"):
        return synthetic_images(str(src), cfg)
    path = Path(src)
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
        return [(str(p), load_image(p)) for p in files]
    if path.is_file():
        return [(str(path), load_image(path))]
    raise FileNotFoundError(f"input {src} does not exist")


def _estimator(cfg: dict) -> cx.EstimatorParams:
    if cfg.get("estimator"):
        return cx.EstimatorParams.load(cfg["estimator"])
    return cx.EstimatorParams()


def _thresholds(cfg: dict, params: cx.EstimatorParams) -> cx.Thresholds:
    th = cx.thresholds_from_raw(params)
    alpha = th.alpha if cfg.get("alpha") is None else float(cfg["alpha"])
    beta = th.beta if cfg.get("beta") is None else float(cfg["beta"])
    if cfg.get("alpha") is not None and cfg.get("beta") is None:
        beta = max(beta, alpha)
    try:
        return cx.Thresholds(alpha, beta)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _model_config(name: str, num_classes: int = 3):
    if name == "tiny":
        return tiny_config(num_classes)
    if name == "reference":
        return reference_config(num_classes)
    raise UsageError(f"unknown model {name!r}; expected tiny or reference")


def _as_rgb(img) -> RgbImage:
    return img.to_rgb() if isinstance(img, GrayImage) else img


# ---------------------------------------------------------------------------
# Commands


def cmd_profile(cfg: dict) -> int:
    out = _out_dir(cfg)
    items = load_inputs(cfg)
    if not items:
        raise UsageError("no images found in input")
    params = _estimator(cfg)
    th = _thresholds(cfg, params)
    mode = cfg["freq_mode"]
    if mode not in cx.FREQ_MODES:
        raise UsageError(f"unknown freq_mode {mode!r}")

    def one(item):
        return cx.extract_features(item[1], freq_mode=mode)

    workers = max(1, int(cfg["workers"]))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            feats = list(pool.map(one, items))
    else:
        feats = [one(it) for it in items]
    rows, levels, scores = [], [], []
    for (name, _), f in zip(items, feats):
        phi = cx.fuse_score(f, params)
        g = cx.assign_granularity(phi, th)
        rows.append([name, repr(f.edge), repr(f.entropy), repr(f.freq), repr(phi), g])
        levels.append(g)
        scores.append(phi)
    _write_resolved(cfg, out)
    (out / "complexity.csv").write_text(
        _csv_text(["path", "edge", "entropy", "freq", "phi", "granularity"], rows), encoding="utf-8")
    n = len(levels)
    hist = {
        "count": n,
        "mean_phi": float(np.mean(scores)),
        "alpha": th.alpha,
        "beta": th.beta,
        "levels": {name: {"count": levels.count(g), "percent": 100.0 * levels.count(g) / n}
                   for g, name in ((1, "coarse"), (2, "medium"), (3, "fine"))},
    }
    (out / "histogram.json").write_text(json.dumps(hist, indent=1) + "\n", encoding="utf-8")
    print(json.dumps(hist))
    return EXIT_OK


def cmd_train_estimator(cfg: dict) -> int:
    out = _out_dir(cfg)
    items = load_inputs(cfg)
    if len(items) < 3:
        raise UsageError("estimator training needs at least 3 images")
    corpus = est.ComplexityCorpus.from_images([i for i, _ in items], [im for _, im in items])
    ranges = {"fused": est.FUSED_RANGE, "unit": (0.0, 1.0)}
    if cfg["target_range"] not in ranges:
        raise UsageError("target_range must be 'fused' or 'unit'")
    if cfg["preset"] == "desk":
        tc = est.CoarseTrainConfig.desk()
    elif cfg["preset"] == "reference":
        tc = est.CoarseTrainConfig()
    else:
        raise UsageError("preset must be 'desk' or 'reference'")
    try:
        tc = est.CoarseTrainConfig(
            lr=float(cfg["lr"]) if cfg["lr"] is not None else tc.lr,
            batch=int(cfg["batch"]) if cfg["batch"] is not None else tc.batch,
            epochs=int(cfg["epochs"]), margin=float(cfg["margin"]),
            routing_weight=float(cfg["routing_weight"]), seed=int(cfg["seed"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        targets = est.compute_quantile_targets(corpus, target_range=ranges[cfg["target_range"]])
    except est.DegenerateQuantilesError as exc:
        raise NumericFailure(str(exc)) from exc
    try:
        params, trace = est.train_estimator(corpus, targets, tc)
    except est.TrainingDivergedError as exc:
        (out / "trace.csv").parent.mkdir(parents=True, exist_ok=True)
        (out / "trace.csv").write_text(est.trace_csv(exc.trace), encoding="utf-8")
        raise
    _write_resolved(cfg, out)
    params.save(out / "estimator.json")
    (out / "trace.csv").write_text(est.trace_csv(trace), encoding="utf-8")
    summary = {"initial_loss": trace[0].loss, "final_loss": trace[-1].loss,
               "alpha": trace[-1].alpha, "beta": trace[-1].beta,
               "agreement": est.routing_agreement(params, corpus, targets)}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_flops(cfg: dict) -> int:
    if cfg.get("input"):
        doc = json.loads(Path(cfg["input"]).read_text(encoding="utf-8"))
        try:
            sweep = fl.parse_sweep(doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"bad sweep file: {exc}") from exc
    else:
        sweep = fl.reference_sweep()
    text = fl.sweep_csv(sweep)
    if cfg.get("out"):
        out = Path(cfg["out"])
        _write_resolved(cfg, out)
        (out / "flops.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _toy_data(cfg: dict, model_cfg):
    src = str(cfg["input"] or "synthetic:textured")
    size = model_cfg.image_size
    if src.startswith("synthetic:"):
        seed = int(cfg["seed"])
        return (textured_dataset(int(cfg["count"]), size, seed=2 * seed + 100),
                textured_dataset(int(cfg["test_count"]), size, seed=2 * seed + 101))
    root = Path(src)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset folder {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for label, name in enumerate(classes):
        for p in sorted((root / name).iterdir()):
            if p.suffix.lower() in IMAGE_SUFFIXES:
                img = load_image(p)
                if (img.width, img.height) != (size, size):
                    img = resize_rgb(img, size, size)
                images.append(img.data)
                labels.append(label)
    if not images:
        raise UsageError(f"no labelled images under {root}")
    return ToyDataset(np.stack(images), np.array(labels)), None


def cmd_train_toy(cfg: dict) -> int:
    out = _out_dir(cfg)
    probe = _model_config(cfg["model"])
    train, test = _toy_data(cfg, probe)
    num_classes = max(3, int(train.labels.max()) + 1)
    model_cfg = _model_config(cfg["model"], num_classes)
    estimator = None
    if str(cfg["routing"]).startswith("adaptive"):
        if cfg.get("estimator"):
            estimator = cx.EstimatorParams.load(cfg["estimator"])
        else:
            # no estimator supplied: fit one on the training images, label-free
            corpus = est.ComplexityCorpus.from_images([str(i) for i in range(len(train))],
                                                      [RgbImage(im) for im in train.images])
            estimator, _ = est.train_estimator(corpus, est.compute_quantile_targets(corpus),
                                               est.CoarseTrainConfig.desk(seed=int(cfg["seed"])))
    try:
        routing = parse_routing(str(cfg["routing"]), estimator)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    tc = FineTrainConfig.desk(seed=int(cfg["seed"]), epochs=int(cfg["epochs"]), batch=int(cfg["batch"]),
                              flip=bool(cfg["flip"]))
    if cfg["lr"] is not None:
        tc.lr = float(cfg["lr"])
    model, trace = train_fine_toy(model_cfg, train, routing, tc, test=test)
    _write_resolved(cfg, out)
    ckpt = Path(cfg["checkpoint"]) if cfg.get("checkpoint") else out / "model"
    model.save(ckpt)
    if estimator is not None:
        estimator.save(out / "estimator.json")
    keys = list(trace[0]) if trace else ["epoch", "loss", "accuracy"]
    rows = [[r[k] if k == "epoch" else repr(r[k]) for k in keys] for r in trace]
    (out / "trace.csv").write_text(_csv_text(keys, rows), encoding="utf-8")
    print(json.dumps(trace[-1] if trace else {}))
    return EXIT_OK


def _load_model(cfg: dict) -> GrcViT:
    if cfg.get("checkpoint"):
        return GrcViT.load(cfg["checkpoint"])
    return GrcViT(_model_config(cfg["model"]), seed=int(cfg["seed"]))


def _single_input(cfg: dict) -> RgbImage:
    items = load_inputs(cfg)
    if len(items) != 1:
        raise UsageError(f"expected exactly one input image, got {len(items)}")
    return _as_rgb(items[0][1])


def cmd_route(cfg: dict) -> int:
    img = _single_input(cfg)
    params = _estimator(cfg)
    th = _thresholds(cfg, params)
    model = _load_model(cfg)
    size = model.cfg.image_size
    resized = img if (img.width, img.height) == (size, size) else resize_rgb(img, size, size)
    score = cx.fuse_score(cx.extract_features(resized), params)
    g, logits = route_and_forward(img, params, th, model)
    result = {"granularity": g, "phi": score, "alpha": th.alpha, "beta": th.beta,
              "logits": [float(x) for x in logits]}
    if cfg.get("out"):
        out = Path(cfg["out"])
        _write_resolved(cfg, out)
        (out / "route.json").write_text(json.dumps(result, indent=1) + "\n", encoding="utf-8")
    print(f"granularity {g}")
    print(json.dumps(result))
    return EXIT_OK


def gradcheck_tiny(seed: int = 0, h: float = 1e-5, max_coords: int | None = None) -> float:
    """Full-model gradient check of the tiny configuration in float64.

    The loss sums cross-entropy over one image per granularity so that every
    parameter is reached. ``max_coords`` limits the checked coordinates per
    tensor (a seeded random subset) for quick runs.
    """
    cfg = tiny_config()
    model = GrcViT(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for _, t in model.params.items():
        # move off the zero/one initialisation so biases and tables matter
        t.data = t.data + rng.normal(0.0, 0.1, size=t.shape)
    images = rng.uniform(0.0, 1.0, size=(3, cfg.image_size, cfg.image_size, 3))
    labels = np.array([0, 1, 2])

    def loss(*_):
        total = None
        for i, g in enumerate((1, 2, 3)):
            part = ops.cross_entropy(model.forward(images[i:i + 1], g), labels[i:i + 1])
            total = part if total is None else ops.add(total, part)
        return total

    tensors = model.params.tensors()
    analytic = analytic_grads(loss, tensors)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            plus = float(loss().data)
            flat[i] = orig - h
            minus = float(loss().data)
            flat[i] = orig
            num = (plus - minus) / (2 * h)
            ana = float(a.reshape(-1)[i])
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    return worst


def cmd_gradcheck(cfg: dict) -> int:
    max_coords = None if cfg.get("max_coords") is None else int(cfg["max_coords"])
    err = gradcheck_tiny(int(cfg["seed"]), float(cfg["step"]), max_coords)
    result = {"max_relative_error": err, "threshold": GRADCHECK_THRESHOLD, "passed": err < GRADCHECK_THRESHOLD}
    if cfg.get("out"):
        out = Path(cfg["out"])
        _write_resolved(cfg, out)
        (out / "gradcheck.json").write_text(json.dumps(result) + "\n", encoding="utf-8")
    print(f"max relative error {err:.3e}")
    if err >= GRADCHECK_THRESHOLD:
        raise NumericFailure(f"gradient check failed: {err:.3e} >= {GRADCHECK_THRESHOLD}")
    return EXIT_OK


def cmd_attn_dump(cfg: dict) -> int:
    out = _out_dir(cfg)
    img = _single_input(cfg)
    model = _load_model(cfg)
    size = model.cfg.image_size
    if (img.width, img.height) != (size, size):
        img = resize_rgb(img, size, size)
    if cfg.get("granularity") is not None:
        g = int(cfg["granularity"])
        if g not in [lv.level for lv in model.cfg.levels]:
            raise UsageError(f"granularity {g} is not configured in the model")
    else:
        params = _estimator(cfg)
        _, g = cx.estimate(img, params)
    recorder: list[np.ndarray] = []
    model.forward(img, g, recorder)
    _write_resolved(cfg, out)
    for layer, probs in enumerate(recorder):
        bw, heads, n, _ = probs.shape
        rows = []
        for w in range(bw):
            for h in range(heads):
                for q in range(n):
                    rows.append([layer, w, h, q] + [repr(float(x)) for x in probs[w, h, q]])
        header = ["layer", "window", "head", "query"] + [f"k{j}" for j in range(n)]
        (out / f"attn_layer{layer}.csv").write_text(_csv_text(header, rows), encoding="utf-8")
    print(json.dumps({"granularity": g, "layers": len(recorder)}))
    return EXIT_OK


COMMANDS = {
    "profile": cmd_profile,
    "train-estimator": cmd_train_estimator,
    "flops": cmd_flops,
    "train-toy": cmd_train_toy,
    "route": cmd_route,
    "gradcheck": cmd_gradcheck,
    "attn-dump": cmd_attn_dump,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grcvit", description="Complexity-routed multi-granularity transformer tools.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON or key=value file; flags override it")
        keys = DEFAULTS[name]
        if "input" in keys:
            p.add_argument("--input", help="image file, image directory, or synthetic:<kind>[:<count>]")
        if "out" in keys:
            p.add_argument("--out", help="output directory")
        if "seed" in keys:
            p.add_argument("--seed", type=int)
        if "epochs" in keys:
            p.add_argument("--epochs", type=int)
        if "estimator" in keys:
            p.add_argument("--estimator", help="estimator JSON {w, a, b}")
        if "checkpoint" in keys:
            p.add_argument("--checkpoint", help="model checkpoint path (manifest stem)")
        if "routing" in keys:
            p.add_argument("--routing", help="adaptive | fixed:<g> | random:<seed>")
        if "granularity" in keys:
            p.add_argument("--granularity", type=int, choices=(1, 2, 3))
        if "alpha" in keys:
            p.add_argument("--alpha", type=float)
            p.add_argument("--beta", type=float)
        if "size" in keys:
            p.add_argument("--size", type=int, help="side of synthetic images")
        if "workers" in keys:
            p.add_argument("--workers", type=int)
        if "max_coords" in keys:
            p.add_argument("--max-coords", dest="max_coords", type=int)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args.command, args)
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_ARGS
    except (OSError, ImageError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (NumericFailure, ArithmeticError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
