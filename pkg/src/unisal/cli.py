"""Command-line surface.

Subcommands: train, eval, predict, inspect-bias, cross-domain,
gen-data, verify, report.  Exit codes follow one convention
everywhere: 0 success, 1 runtime failure, 2 usage or configuration
error.  Every command is deterministic given its flags and seed, and
anything that writes artifacts echoes the effective configuration
next to them.
"""

import argparse
import os
import sys

import numpy as np

from . import config as C
from . import data as D
from . import train as tr
from . import verify as V
from .model import UnisalModel, load_checkpoint
from .tensor import Tensor, no_grad

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _fail(msg, code):
    print(f"error: {msg}", file=sys.stderr)
    return code


def _load_cfg(args):
    cfg = C.load_config(getattr(args, "config", None))
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = args.epochs
    return C.apply_overrides(cfg, overrides)


def _ensure_out(path):
    os.makedirs(path, exist_ok=True)
    return path


def _datasets_from(cfg, reg, roots, names=None):
    datasets = {}
    for name in (names if names is not None else reg.names):
        root = roots.get(name, "")
        if not root:
            raise C.ConfigError(f"domain {name} has no dataset root")
        if not os.path.isdir(root):
            raise C.ConfigError(f"dataset root {root} does not exist")
        datasets[name] = D.load_dataset(root, reg[name])
    return datasets


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = _load_cfg(args)
    reg, roots = C.build_registry(cfg)
    datasets = _datasets_from(cfg, reg, roots)
    out = _ensure_out(args.out)
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(C.effective_text(cfg))

    model = UnisalModel(C.build_model_config(cfg), reg,
                        rng_seed=cfg["train.seed"])
    report = tr.train(
        model, datasets,
        policy=C.build_policy(cfg),
        opt=C.build_optimizer(cfg),
        weights=C.build_loss_weights(cfg),
        rng_seed=cfg["train.seed"],
        checkpoint_path=os.path.join(out, "model.ckpt"),
        log=print)
    with open(os.path.join(out, "train_report.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(report.text())
    print(f"checkpoint: {os.path.join(out, 'model.ckpt')}")
    return 0


def cmd_eval(args):
    names = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    for n in names:
        if n not in tr.METRIC_NAMES:
            raise C.ConfigError(f"unknown metric {n!r}; valid names: "
                                + ", ".join(tr.METRIC_NAMES))
    cfg = _load_cfg(args)
    model = load_checkpoint(args.checkpoint)
    if args.domain not in model.registry.names:
        raise C.ConfigError(
            f"domain {args.domain!r} not in checkpoint; it has: "
            + ", ".join(model.registry.names))
    _, roots = C.build_registry(cfg)
    dataset = _datasets_from(cfg, model.registry, roots,
                             names=[args.domain])[args.domain]
    result = tr.evaluate(model, dataset, names, seed=cfg["train.seed"],
                         target_fps=cfg["train.target_fps"])
    lines = [f"domain={args.domain} n={result['n_samples']} "
             f"seed={cfg['train.seed']}"]
    for name in names:
        lines.append(f"{name}={result['aggregate'][name]:.6f} "
                     f"failures={result['failures'][name]}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = _ensure_out(args.out)
        with open(os.path.join(out, "metrics.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(text)
    return 0


def _gather_frames(path):
    """A single image file, a directory of numbered PNGs, or a sample
    directory with a frames/ subfolder."""
    if os.path.isfile(path):
        return [path]
    if os.path.isdir(path):
        inner = os.path.join(path, "frames")
        folder = inner if os.path.isdir(inner) else path
        frames = sorted(
            os.path.join(folder, f) for f in os.listdir(folder)
            if f.lower().endswith(".png"))
        if frames:
            return frames
    raise C.ConfigError(f"no input frames at {path}")


def _check_resolution(frame, domain):
    want = domain.input_resolution
    got = frame.shape[1:]
    if got != tuple(want):
        raise C.ConfigError(
            f"input is {got[0]}x{got[1]} but domain {domain.name} "
            f"expects {want[0]}x{want[1]}")


def _write_maps(out, maps, names):
    scales = []
    for name, m in zip(names, maps):
        peak = D.write_map16(os.path.join(out, name), m)
        scales.append(f"{name} {format(peak, '.17g')}")
    with open(os.path.join(out, "scales.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(scales) + "\n")


def cmd_predict(args):
    model = load_checkpoint(args.checkpoint)
    if args.domain not in model.registry.names:
        raise C.ConfigError(
            f"domain {args.domain!r} not in checkpoint; it has: "
            + ", ".join(model.registry.names))
    domain = model.registry[args.domain]
    paths = _gather_frames(args.input)
    frames = [D.read_frame(p) for p in paths]
    for f in frames:
        _check_resolution(f, domain)
    out = _ensure_out(args.out)
    with no_grad():
        if domain.dynamic:
            preds = model.forward_clip(
                [Tensor(f[None]) for f in frames], domain)
            maps = [p.data[0, 0] for p in preds]
        else:
            maps = []
            for f in frames:
                p = model.forward_image(Tensor(f[None]), domain)
                maps.append(p.data[0, 0])
    names = [f"{i:05d}.png" for i in range(len(maps))]
    _write_maps(out, maps, names)
    print(f"wrote {len(maps)} heatmaps to {out}")
    return 0


def cmd_inspect_bias(args):
    model = load_checkpoint(args.checkpoint)
    wanted = ([args.domain] if args.domain
              else list(model.registry.names))
    for name in wanted:
        if name not in model.registry.names:
            raise C.ConfigError(
                f"domain {name!r} not in checkpoint; it has: "
                + ", ".join(model.registry.names))
    out = _ensure_out(args.out)
    maps, names = [], []
    for name in wanted:
        m = model.bias_map(model.registry[name])
        if not np.all(np.isfinite(m)):
            return _fail(f"bias map for {name} is not finite",
                         RUNTIME_ERROR)
        h, w = m.shape
        total = m.sum()
        rows = np.arange(h) + 0.5
        cols = np.arange(w) + 0.5
        com_r = float((m.sum(axis=1) * rows).sum() / total)
        com_c = float((m.sum(axis=0) * cols).sum() / total)
        print(f"domain={name} com_row={com_r:.4f} com_col={com_c:.4f} "
              f"center_row={h / 2:.1f} center_col={w / 2:.1f}")
        maps.append(m)
        names.append(f"bias_{name}.png")
    _write_maps(out, maps, names)
    return 0


def _flatten_private(model):
    """Copy every first-domain private parameter and statistic over the
    other domains' copies, in place."""
    groups = {}
    for path, tag, t in model.named_parameters():
        if tag != "shared":
            groups.setdefault(path, []).append((tag, t))
    for path, entries in groups.items():
        entries.sort(key=lambda e: e[0])
        first = entries[0][1]
        for _, t in entries[1:]:
            t.data = first.data.copy()
    stat_groups = {}
    for path, tag, arr in model.named_stats():
        if tag != "shared":
            stat_groups.setdefault(path, []).append((tag, arr))
    for path, entries in stat_groups.items():
        entries.sort(key=lambda e: e[0])
        first = entries[0][1]
        for _, arr in entries[1:]:
            arr[...] = first


def cmd_cross_domain(args):
    model = load_checkpoint(args.checkpoint)
    wanted = args.domain if args.domain else list(model.registry.names)
    for name in wanted:
        if name not in model.registry.names:
            raise C.ConfigError(
                f"domain {name!r} not in checkpoint; it has: "
                + ", ".join(model.registry.names))
    if args.force_shared:
        _flatten_private(model)
    frame = D.read_frame(_gather_frames(args.input)[0])
    out = _ensure_out(args.out)
    stem = os.path.splitext(os.path.basename(args.input.rstrip("/")))[0]
    maps, names = [], []
    with no_grad():
        for name in wanted:
            domain = model.registry[name]
            _check_resolution(frame, domain)
            if domain.dynamic:
                pred = model.forward_clip([Tensor(frame[None])], domain)[0]
            else:
                pred = model.forward_image(Tensor(frame[None]), domain)
            maps.append(pred.data[0, 0])
            names.append(f"{stem}_{name}.png")
    _write_maps(out, maps, names)
    print(f"wrote {len(maps)} heatmaps to {out}")
    return 0


def cmd_gen_data(args):
    try:
        h, w = (int(p) for p in args.resolution.split("x", 1))
    except ValueError:
        raise C.ConfigError(
            f"resolution {args.resolution!r} is not HxW")
    spec = D.SyntheticSpec(
        root=args.out, modality=args.modality, resolution=(h, w),
        n_samples=args.n, seed=args.seed or 0, fps=args.fps,
        n_frames=args.frames, center_bias=args.center_bias,
        blur_sigma=args.blur, warm_weight=args.warm, cool_weight=args.cool,
        n_objects=args.objects, n_fixations=args.fixations)
    D.generate_synthetic(spec)
    print(f"wrote {args.n} {args.modality} samples to {args.out}")
    return 0


def cmd_verify(args):
    results = V.run_suite(args.suite)
    failed = 0
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        detail = f" - {r.detail}" if r.detail else ""
        print(f"{status} {r.name}{detail}")
        failed += 0 if r.ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else RUNTIME_ERROR


def cmd_report(args):
    cfg = _load_cfg(args)
    model_cfg = C.build_model_config(cfg)
    if cfg["data.domains"].strip():
        reg, _ = C.build_registry(cfg)
    else:
        # a build report needs domains only for their count and
        # resolutions; default to one static domain at a size the
        # profile accepts
        from .domains import DomainRegistry
        reg = DomainRegistry()
        factor = 2 ** 5 if cfg["model.profile"] == "full" else 2 ** 3
        reg.register("default", "static", (9 * factor, 12 * factor))
    model = UnisalModel(model_cfg, reg, rng_seed=cfg["train.seed"])
    lines = list(model.build_report)
    counts = model.param_report()
    lines.append(f"parameters: shared {counts['shared']} + "
                 f"domain {counts['domain']} = {counts['total']}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = _ensure_out(args.out)
        with open(os.path.join(out, "build_report.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(text)
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser():
    ap = argparse.ArgumentParser(
        prog="unisal",
        description="Unified image and video saliency modeling.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p, config=True, seed=True, out=None):
        if config:
            p.add_argument("--config", help="key=value config file")
        if seed:
            p.add_argument("--seed", type=int, help="run seed override")
        if out is not None:
            p.add_argument("--out", required=out == "required",
                           default=None if out == "required" else "",
                           help="output directory")

    p = sub.add_parser("train", help="train a model from a config")
    add_common(p, out="required")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("checkpoint")
    add_common(p, out="optional")
    p.add_argument("--domain", required=True)
    p.add_argument("--metrics", default="kld,cc,nss,sim,auc_judd")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="write saliency heatmaps")
    p.add_argument("checkpoint")
    p.add_argument("input", help="image file or frames directory")
    add_common(p, config=False, seed=False, out="required")
    p.add_argument("--domain", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("inspect-bias",
                       help="render the learned spatial bias per domain")
    p.add_argument("checkpoint")
    add_common(p, config=False, seed=False, out="required")
    p.add_argument("--domain", help="one domain (default: all)")
    p.set_defaults(fn=cmd_inspect_bias)

    p = sub.add_parser("cross-domain",
                       help="predict one input under several domain settings")
    p.add_argument("checkpoint")
    p.add_argument("input")
    add_common(p, config=False, seed=False, out="required")
    p.add_argument("--domain", action="append", default=None,
                   help="repeatable; default: all checkpoint domains")
    p.add_argument("--force-shared", action="store_true",
                   help="debug: overwrite private sets with domain 0's")
    p.set_defaults(fn=cmd_cross_domain)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    add_common(p, config=False, out="required")
    p.add_argument("--modality", choices=("static", "dynamic"),
                   required=True)
    p.add_argument("--resolution", default="24x32")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--fps", type=int, default=0)
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--center-bias", type=float, default=0.5)
    p.add_argument("--blur", type=float, default=1.0)
    p.add_argument("--warm", type=float, default=1.0)
    p.add_argument("--cool", type=float, default=1.0)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--fixations", type=int, default=20)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("verify", help="run self-check suites")
    p.add_argument("--suite", default="all",
                   choices=V.SUITES + ("all",))
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("report", help="print the architecture build report")
    add_common(p, out="optional")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except C.ConfigError as e:
        return _fail(str(e), USAGE_ERROR)
    except (tr.TrainingDiverged, ValueError, OSError) as e:
        return _fail(str(e), RUNTIME_ERROR)


if __name__ == "__main__":
    sys.exit(main())
