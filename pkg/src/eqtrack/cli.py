"""Command-line entry point: gen-data | train | track | eval | check-equivariance.

Exit codes: 0 success, 1 validation failure (bad input or failed check),
2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import data, dataset, equivariance, evaluation, geometry, training
from .registration import DegenerateConfiguration, track
from .steerable import CheckpointError, ModelConfig, SteerableNet, load_checkpoint, save_checkpoint

log = logging.getLogger("eqtrack")

MODEL_PRESETS = {
    "default": {"hidden": {"0": 16, "1": 16, "2": 4}, "layers": 5, "channels": 64, "kernel": 5},
    "desk": {"hidden": {"0": 4, "1": 4, "2": 2}, "layers": 5, "channels": 16, "kernel": 5},
    "tiny": {"hidden": {"0": 2, "1": 2, "2": 1}, "layers": 3, "channels": 8, "kernel": 3},
}

TRAIN_DEFAULTS = {"model": "default", "loss": "geo", "epochs": 300, "lr": 1e-3, "seed": 0,
                  "manifest": None, "val_manifest": None}


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def model_config(spec, seed=0):
    if isinstance(spec, str):
        if spec not in MODEL_PRESETS:
            raise ValidationError(f"unknown model preset {spec!r}; choose from {sorted(MODEL_PRESETS)}")
        spec = MODEL_PRESETS[spec]
    try:
        hidden = {int(k): int(v) for k, v in spec["hidden"].items()}
        return ModelConfig.build(hidden, int(spec.get("layers", 5)), int(spec.get("channels", 64)),
                                 int(spec.get("kernel", 5)), seed)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"invalid model config: {exc}") from None


def _write_json(path, doc):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# -- commands ------------------------------------------------------------------

def _check_size(size):
    if size < 16:
        raise ValidationError(f"--size must be >= 16, got {size}")


def cmd_gen_data(args):
    _check_size(args.size)
    if args.count < 1 or args.subjects < 1:
        raise ValidationError("--count and --subjects must be >= 1")
    if args.max_angle < 0 or args.max_shift < 0 or args.voxel_size <= 0:
        raise ValidationError("pose bounds must be >= 0 and the voxel size positive")
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create {args.out}: {exc}") from None
    if not os.access(args.out, os.W_OK):
        raise ValidationError(f"{args.out} is not writable")
    path = dataset.generate(args.out, seed=args.seed, count=args.count, size=args.size, kind=args.kind,
                            subjects=args.subjects, phantom_seed=args.phantom_seed,
                            max_angle_deg=args.max_angle, max_shift_mm=args.max_shift,
                            voxel_size=args.voxel_size)
    print(path)
    return 0


def train_config(args):
    cfg = dict(TRAIN_DEFAULTS)
    if args.config:
        with open(args.config) as fh:
            user = json.load(fh)
        unknown = set(user) - set(cfg)
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        cfg.update(user)
    for key in ("model", "loss", "epochs", "lr", "seed", "manifest", "val_manifest"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    if cfg["loss"] not in training.LOSSES:
        raise ValidationError(f"loss must be one of {training.LOSSES}")
    if int(cfg["epochs"]) < 0 or (int(cfg["epochs"]) < 1 and not args.resume):
        raise ValidationError("epochs must be >= 1 (0 is allowed only with --resume)")
    if float(cfg["lr"]) <= 0:
        raise ValidationError("learning rate must be positive")
    if not cfg["manifest"]:
        raise ValidationError("a training manifest is required")
    return cfg


def cmd_train(args):
    cfg = train_config(args)
    try:
        pairs = dataset.load_pairs(cfg["manifest"])
        val = dataset.load_pairs(cfg["val_manifest"]) if cfg["val_manifest"] else None
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationError(f"cannot read manifest: {exc}") from None
    if not pairs:
        raise ValidationError("training manifest has no pairs")
    if cfg["loss"] != "image" and any(p.transform is None for p in pairs):
        raise ValidationError(f"loss {cfg['loss']!r} needs true transforms for every pair")
    if args.resume:
        net, params, _ = load_checkpoint(args.resume)
    else:
        net = SteerableNet(model_config(cfg["model"], int(cfg["seed"])))
        params = net.init_params()
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.json")
    log.info("training %d parameters on %d pairs", net.n_params(), len(pairs))
    _write_json(os.path.join(args.out, "train_config.json"), cfg)
    training.train(net, params, pairs, kind=cfg["loss"], epochs=int(cfg["epochs"]), lr=float(cfg["lr"]),
                   val_pairs=val, log_path=os.path.join(args.out, "metrics.jsonl"), checkpoint_path=ckpt,
                   dump_path=os.path.join(args.out, "divergence.json"),
                   log=lambda rec: log.info("epoch %(epoch)d train %(train_loss).6g", rec))
    print(ckpt)
    return 0


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError, KeyError, ValueError) as exc:
        raise ValidationError(f"cannot load checkpoint: {exc}") from None


def cmd_track(args):
    net, params, _ = _load_model(args.checkpoint)
    try:
        ref = data.load_volume(args.reference)
        mov = data.load_volume(args.moving)
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationError(f"cannot read volume: {exc}") from None
    if not ref.same_grid(mov):
        raise ValidationError(f"grid mismatch: {ref.shape} vs {mov.shape}")
    t0 = time.perf_counter()
    est, diag = track(ref, mov, net, params)
    diag["seconds"] = time.perf_counter() - t0
    est.save(args.out)
    if args.truth:
        truth = geometry.RigidTransform.load(args.truth)
        diag["errors"] = evaluation.pair_metrics(est, training.Pair(ref, mov, truth))
    diag_path = args.diagnostics or os.path.splitext(args.out)[0] + ".diagnostics.json"
    _write_json(diag_path, diag)
    print(json.dumps({"transform": args.out, "diagnostics": diag_path, "seconds": diag["seconds"]}))
    return 0


def cmd_eval(args):
    net, params, _ = _load_model(args.checkpoint)
    try:
        pairs = dataset.load_pairs(args.manifest)
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationError(f"cannot read manifest: {exc}") from None
    report = evaluation.evaluate(net, params, pairs)
    _write_json(args.out, report)
    print(evaluation.format_table(report))
    return 0


def cmd_check_equivariance(args):
    _check_size(args.size)
    if args.checkpoint:
        net, params, _ = _load_model(args.checkpoint)
    else:
        net = SteerableNet(model_config(args.model, args.seed))
        params = net.init_params()
    if args.zero_weights:
        params = {k: np.zeros_like(v) for k, v in params.items()}
    if args.corrupt_basis:
        spec = net.config.layers[0]
        net.bank.perturb(1 if spec.out_type.count(1) else 0, 0, spec.kernel, index=0, rel=0.1)
    subj = data.make_subject(args.seed, args.size)
    rots = geometry.octahedral_rotations()[1:]
    if args.rotations is not None:
        rots = rots[:args.rotations]
    reach = sum(spec.kernel // 2 for spec in net.config.layers)
    shifts = ((1, -2, 1),) if 2 * (reach + 2) < args.size else ()
    if not shifts:
        log.warning("grid %d too small for the shift check with receptive reach %d", args.size, reach)
    suites = [equivariance.octahedral_suite(net, params, subj.volume.data, rotations=rots, shifts=shifts)]
    if args.continuous > 0:
        suites.append(equivariance.continuous_suite(net, params, subj.volume, n_rotations=args.continuous,
                                                    seed=args.seed))
    report = {s["suite"]: s for s in suites}
    report["passed"] = all(s["passed"] for s in suites)
    if args.out:
        _write_json(args.out, report)
    for suite in suites:
        status = "PASS" if suite["passed"] else "FAIL"
        print(f"{suite['suite']:<12} max error {suite['max_error']:.3e} (tol {suite['tolerance']:g}) {status}")
    return 0 if report["passed"] else 1


# -- parser --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="eqtrack", description="Rigid 3D tracking with equivariant filter banks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic phantoms, masks, poses, and a manifest")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1, help="volumes per subject; the first is the reference")
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--out", required=True)
    g.add_argument("--kind", choices=("blobs", "ellipsoids"), default="blobs")
    g.add_argument("--subjects", type=int, default=1)
    g.add_argument("--phantom-seed", type=int, default=None, help="phantom seed if different from --seed")
    g.add_argument("--max-angle", type=float, default=30.0, help="degrees")
    g.add_argument("--max-shift", type=float, default=6.0, help="mm per axis")
    g.add_argument("--voxel-size", type=float, default=data.DEFAULT_VOXEL_MM)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit filter weights with Adam")
    t.add_argument("--config", help="JSON file with train settings; flags override it")
    t.add_argument("--manifest")
    t.add_argument("--val-manifest")
    t.add_argument("--model", help=f"preset ({', '.join(MODEL_PRESETS)})")
    t.add_argument("--loss", choices=training.LOSSES)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="start from this checkpoint")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", help="estimate the transform between two volumes")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--moving", required=True)
    k.add_argument("--reference", required=True)
    k.add_argument("--out", required=True, help="transform JSON to write")
    k.add_argument("--truth", help="true transform JSON, to report errors")
    k.add_argument("--diagnostics", help="diagnostics JSON (default: next to --out)")
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="tracking metrics over a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check-equivariance", help="run octahedral and random-rotation suites")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--random-weights", action="store_true")
    c.add_argument("--model", default="default", help="preset for --random-weights")
    c.add_argument("--size", type=int, default=32)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--rotations", type=int, default=None, help="limit the number of grid rotations")
    c.add_argument("--continuous", type=int, default=3, help="number of random rotations (0 skips the suite)")
    c.add_argument("--zero-weights", action="store_true")
    c.add_argument("--corrupt-basis", action="store_true", help="fault injection: perturb one basis coefficient by 10%%")
    c.add_argument("--out")
    c.set_defaults(func=cmd_check_equivariance)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"eqtrack: {exc}", file=sys.stderr)
        return 1
    except (DegenerateConfiguration, training.TrainingDiverged) as exc:
        print(f"eqtrack: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.debug("unhandled error", exc_info=True)
        print(f"eqtrack: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
