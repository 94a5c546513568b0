"""``splatcodec`` command line: train, encode, decode, stats, ablate, render, check.

Exit codes: 0 ok, 2 bad configuration or arguments, 3 training diverged,
4 corrupt or unreadable stream/checkpoint, 5 failed internal invariant.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import SPEC_VERSION, __version__
from .checkpoint import CheckpointError, load_model, save_model
from .diffmath import ContractError
from .model import VARIANTS, SceneModel

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CORRUPT, EXIT_INVARIANT = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _banner(args, seed=None) -> str:
    seed = getattr(args, "seed", None) if seed is None else seed
    return f"# splatcodec {__version__} format {SPEC_VERSION} seed {seed if seed is not None else '-'}"


def _emit(args, rows: list[list], header: list[str]):
    """Print a small table as aligned text or csv."""
    if args.format == "csv":
        print(",".join(header))
        for r in rows:
            print(",".join(str(v) for v in r))
        return
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) for i, h in enumerate(header)]
    print("  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))


def load_scene(source: str):
    """``synth:<key=value,...>`` or ``ply:<path>`` (a bare path is read as PLY)."""
    from .scene import PlyError, SynthSpec, load_targets, synth_targets
    if source.startswith("synth:") or source == "synth":
        try:
            return synth_targets(SynthSpec.parse(source[6:]))
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"--scene: {exc}") from None
    path = source[4:] if source.startswith("ply:") else source
    try:
        return load_targets(path)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"--scene: no such file {path}") from None
    except PlyError as exc:
        raise CliError(EXIT_CORRUPT, f"--scene: {exc}") from None


def _config(args):
    from .trainer import TrainConfig
    text = ""
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise CliError(EXIT_CONFIG, f"--config: {exc}") from None
    flags = {"lambda_e": "--lambda-e", "iters": "--iters", "seed": "--seed", "variant": "--variant",
             "lr": "--lr", "lambda_m": "--lambda-m"}
    overrides = {k: getattr(args, k, None) for k in flags}
    for key, flag in flags.items():
        v = overrides[key]
        if v is None:
            continue
        bad = (key in ("lambda_e", "lambda_m") and not (v >= 0 and np.isfinite(v))) \
            or (key == "iters" and v < 0) or (key == "lr" and not v > 0)
        if bad:
            raise CliError(EXIT_CONFIG, f"{flag}: invalid value {v}")
    try:
        return TrainConfig.from_text(text, **overrides)
    except ContractError as exc:
        raise CliError(EXIT_CONFIG, f"config: {exc}") from None


def _load_model(path) -> SceneModel:
    try:
        return load_model(path)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"no such file {path}") from None
    except CheckpointError as exc:
        raise CliError(EXIT_CORRUPT, str(exc)) from None


def _read_stream(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _decode(data: bytes) -> SceneModel:
    from .codec import StreamError, decode_scene
    try:
        return decode_scene(data)
    except StreamError as exc:
        raise CliError(EXIT_CORRUPT, f"stream: {exc}") from None


def _model_from(path) -> SceneModel:
    """Checkpoint or bitstream, told apart by the magic."""
    from .codec import MAGIC
    data = _read_stream(path)
    return _decode(data) if data[:4] == MAGIC else _load_model(path)


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    from .trainer import train
    cfg = _config(args)
    targets = load_scene(args.scene)
    model = SceneModel.from_targets(targets, cfg.variant, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    print(_banner(args, cfg.seed))
    log = None if args.quiet else print
    result = train(model, targets, cfg, log=log)
    save_model(model, args.output)
    curve = args.curve or str(args.output) + ".curve.csv"
    with open(curve, "w") as fh:
        fh.write("iteration,distortion,rate_bits,loss\n")
        for it, d, r, tot in result.curve:
            fh.write(f"{it},{d:.9g},{r:.9g},{tot:.9g}\n")
    print(f"wrote {args.output} and {curve}")
    return EXIT_OK


def cmd_encode(args) -> int:
    from .codec import EncodeError, encode_scene_full
    model = _load_model(args.input)
    try:
        enc = encode_scene_full(model)
    except EncodeError as exc:
        raise CliError(EXIT_INVARIANT, str(exc)) from None
    Path(args.output).write_bytes(enc.stream)
    print(_banner(args, model.seed))
    print(f"wrote {len(enc.stream)} bytes to {args.output}; clamped symbols "
          + ", ".join(f"{k}={v}" for k, v in enc.clamped.items()))
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _decode(_read_stream(args.input))
    save_model(model, args.output)
    print(_banner(args, model.seed))
    print(f"decoded {model.num_anchors} anchors ({model.variant}) to {args.output}")
    return EXIT_OK


def cmd_stats(args) -> int:
    from .codec import SECTIONS, StreamError, stream_stats
    from .model import forward
    data = _read_stream(args.input)
    try:
        st = stream_stats(data)
    except StreamError as exc:
        raise CliError(EXIT_CORRUPT, f"stream: {exc}") from None
    model = _decode(data)
    est = {k: float(v.sum()) / 8.0 for k, v in forward(model, "infer").bits.items()}
    clamped = {}
    if args.model:
        from .codec import encode_scene_full
        clamped = encode_scene_full(_load_model(args.model)).clamped
    if args.format != "csv":
        print(_banner(args, model.seed))
    rows = [["header", st.header_bytes, f"{100 * st.header_bytes / st.total_bytes:.2f}", "", ""]]
    for name in SECTIONS:
        rows.append([name, st.sections[name], f"{100 * st.sections[name] / st.total_bytes:.2f}", "", ""])
    pay = st.payload_bytes
    for attr, sec in (("z", "zpayload"), ("feature", "features"), ("scale", "scales"), ("offset", "offsets")):
        if attr in est:
            row = next(r for r in rows if r[0] == sec)
            row[3] = f"{est[attr]:.1f}"
            row[4] = f"{pay[sec] - est[attr]:+.1f}"
    rows.append(["total", st.total_bytes, "100.00", f"{sum(est.values()):.1f}",
                 f"{sum(pay.values()) - sum(est.values()):+.1f}"])
    _emit(args, rows, ["section", "bytes", "ratio_pct", "estimated_bytes", "gap_bytes"])
    if clamped:
        print("clamped symbols: " + ", ".join(f"{k}={v}" for k, v in clamped.items()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import ablate, format_rows
    cfg = _config(args)
    targets = load_scene(args.scene)
    if args.format != "csv":
        print(_banner(args, cfg.seed))
    log = None if args.quiet else (lambda s: print(s, file=sys.stderr))
    rows = ablate(targets, cfg, match_distortion=not args.no_match, render=not args.no_render, log=log)
    print(format_rows(rows, args.format))
    return EXIT_OK


def cmd_render(args) -> int:
    from .model import forward
    from .scene import psnr, write_ppm
    from .trainer import render_pair
    model = _model_from(args.input)
    targets = load_scene(args.scene)
    if targets.n != model.num_anchors or targets.k != model.k:
        raise CliError(EXIT_CONFIG, "--scene does not match the model's anchors")
    ref, dec = render_pair(model, targets, forward(model, "infer"), args.size, args.size)
    prefix = Path(args.output)
    write_ppm(prefix.with_name(prefix.name + "_original.ppm"), ref)
    write_ppm(prefix.with_name(prefix.name + "_decoded.ppm"), dec)
    write_ppm(prefix.with_name(prefix.name + "_pair.ppm"), np.concatenate([ref, dec], axis=1))
    score = psnr(ref, dec)
    if args.format == "csv":
        print("psnr_db\n" + f"{score:.4f}")
    else:
        print(_banner(args, model.seed))
        print(f"psnr {score:.4f} dB; wrote {prefix}_original.ppm, {prefix}_decoded.ppm, {prefix}_pair.ppm")
    return EXIT_OK


def cmd_check(args) -> int:
    from .selfcheck import run_checks
    if args.format != "csv":
        print(_banner(args, 0))
    rows = []
    for name, ok, detail, secs in run_checks():
        rows.append([name, "pass" if ok else "FAIL", f"{secs:.2f}", detail])
    _emit(args, rows, ["check", "result", "seconds", "detail"])
    return EXIT_OK if all(r[1] == "pass" for r in rows) else EXIT_INVARIANT


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("text", "csv"), default="text", help="report format")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads; output is identical for every value")

    def training(p, output=False):
        p.add_argument("--scene", required=True, help="synth:<key=value,...> or ply:<path>")
        p.add_argument("--config", help="flat key = value training config")
        p.add_argument("--lambda-e", dest="lambda_e", type=float)
        p.add_argument("--lambda-m", dest="lambda_m", type=float)
        p.add_argument("--iters", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="splatcodec",
                                     description="Gaussian-splatting anchor codec")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", parents=[common], help="train a model on a scene")
    training(p)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("-o", "--output", required=True, help="checkpoint path")
    p.add_argument("--curve", help="training curve csv (default: <output>.curve.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", parents=[common], help="checkpoint -> bitstream")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", parents=[common], help="bitstream -> checkpoint")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("stats", parents=[common], help="section sizes and rate estimates of a bitstream")
    p.add_argument("input")
    p.add_argument("--model", help="source checkpoint, to report clamped symbols")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("ablate", parents=[common], help="baseline / predict / predict_hyper comparison")
    training(p)
    p.add_argument("--no-match", action="store_true", help="train every variant at the same lambda_e")
    p.add_argument("--no-render", action="store_true", help="skip render-space PSNR")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", parents=[common], help="render original vs decoded features")
    p.add_argument("input", help="checkpoint or bitstream")
    p.add_argument("--scene", required=True, help="the scene the model was trained on")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("-o", "--output", required=True, help="output prefix for the PPM files")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("check", parents=[common], help="run the invariant suite")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)      # argparse exits with 2 on unknown flags
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    from .trainer import DivergenceError, tune_allocator
    if args.command in ("train", "ablate"):
        tune_allocator()
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
