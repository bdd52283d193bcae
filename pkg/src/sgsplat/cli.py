"""``sgsplat`` command line: fit, encode, decode, sweep, evaluate.

Exit codes: 0 success, 2 usage, 3 format or corruption, 4 numeric failure.
Every command writes a JSON manifest next to its main output.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, codec
from .exceptions import ContractViolation, ImageFormatError, NumericFailure, OverlapError
from .imagery import as_image, load_image, save_image, to_uint8, write_csv
from .metrics import bd_psnr, bd_rate, ms_ssim, psnr
from .quantization import QuantConfig
from .splat import render
from .training import FitConfig, finetune, fit, write_history
from .validation import check_count, check_nonnegative, parse_bit_range, parse_list

log = logging.getLogger("sgsplat")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4

RD_COLUMNS = ("image", "width", "height", "n_gaussians", "lambda_b", "pos_bits",
              "bytes", "bpp", "psnr", "ms_ssim", "mean_bits")
AGGREGATE = "__aggregate__"


class UsageError(Exception):
    pass


class RunManifest:
    """Configuration, input hashes, timings and results of one command."""

    def __init__(self, command, args):
        self.data = {
            "command": command,
            "tool_version": __version__,
            "config": {k: v for k, v in vars(args).items() if k != "func"},
            "seed": getattr(args, "seed", None),
            "inputs": {},
            "timings_s": {},
            "results": {},
            "environment": {"python": platform.python_version(), "platform": platform.platform(),
                            "threads": _threads()},
        }

    def add_input(self, path):
        h = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        self.data["inputs"][str(path)] = h

    def timed(self, phase):
        manifest = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                manifest.data["timings_s"][phase] = round(time.perf_counter() - self.t0, 6)

        return _Timer()

    def result(self, **kw):
        self.data["results"].update(kw)

    def write(self, output):
        path = Path(str(output) + ".manifest.json")
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    return str(x)


def _threads():
    import numba
    return numba.get_num_threads()


def _set_threads(requested):
    import numba
    n = requested if requested is not None else os.environ.get("GS2D_THREADS")
    if n is None:
        return
    try:
        n = int(n)
    except ValueError:
        raise UsageError(f"thread count must be an integer, got {n!r}") from None
    if not 1 <= n <= numba.config.NUMBA_NUM_THREADS:
        raise UsageError(f"thread count must lie in [1, {numba.config.NUMBA_NUM_THREADS}]")
    numba.set_num_threads(n)


def _fit_config(args) -> FitConfig:
    quant = QuantConfig(bit_range=parse_bit_range(args.bit_range),
                        pos_bits=check_count(args.pos_bits, "--pos-bits", 1),
                        rvq_stages=check_count(args.rvq_stages, "--rvq-stages", 1),
                        rvq_k=check_count(args.rvq_k, "--rvq-k", 1), seed=args.seed)
    return FitConfig(n_gaussians=check_count(args.gaussians, "--gaussians", 1),
                     iterations=check_count(args.iters, "--iters"),
                     lambda_g=check_nonnegative(args.lambda_g, "--lambda-g"),
                     seed=check_count(args.seed, "--seed"), init=args.init,
                     lr_position=args.lr_position, lr_color=args.lr_color, lr_chol=args.lr_chol,
                     log_every=check_count(args.log_every, "--log-every"),
                     tune_iterations=check_count(args.tune_iters, "--tune-iters"),
                     lambda_b=check_nonnegative(args.lambda_b, "--lambda-b"),
                     lambda_r=check_nonnegative(args.lambda_r, "--lambda-r"), quant=quant)


def _write_quality(man, recon, image):
    man.result(psnr=psnr(recon, image), ms_ssim=_ms_ssim_or_none(recon, image))


def _ms_ssim_or_none(a, b):
    try:
        return ms_ssim(a, b)
    except ContractViolation:
        return None


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args):
    cfg = _fit_config(args)
    out = Path(args.out or Path(args.input).with_suffix(".scene"))
    man = RunManifest("fit", args)
    man.data["resolved"] = dataclasses.asdict(cfg)
    man.add_input(args.input)
    image = load_image(args.input)
    with man.timed("fit"):
        scene, history = fit(image, cfg)
    codec.save_scene(out, scene)
    history_path = Path(args.history or str(out) + ".history.csv")
    write_history(history_path, history)
    recon = render(scene, clamp=True)
    if args.render:
        save_image(args.render, recon)
    _write_quality(man, recon, image)
    man.result(scene=str(out), history=str(history_path), n_gaussians=len(scene))
    man.write(out)
    print(f"fit: {len(scene)} gaussians, psnr {man.data['results']['psnr']:.3f} dB -> {out}")
    return EXIT_OK


def _scene_and_image(args, cfg, man):
    """Scene plus target image for encode: fit from a PNG, or load a scene file."""
    src = Path(args.input)
    man.add_input(src)
    head = src.read_bytes()[:4]
    if head == codec.MAGIC:
        if not args.image:
            raise UsageError("encoding a scene file needs --image with the target PNG")
        man.add_input(args.image)
        scene = codec.load_scene(src)
        image = load_image(args.image)
        if image.shape != (scene.height, scene.width, scene.channels):
            raise UsageError("target image shape does not match the scene")
        return scene, image
    image = load_image(src)
    with man.timed("fit"):
        scene, _ = fit(image, cfg)
    return scene, image


def _encode_one(scene, image, cfg, man):
    with man.timed("finetune"):
        q, history = finetune(scene, image, cfg)
    with man.timed("encode"):
        bs = codec.encode(q)
    _, deq = codec.decode(bs)
    recon = render(deq, clamp=True)
    h, w = image.shape[:2]
    return q, bs, history, recon, codec.bpp(bs, w, h)


def cmd_encode(args):
    cfg = _fit_config(args)
    out = Path(args.out or Path(args.input).with_suffix(".gs2c"))
    man = RunManifest("encode", args)
    man.data["resolved"] = dataclasses.asdict(cfg)
    scene, image = _scene_and_image(args, cfg, man)
    q, bs, history, recon, rate = _encode_one(scene, image, cfg, man)
    codec.write_stream(out, bs)
    if args.history:
        write_history(args.history, history)
    _write_quality(man, recon, image)
    man.result(stream=str(out), bytes=len(bs), bpp=rate, mean_bits=q.mean_bits(),
               sections={k: v[1] for k, v in bs.sections.items()})
    man.write(out)
    print(f"encode: {len(bs)} bytes, {rate:.4f} bpp, psnr {man.data['results']['psnr']:.3f} dB, "
          f"mean bitwidth {q.mean_bits():.2f} -> {out}")
    return EXIT_OK


def decode_timing(data: bytes, repeats: int = 100) -> dict:
    """Decode-to-framebuffer wall time over ``repeats`` runs, excluding disk I/O."""
    _, scene = codec.decode(data)
    render(scene)  # warm the kernels
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        _, scene = codec.decode(data)
        to_uint8(render(scene, clamp=True))
        times.append(time.perf_counter() - t0)
    t = np.asarray(times)
    return {"repeats": repeats, "mean_ms": 1e3 * float(t.mean()),
            "p95_ms": 1e3 * float(np.percentile(t, 95)), "fps": float(1.0 / t.mean()),
            "width": scene.width, "height": scene.height, "n_gaussians": len(scene)}


def cmd_decode(args):
    src = Path(args.input)
    out = Path(args.out or src.with_suffix(".png"))
    man = RunManifest("decode", args)
    man.add_input(src)
    data = src.read_bytes()
    with man.timed("decode_render"):
        _, scene = codec.decode(data)
        recon = render(scene, clamp=True)
    save_image(out, recon)
    man.result(image=str(out), n_gaussians=len(scene), bpp=codec.bpp(data, scene.width, scene.height))
    if args.time:
        if args.repeats < 100:
            raise UsageError("--repeats must be >= 100")
        rep = decode_timing(data, args.repeats)
        man.result(timing=rep)
        print(f"decode: mean {rep['mean_ms']:.3f} ms, p95 {rep['p95_ms']:.3f} ms, "
              f"{rep['fps']:.1f} fps over {rep['repeats']} runs")
    man.write(out)
    print(f"decode: {len(scene)} gaussians -> {out}")
    return EXIT_OK


def read_rd_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "bpp" not in rows[0] or "psnr" not in rows[0]:
        raise ImageFormatError(f"{path} is not an RD points CSV")
    return rows


def rd_curve(rows):
    """Points of the aggregate rows if present, else of the first image."""
    agg = [r for r in rows if r["image"] == AGGREGATE]
    use = agg or [r for r in rows if r["image"] == rows[0]["image"]]
    return [(float(r["bpp"]), float(r["psnr"])) for r in use]


def aggregate_rows(rows):
    """Mean PSNR of every image, interpolated at the mean rate of each operating point."""
    by_image = {}
    for r in rows:
        by_image.setdefault(r[0], []).append(r)
    curves = list(by_image.values())
    k = min(len(c) for c in curves)
    out = []
    for j in range(k):
        rate = float(np.exp(np.mean([math.log(c[j][7]) for c in curves])))
        qs = []
        for c in curves:
            xs = np.log([p[7] for p in c])
            ys = np.array([p[8] for p in c])
            order = np.argsort(xs)
            qs.append(float(np.interp(math.log(rate), xs[order], ys[order])))
        first = curves[0][j]
        out.append((AGGREGATE, 0, 0, first[3], first[4], first[5], 0, rate, float(np.mean(qs)),
                    float("nan"), float(np.mean([c[j][10] for c in curves]))))
    return out


def cmd_sweep(args):
    if bool(args.budgets) == bool(args.lambda_b_list):
        raise UsageError("give exactly one of --budgets or --lambda-b-list")
    out = Path(args.out)
    man = RunManifest("sweep", args)
    rows = []
    budgets = parse_list(args.budgets, int) if args.budgets else None
    lambdas = parse_list(args.lambda_b_list, float) if args.lambda_b_list else None
    for path in args.inputs:
        man.add_input(path)
        image = load_image(path)
        h, w = image.shape[:2]
        points = [(b, args.lambda_b) for b in budgets] if budgets else [(args.gaussians, lb) for lb in lambdas]
        for n, lb in points:
            args_n = argparse.Namespace(**{**vars(args), "gaussians": n, "lambda_b": lb})
            cfg = _fit_config(args_n)
            with man.timed(f"{Path(path).name}:{n}:{lb}"):
                scene, _ = fit(image, cfg)
                q, bs, _, recon, rate = _encode_one(scene, image, cfg, man)
            rows.append((Path(path).name, w, h, n, lb, cfg.quant.pos_bits, len(bs), rate,
                         psnr(recon, image), _ms_ssim_or_none(recon, image), q.mean_bits()))
            log.info("sweep %s n=%d lambda_b=%g: %.4f bpp %.3f dB", path, n, lb, rate, rows[-1][8])
    if len({(r[1], r[2]) for r in rows}) > 1 or len(args.inputs) > 1:
        rows += aggregate_rows(rows)
    write_csv(out, RD_COLUMNS, [tuple("" if v is None else v for v in r) for r in rows])
    man.result(rd_points=str(out), points=len(rows))
    if args.bd:
        ref = rd_curve(read_rd_csv(args.bd))
        test = rd_curve(read_rd_csv(out))
        if len(ref) < 4 or len(test) < 4:
            log.warning("BD metrics need at least 4 points per curve; skipped")
            print("sweep: BD skipped (fewer than 4 points)", file=sys.stderr)
        else:
            try:
                summary = {"reference": str(args.bd), "bd_rate_percent": bd_rate(ref, test),
                           "bd_psnr_db": bd_psnr(ref, test), "method": "classic cubic Bjontegaard"}
            except (OverlapError, ContractViolation) as exc:
                log.warning("BD metrics skipped: %s", exc)
                summary = {"reference": str(args.bd), "skipped": str(exc)}
            man.result(bd=summary)
            if "bd_rate_percent" in summary:
                print(f"sweep: BD-rate {summary['bd_rate_percent']:+.3f} %, "
                      f"BD-PSNR {summary['bd_psnr_db']:+.4f} dB vs {args.bd}")
    man.write(out)
    print(f"sweep: {len(rows)} rows -> {out}")
    return EXIT_OK


def _load_any(path):
    """A PNG as an image, or a ``.gs2c`` stream / scene file rendered to one."""
    data = Path(path).read_bytes()
    if data[:4] == codec.MAGIC:
        if len(data) > 4 and data[4] == codec.VERSION_SCENE:
            scene = codec.scene_from_bytes(data)
            return render(scene, clamp=True), None
        _, scene = codec.decode(data)
        return render(scene, clamp=True), codec.bpp(data, scene.width, scene.height)
    return as_image(load_image(path)), None


def cmd_evaluate(args):
    ref = load_image(args.reference)
    test, rate = _load_any(args.test)
    if test.shape != ref.shape:
        raise UsageError(f"shape mismatch: {ref.shape} vs {test.shape}")
    man = RunManifest("evaluate", args)
    man.add_input(args.reference)
    man.add_input(args.test)
    res = {"psnr": psnr(test, ref), "ms_ssim": _ms_ssim_or_none(test, ref)}
    if rate is not None:
        res["bpp"] = rate
    man.result(**res)
    out = Path(args.out) if args.out else Path(str(args.test) + ".evaluate")
    if args.out:
        write_csv(out, ("reference", "test", "psnr", "ms_ssim", "bpp"),
                  [(Path(args.reference).name, Path(args.test).name, res["psnr"],
                    "" if res["ms_ssim"] is None else res["ms_ssim"], res.get("bpp", ""))])
    man.write(out)
    print(json.dumps(res, default=_jsonable))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_fit_flags(p):
    p.add_argument("--gaussians", type=int, default=3000, help="Gaussian budget N")
    p.add_argument("--iters", type=int, default=20_000, help="fitting iterations")
    p.add_argument("--lambda-g", type=float, default=0.06, help="geometry loss weight")
    p.add_argument("--init", choices=("sgi", "random"), default="sgi")
    p.add_argument("--lr-position", type=float, default=1e-3)
    p.add_argument("--lr-color", type=float, default=1e-2)
    p.add_argument("--lr-chol", type=float, default=5e-2)
    p.add_argument("--log-every", type=int, default=100)


def _add_tune_flags(p):
    p.add_argument("--lambda-b", type=float, default=0.0012, help="bitwidth loss weight")
    p.add_argument("--lambda-r", type=float, default=1.0, help="residual compensation weight")
    p.add_argument("--bit-range", default="6..16", help="covariance bitwidth range LO..HI")
    p.add_argument("--pos-bits", type=int, default=12)
    p.add_argument("--rvq-stages", type=int, default=2)
    p.add_argument("--rvq-k", type=int, default=256)
    p.add_argument("--tune-iters", type=int, default=10_000)


def build_parser():
    parser = argparse.ArgumentParser(prog="sgsplat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="numba thread count (falls back to GS2D_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit Gaussians to an image")
    p.add_argument("input")
    p.add_argument("--out", help="scene file (default: INPUT.scene)")
    p.add_argument("--history", help="history CSV (default: OUT.history.csv)")
    p.add_argument("--render", help="also export the fitted render as PNG")
    _add_fit_flags(p)
    _add_tune_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("encode", parents=[common], help="fine-tune and write a .gs2c stream")
    p.add_argument("input", help="scene file from `fit`, or a PNG to fit first")
    p.add_argument("--image", help="target PNG when INPUT is a scene file")
    p.add_argument("--out", help="stream path (default: INPUT.gs2c)")
    p.add_argument("--history", help="fine-tuning history CSV")
    _add_fit_flags(p)
    _add_tune_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", parents=[common], help="decode a stream to PNG")
    p.add_argument("input")
    p.add_argument("--out", help="PNG path (default: INPUT.png)")
    p.add_argument("--time", action="store_true", help="report decode+render timing")
    p.add_argument("--repeats", type=int, default=100)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("sweep", parents=[common], help="rate-distortion sweep")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--budgets", help="comma-separated Gaussian budgets")
    p.add_argument("--lambda-b-list", help="comma-separated bitwidth loss weights")
    p.add_argument("--out", default="rd_points.csv")
    p.add_argument("--bd", help="reference RD CSV for BD-rate / BD-PSNR")
    _add_fit_flags(p)
    _add_tune_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", parents=[common], help="PSNR / MS-SSIM / bpp of a result")
    p.add_argument("reference", help="original PNG")
    p.add_argument("test", help="PNG, .gs2c stream or scene file")
    p.add_argument("--out", help="optional CSV row output")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        return args.func(args)
    except (UsageError, ContractViolation, FileNotFoundError, IsADirectoryError) as exc:
        print(f"sgsplat {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ImageFormatError as exc:
        where = ""
        if getattr(exc, "section", None) is not None:
            where = f" [section {exc.section}, byte {exc.offset}]"
        print(f"sgsplat {args.command}: format error: {exc}{where}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericFailure as exc:
        print(f"sgsplat {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
