"""Command-line entry point: ``qspca {compress,decompress,report,sweep,lab}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import archive, codec, lab
from .factorizer import CalibrationSet, FixedIterations, SolverConfig, ValidationPatience, reconstruct
from .pipeline import checksum, compress_layer
from .quantizer import SIGNED, UNSIGNED
from .sweep import run_sweep, write_csv
from .tensor_core import WeightTensor

log = logging.getLogger("qspca")

DEFAULTS = {
    "d": 256,
    "k": None,
    "bc": 4,
    "bz": 4,
    "sparsity": 0.0,
    "mode": "oneshot",
    "stop": "valpatience",
    "seed": 0,
    "stride": 1,
    "quant": "signed",
    "weight_name": None,
}

LAB_COLUMNS = ["trial", "n", "m", "s", "iterations", "final_error", "success"]


class UsageError(Exception):
    pass


# -- config handling --------------------------------------------------------------


def _merge_config(args) -> dict:
    """Defaults, then the JSON ``--config`` file, then explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(loaded) - set(DEFAULTS) - {"k_grid", "bz_grid", "sparsity_grid"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if value is not None and key in DEFAULTS or key.endswith("_grid") and value is not None:
            cfg[key] = value
    return cfg


def _parse_stop(text):
    if text == "valpatience":
        return ValidationPatience()
    if text.startswith("iters:"):
        try:
            return FixedIterations(int(text.split(":", 1)[1]))
        except ValueError as exc:
            raise UsageError(f"--stop iters:N needs a non-negative integer, got {text!r}") from exc
    raise UsageError(f"--stop must be 'iters:N' or 'valpatience', got {text!r}")


def _solver_config(cfg) -> SolverConfig:
    e = float(cfg["sparsity"])
    if not 0.0 <= e <= 0.9:
        raise UsageError(f"--sparsity (extra sparsity) must lie in [0, 0.9], got {e}")
    mode = {"oneshot": "one_shot", "iterative": "iterative"}.get(cfg["mode"])
    if mode is None:
        raise UsageError(f"--mode must be oneshot or iterative, got {cfg['mode']!r}")
    return SolverConfig(extra_sparsity=e if e > 0 else None, thresholding=mode, stopping=_parse_stop(cfg["stop"]))


def _quant_mode(cfg):
    try:
        return {"signed": SIGNED, "unsigned": UNSIGNED}[cfg["quant"]]
    except KeyError:
        raise UsageError(f"--quant must be signed or unsigned, got {cfg['quant']!r}") from None


def _check_ranges(d, ks, bzs, es, bc):
    for k in ks:
        if not 1 <= k <= d:
            raise UsageError(f"rank k={k} must lie in [1, d={d}]")
    for b in list(bzs) + [bc]:
        if not 2 <= b <= 8:
            raise UsageError(f"bit-width {b} must lie in [2, 8]")
    for e in es:
        if not 0.0 <= e <= 0.9:
            raise UsageError(f"extra sparsity {e} must lie in [0, 0.9]")


def _load_layer(cfg, weights_path, calib_path):
    try:
        weights = archive.load(weights_path)
        calib = archive.load(calib_path)
    except (OSError, archive.ArchiveError) as exc:
        raise UsageError(str(exc)) from exc
    name = cfg.get("weight_name")
    if name is None:
        name = next((n for n, a in weights.items() if a.ndim == 4), None)
    if name not in weights or weights[name].ndim != 4:
        raise UsageError(f"no 4-D weight tensor {name!r} in {weights_path}")
    if "X" not in calib or "Y" not in calib:
        raise UsageError(f"calibration archive {calib_path} needs tensors named 'X' and 'Y'")
    W = WeightTensor(weights[name])
    try:
        cal = CalibrationSet.from_arrays(calib["X"], calib["Y"], stride=cfg["stride"],
                                         kernel_hw=W.kernel, seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(f"bad calibration data: {exc}") from exc
    if cal.weight_shape != W.shape:
        raise UsageError(f"calibration data fits a {cal.weight_shape} layer, weight is {W.shape}")
    return W, cal


def _dump_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


# -- subcommands ------------------------------------------------------------------


def cmd_compress(args) -> int:
    cfg = _merge_config(args)
    if cfg["k"] is None:
        raise UsageError("--k is required")
    _check_ranges(cfg["d"], [cfg["k"]], [cfg["bz"]], [cfg["sparsity"]], cfg["bc"])
    W, cal = _load_layer(cfg, args.weights, args.calib)
    try:
        result = compress_layer(W, cal, cfg["d"], cfg["k"], cfg["bc"], cfg["bz"],
                                _solver_config(cfg), _quant_mode(cfg))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    Path(args.out).write_bytes(result.to_bytes())
    _dump_json(result.report(), args.report)
    return 0


def cmd_decompress(args) -> int:
    try:
        layer = codec.from_bytes(Path(args.path).read_bytes())
    except (OSError, codec.CodecError) as exc:
        raise UsageError(str(exc)) from exc
    F, mean, shape = codec.decode(layer)
    W = reconstruct(F, mean, shape, np.float32)
    if args.out:
        archive.save(args.out, {args.name: W.data})
    print(json.dumps({"shape": list(W.shape), "sha256": checksum(W)}))
    return 0


def cmd_report(args) -> int:
    if args.path:
        try:
            F, _, shape = codec.decode(codec.from_bytes(Path(args.path).read_bytes()))
        except (OSError, codec.CodecError) as exc:
            raise UsageError(str(exc)) from exc
        size = codec.report_for(F, shape)
    else:
        if not (args.shape and args.k and args.d):
            raise UsageError("give a QSPC path or --shape, --d and --k")
        shape = tuple(int(s) for s in args.shape.split(","))
        kn = args.k * (int(np.prod(shape)) // args.d)
        nnz = kn if args.nnz is None else args.nnz
        try:
            size = codec.layer_size_bits(shape, args.d, args.k, args.bc, args.bz, nnz=nnz)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    out = {"size": size.as_dict()}
    if args.p:
        out["overhead"] = codec.overhead(size.shape, size.k, args.p, size.b_c, size.b_z).as_dict()
    _dump_json(out, args.out)
    return 0


def _grid(text, cast):
    return [cast(v) for v in text.split(",") if v.strip()] if isinstance(text, str) else list(text)


def cmd_sweep(args) -> int:
    cfg = _merge_config(args)
    ks = _grid(cfg.get("k_grid") or str(cfg["k"] or ""), int)
    bzs = _grid(cfg.get("bz_grid") or str(cfg["bz"]), int)
    es = _grid(cfg.get("sparsity_grid") or str(cfg["sparsity"]), float)
    if not ks or not bzs or not es:
        raise UsageError("sweep grid is empty (use --k-grid, --bz-grid, --sparsity-grid)")
    _check_ranges(cfg["d"], ks, bzs, es, cfg["bc"])
    W, cal = _load_layer(cfg, args.weights, args.calib)
    rows = run_sweep(W, cal, cfg["d"], ks, bzs, es, cfg["bc"], _solver_config({**cfg, "sparsity": 0.0}))
    with open(args.out, "w", newline="") as fh:
        write_csv(rows, fh)
    if args.pareto_out:
        with open(args.pareto_out, "w", newline="") as fh:
            write_csv([r for r in rows if r.pareto], fh)
    failed = sum(1 for r in rows if r.error)
    print(f"{len(rows)} configurations, {sum(r.pareto for r in rows)} on the Pareto front, {failed} failed",
          file=sys.stderr)
    return 0


def _lab_rows(args, status):
    """Yield CSV rows; ``status["ok"]`` is cleared when a proven bound fails."""
    if args.lab == "projection":
        worst, ratios = lab.projection_factor_check(args.trials, args.n, args.s, args.seed,
                                                    return_all=True, check=False)
        for t, r in enumerate(ratios):
            yield [t, args.n, "", args.s, 1, repr(float(r)), int(r <= 2.0)]
        status["ok"] = worst <= 2.0
        print(f"max ratio {worst:.6f} (bound 2)", file=sys.stderr)
    elif args.lab == "contraction":
        D = lab.SparseSetSpec(args.n, args.s)
        ok_all = True
        for t in range(args.trials):
            rng = lab.trial_rng(args.seed, t)
            x_star = lab.random_sparse(rng, args.n, args.s)
            law = lab.scaling_law(x_star, args.L)
            x0 = lab.hs(rng.standard_normal(args.n), args.s)
            errs = lab.contraction_run(law, D, x0, args.t, check=False)
            ok = bool(np.all(errs <= (2 * args.L) ** np.arange(args.t + 1) * errs[0] + 1e-9))
            ok_all &= ok
            yield [t, args.n, "", args.s, args.t, repr(float(errs[-1])), int(ok)]
        status["ok"] = ok_all
        print(f"envelope {'satisfied' if ok_all else 'VIOLATED'} for L={args.L}, t<={args.t}", file=sys.stderr)
    elif args.lab in ("iht", "biht"):
        hits = 0
        for t in range(args.trials):
            rng = lab.trial_rng(args.seed, t)
            if args.lab == "iht":
                A, x = lab.gaussian_sparse_instance(rng, args.n, args.m, args.s)
                res = lab.iht_recover(A, A @ x, args.s, args.iterations, args.step, x_true=x)
                ok = res.final_error <= args.tol
            else:
                A, x = lab.gaussian_sparse_instance(rng, args.n, args.m, args.s, normalize_rows=False)
                x /= np.linalg.norm(x)
                res = lab.biht_recover(A, lab.one_bit_measure(A, x), args.s, args.iterations, args.step, x_true=x)
                ok = res.final_error <= args.tol
            hits += ok
            yield [t, args.n, args.m, args.s, args.iterations, repr(res.final_error), int(ok)]
        print(f"success rate {hits}/{args.trials} = {hits / max(args.trials, 1):.2%}", file=sys.stderr)


def cmd_lab(args) -> int:
    if args.trials < 0 or args.n < 1 or not 1 <= args.s <= args.n:
        raise UsageError("need trials >= 0, n >= 1 and 1 <= s <= n")
    status = {"ok": True}
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LAB_COLUMNS)
        for row in _lab_rows(args, status):
            writer.writerow(row)
    finally:
        if args.out:
            fh.close()
    return 0 if status["ok"] else 1


# -- parser -----------------------------------------------------------------------


def _add_layer_flags(p):
    p.add_argument("--weights", required=True, help="QSPT archive holding the 4-D weight")
    p.add_argument("--calib", required=True, help="QSPT archive with calibration tensors X and Y")
    p.add_argument("--config", help="JSON file of defaults; flags override it")
    p.add_argument("--weight-name", dest="weight_name", help="tensor name inside --weights")
    p.add_argument("--d", type=int, help="tile size (default 256)")
    p.add_argument("--bc", type=int, help="codebook bit-width (default 4)")
    p.add_argument("--bz", type=int, help="latent bit-width (default 4)")
    p.add_argument("--mode", choices=["oneshot", "iterative"], help="hard-thresholding schedule")
    p.add_argument("--stop", help="iters:N or valpatience (default)")
    p.add_argument("--seed", type=int, help="calibration split seed")
    p.add_argument("--stride", type=int, help="convolution stride (padding is inferred)")
    p.add_argument("--quant", choices=["signed", "unsigned"], help="integer grid for both factors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qspca",
        description="Quantized sparse PCA compression of convolution weights. "
                    "Quality is measured as held-out calibration MSE of the layer output.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="factorize one layer into a QSPC file")
    _add_layer_flags(p)
    p.add_argument("--k", type=int, help="rank of the factorization")
    p.add_argument("--sparsity", type=float, help="extra sparsity fraction e in [0, 0.9]")
    p.add_argument("--out", required=True, help="output QSPC path")
    p.add_argument("--report", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="rebuild the weight tensor from a QSPC file")
    p.add_argument("path")
    p.add_argument("--out", help="output QSPT path")
    p.add_argument("--name", default="weight", help="tensor name in the output archive")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("report", help="size and overhead accounting")
    p.add_argument("path", nargs="?", help="QSPC file (or use --shape/--d/--k)")
    p.add_argument("--shape", help="f_out,f_in,h,w")
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--bc", type=int, default=4)
    p.add_argument("--bz", type=int, default=4)
    p.add_argument("--nnz", type=int, help="stored latent nonzeros (default: dense)")
    p.add_argument("--p", type=int, help="output spatial size for the MAC overhead")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="grid over rank, latent bit-width and extra sparsity")
    _add_layer_flags(p)
    p.add_argument("--k", type=int, help=argparse.SUPPRESS)
    p.add_argument("--sparsity", type=float, help=argparse.SUPPRESS)
    p.add_argument("--k-grid", dest="k_grid", help="comma-separated ranks")
    p.add_argument("--bz-grid", dest="bz_grid", help="comma-separated latent bit-widths")
    p.add_argument("--sparsity-grid", dest="sparsity_grid", help="comma-separated extra sparsities")
    p.add_argument("--out", required=True, help="CSV of all configurations")
    p.add_argument("--pareto-out", dest="pareto_out", help="CSV of the Pareto front")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("lab", help="convergence experiments for hard thresholding")
    p.add_argument("lab", choices=["projection", "contraction", "iht", "biht"])
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--s", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=None, help="success threshold on the final error")
    p.add_argument("--L", type=float, default=0.25, help="contraction Lipschitz constant")
    p.add_argument("--t", type=int, default=20, help="contraction iterations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_lab)
    return parser


_LAB_DEFAULTS = {
    "projection": dict(trials=10_000, n=32, s=4),
    "contraction": dict(trials=100, n=32, s=4),
    "iht": dict(trials=50, n=256, m=100, s=5, iterations=300, tol=1e-6),
    "biht": dict(trials=20, n=128, m=512, s=4, iterations=200, tol=0.1),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "lab":
        for key, value in _LAB_DEFAULTS[args.lab].items():
            if getattr(args, key) is None:
                setattr(args, key, value)
        for key in ("m", "iterations", "tol"):
            if getattr(args, key) is None:
                setattr(args, key, 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"qspca {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
