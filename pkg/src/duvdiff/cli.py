"""Command-line interface.

Subcommands: simulate, preprocess, fit, compare, dump-kicks, dump-config.
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical error.
Numeric flags accept the same unit suffixes as the config file.  Report
paths also render matplotlib figures alongside the delimited outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .beamline import ImageSynthesizer, QuadratureSpec, synthesize_image
from .config import parse_config, parse_quantity, serialize_config
from .errors import ConfigError, DataError, DuvDiffError, NumericsError
from .fitting import (fit_stage1, fit_stage2, heatmap_csv,
                      integrate_horizontal, log_rss)
from .grating import (channel_amplitudes, grating_strength, kick_distribution)
from .imageproc import (RawImage, crop, despike, normalize_unity, rotate, rss,
                        subtract_background, subtract_plane, vertical_smooth)
from . import figures, imgio


def _quantity(text: str) -> float:
    try:
        return parse_quantity(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _range_triplet(text: str) -> tuple[float, float, int]:
    """Parse lo:hi:n, where lo/hi accept unit suffixes."""
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            f"expected lo:hi:n, got {text!r}")
    return _quantity(parts[0]), _quantity(parts[1]), int(parts[2])


def _pair(text: str) -> tuple[float, float]:
    parts = text.split(":")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}")
    return _quantity(parts[0]), _quantity(parts[1])


def _rect(text: str) -> tuple[int, int, int, int]:
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(
            f"expected row0,col0,height,width, got {text!r}")
    return tuple(int(p) for p in parts)


class _JsonLog:
    """Optional JSON-lines event stream."""

    def __init__(self, path: str | None):
        self._fh = None
        if path == "-":
            self._fh = sys.stderr
        elif path:
            self._fh = open(path, "w", encoding="utf-8")
        self._owns = bool(path) and path != "-"

    def emit(self, event: str, **fields) -> None:
        if self._fh is None:
            return
        record = {"ts": time.time(), "event": event, **fields}
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._owns and self._fh is not None:
            self._fh.close()


class _Manifest:
    def __init__(self, command: str, config_path: str | None):
        self.command = command
        self.config_path = config_path
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.quadrature: dict = {}
        self._t0 = time.monotonic()

    def add_output(self, path) -> str:
        self.outputs.append(str(path))
        return str(path)

    def write(self, path) -> None:
        payload = {
            "command": self.command,
            "config": self.config_path,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "quadrature": self.quadrature,
            "version": __version__,
            "wall_time_s": time.monotonic() - self._t0,
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n",
                              encoding="utf-8")


def _add_quadrature_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-velocity", type=int, default=32)
    p.add_argument("--n-source-x", type=int, default=16)
    p.add_argument("--n-angle-x", type=int, default=32)
    p.add_argument("--n-source-y", type=int, default=64)
    p.add_argument("--n-angle-y", type=int, default=8)
    p.add_argument("--n-strength", type=int, default=256)
    p.add_argument("--workers", type=int, default=1)


def _quad_from_args(args) -> QuadratureSpec:
    return QuadratureSpec(
        n_velocity=args.n_velocity,
        n_source_x=args.n_source_x,
        n_angle_x=args.n_angle_x,
        n_source_y=args.n_source_y,
        n_angle_y=args.n_angle_y,
        n_strength=args.n_strength,
    )


def _load_config(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return parse_config(text)


def _write_image_outputs(image, prefix: str, manifest: _Manifest,
                         log: _JsonLog, *, figure: bool = True) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    # plain concatenation: the prefix may itself contain dots
    pgm = manifest.add_output(str(prefix) + ".pgm")
    csv = manifest.add_output(str(prefix) + ".csv")
    imgio.write_pgm16(pgm, image.data)
    imgio.write_image_csv(csv, image.data)
    log.emit("wrote", path=pgm)
    log.emit("wrote", path=csv)
    if figure:
        png = manifest.add_output(str(prefix) + ".png")
        figures.save_image_figure(png, image)
        log.emit("wrote", path=png)


def cmd_simulate(args, log: _JsonLog) -> int:
    cfg = _load_config(args.config)
    quad = _quad_from_args(args)
    manifest = _Manifest("simulate", args.config)
    manifest.quadrature = quad.__dict__.copy()
    log.emit("start", command="simulate", config=args.config)
    image = synthesize_image(cfg, quad, workers=args.workers)
    _write_image_outputs(image, args.out_prefix, manifest, log,
                         figure=not args.no_figures)
    manifest.write(manifest.add_output(str(Path(args.out_prefix)) +
                                       ".manifest.json"))
    log.emit("done", command="simulate")
    return 0


def cmd_preprocess(args, log: _JsonLog) -> int:
    manifest = _Manifest("preprocess", None)
    manifest.inputs.append(args.raw)
    log.emit("start", command="preprocess", raw=args.raw)
    img = RawImage(imgio.read_image(args.raw), pixel_pitch=args.pixel_pitch)
    if args.bright:
        brights = [RawImage(imgio.read_image(b), pixel_pitch=args.pixel_pitch)
                   for b in args.bright]
        manifest.inputs.extend(args.bright)
        img = subtract_background(img, *brights)
    img = despike(img, q=args.despike_q)
    if args.mask:
        mask = imgio.read_mask(args.mask)
        manifest.inputs.append(args.mask)
    else:
        mask = np.ones(img.data.shape, dtype=bool)
    img = subtract_plane(img, mask)
    img = rotate(img, theta_deg=args.theta)
    if args.rect is not None:
        img = crop(img, args.rect)
    img = vertical_smooth(img, args.smooth)
    img = normalize_unity(img)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".pgm":
        # clip residual negative noise: graymaps hold nonnegative counts
        imgio.write_pgm16(out, np.clip(img.data, 0.0, None))
    else:
        imgio.write_image_csv(out, img.data)
    manifest.add_output(out)
    log.emit("wrote", path=str(out))
    if not args.no_figures:
        png = manifest.add_output(out.with_suffix(".png"))
        figures.save_image_figure(png, img, title="preprocessed image")
        log.emit("wrote", path=png)
    manifest.write(manifest.add_output(str(out) + ".manifest.json"))
    log.emit("done", command="preprocess")
    return 0


def _parse_manual_params(items: list[str]) -> dict:
    allowed = {"y02", "v_shift", "y0g", "alpha", "sigma"}
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"manual parameter {item!r} is not name=value")
        name, _, value = item.partition("=")
        name = name.strip()
        if name not in allowed:
            raise ConfigError(f"unknown manual parameter {name!r}; "
                              f"allowed: {sorted(allowed)}")
        out[name] = parse_quantity(value.strip())
    return out


def _apply_params(cfg, params: dict):
    if "y02" in params:
        cfg = cfg.replace_fields("geometry", slit2_height=params["y02"])
    if "v_shift" in params:
        cfg = cfg.replace_fields("source", v_shift=params["v_shift"])
    if "y0g" in params:
        cfg = cfg.replace_fields("grating", height=params["y0g"])
    if "alpha" in params:
        cfg = cfg.replace_fields("molecule", alpha_duv=params["alpha"])
    if "sigma" in params:
        cfg = cfg.replace_fields("molecule", sigma_duv=params["sigma"])
    return cfg


def cmd_fit(args, log: _JsonLog) -> int:
    cfg = _load_config(args.config)
    quad = _quad_from_args(args)
    manifest = _Manifest("fit", args.config)
    manifest.quadrature = quad.__dict__.copy()
    manifest.inputs.append(args.image)
    log.emit("start", command="fit", config=args.config, image=args.image)
    exp_data = imgio.read_image(args.image)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)

    if args.manual_params:
        params = _parse_manual_params(args.manual_params)
        trial = _apply_params(cfg, params)
        sim = synthesize_image(trial, quad, workers=args.workers)
        value = rss(sim.data, exp_data)
        report = ["mode = manual"]
        report += [f"{k} = {params[k]!r}" for k in sorted(params)]
        report.append(f"rss = {value!r}")
        report.append(f"ln_rss = {log_rss(value)!r}")
        report_path = manifest.add_output(str(prefix) + ".report.txt")
        Path(report_path).write_text("\n".join(report) + "\n",
                                     encoding="utf-8")
        log.emit("wrote", path=report_path)
        _write_image_outputs(sim, str(prefix) + ".sim", manifest, log,
                             figure=not args.no_figures)
        manifest.write(manifest.add_output(str(prefix) + ".manifest.json"))
        log.emit("done", command="fit", mode="manual")
        return 0

    if args.alpha_range is None or args.sigma_range is None:
        raise ConfigError("--alpha-range and --sigma-range are required "
                          "unless --manual-params is given")
    exp_profile = exp_data.sum(axis=1)
    stage1 = fit_stage1(
        exp_profile, cfg,
        bounds=(args.y02_bounds, args.v_bounds),
        grid_sizes=(args.stage1_grid, args.stage1_grid),
        quad=quad, workers=args.workers, smooth_rows=args.stage1_smooth)
    log.emit("stage1", y02=stage1.y02, v_shift=stage1.v_shift,
             objective=stage1.objective, on_boundary=stage1.on_boundary,
             degenerate=stage1.degenerate)

    a_lo, a_hi, n_a = args.alpha_range
    s_lo, s_hi, n_s = args.sigma_range
    if args.log_grid:
        alpha_values = np.geomspace(a_lo, a_hi, n_a)
        sigma_values = (np.geomspace(max(s_lo, 1e-30), s_hi, n_s)
                        if s_lo > 0 else np.linspace(s_lo, s_hi, n_s))
    else:
        alpha_values = np.linspace(a_lo, a_hi, n_a)
        sigma_values = np.linspace(s_lo, s_hi, n_s)
    y0g_values = (np.array([_quantity(v) for v in args.y0g], float)
                  if args.y0g else None)
    stage2 = fit_stage2(exp_data, cfg, stage1, alpha_values, sigma_values,
                        y0g_values=y0g_values, quad=quad,
                        workers=args.workers)
    log.emit("stage2", y0g=stage2.y0g, alpha=stage2.alpha_duv,
             sigma=stage2.sigma_duv, rss=stage2.rss)

    hm_path = manifest.add_output(str(prefix) + ".heatmap.csv")
    Path(hm_path).write_text(heatmap_csv(stage2.heatmap), encoding="utf-8")
    log.emit("wrote", path=hm_path)
    report = [
        f"y02 = {stage1.y02!r}",
        f"v_shift = {stage1.v_shift!r}",
        f"stage1_objective = {stage1.objective!r}",
        f"stage1_on_boundary = {stage1.on_boundary}",
        f"stage1_degenerate = {stage1.degenerate}",
        f"y0g = {stage2.y0g!r}",
        f"alpha_duv = {stage2.alpha_duv!r}",
        f"sigma_duv = {stage2.sigma_duv!r}",
        f"rss = {stage2.rss!r}",
        f"ln_rss = {log_rss(stage2.rss)!r}",
        f"argmin = {stage2.heatmap.argmin}",
        f"tie = {stage2.heatmap.tie}",
        f"refined_alpha = {stage2.refined_alpha!r}",
        f"refined_sigma = {stage2.refined_sigma!r}",
    ]
    report_path = manifest.add_output(str(prefix) + ".report.txt")
    Path(report_path).write_text("\n".join(report) + "\n", encoding="utf-8")
    log.emit("wrote", path=report_path)
    if not args.no_figures:
        png = manifest.add_output(str(prefix) + ".heatmap.png")
        figures.save_heatmap_figure(png, stage2.heatmap)
        log.emit("wrote", path=png)
    manifest.write(manifest.add_output(str(prefix) + ".manifest.json"))
    log.emit("done", command="fit")
    return 0


def _trace(data: np.ndarray, region: float) -> np.ndarray:
    """Column sums over the lower fraction `region` of the rows."""
    h = data.shape[0]
    start = h - max(1, int(round(region * h)))
    return data[start:, :].sum(axis=0)


def _peak_table(trace: np.ndarray, spacing: float, center: float,
                pitch: float) -> list[dict]:
    """Per-order center/width/mass from fixed bins around each order slot."""
    w = trace.size
    j_max = int((w - 1) // (2 * spacing)) if spacing > 0 else 0
    rows = []
    cols = np.arange(w, dtype=float)
    for j in range(-j_max, j_max + 1):
        mid = center + j * spacing
        lo = int(np.floor(mid - spacing / 2.0))
        hi = int(np.ceil(mid + spacing / 2.0))
        lo = max(lo, 0)
        hi = min(hi, w)
        if hi <= lo:
            continue
        seg = trace[lo:hi]
        mass = float(seg.sum())
        if mass <= 0:
            rows.append({"order": j, "mass": 0.0, "center_px": float("nan"),
                         "width_px": float("nan")})
            continue
        c = float((cols[lo:hi] * seg).sum() / mass)
        var = float((((cols[lo:hi] - c) ** 2) * seg).sum() / mass)
        rows.append({"order": j, "mass": mass, "center_px": c,
                     "width_px": float(np.sqrt(max(var, 0.0)))})
    return rows


def cmd_compare(args, log: _JsonLog) -> int:
    manifest = _Manifest("compare", None)
    manifest.inputs.extend([args.image_a, args.image_b])
    log.emit("start", command="compare", a=args.image_a, b=args.image_b)
    a = imgio.read_image(args.image_a)
    b = imgio.read_image(args.image_b)
    if a.shape != b.shape:
        raise DataError(f"image dimensions differ: {a.shape} vs {b.shape}")
    value = rss(a, b)
    trace_a = _trace(a, args.trace_region)
    trace_b = _trace(b, args.trace_region)
    center = args.center if args.center is not None else (a.shape[1] - 1) / 2.0
    lines = [f"rss = {value!r}", f"ln_rss = {log_rss(value)!r}",
             f"trace_region = {args.trace_region!r}"]
    if args.order_spacing is not None:
        for label, tr in (("a", trace_a), ("b", trace_b)):
            for row in _peak_table(tr, args.order_spacing, center,
                                   args.pixel_pitch):
                lines.append(
                    f"peak {label} order={row['order']} "
                    f"mass={row['mass']!r} center_px={row['center_px']!r} "
                    f"width_px={row['width_px']!r}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest.add_output(out)
    log.emit("wrote", path=str(out))
    if not args.no_figures:
        png = manifest.add_output(out.with_suffix(".png"))
        figures.save_profile_figure(
            png, np.arange(trace_a.size),
            {"a": trace_a, "b": trace_b},
            xlabel="column (px)", title="vertically integrated traces")
        log.emit("wrote", path=png)
    manifest.write(manifest.add_output(str(out) + ".manifest.json"))
    log.emit("done", command="compare")
    return 0


def cmd_dump_kicks(args, log: _JsonLog) -> int:
    cfg = _load_config(args.config)
    manifest = _Manifest("dump-kicks", args.config)
    log.emit("start", command="dump-kicks", config=args.config)
    gs = grating_strength(cfg.molecule, cfg.grating, args.velocity, args.y)
    cs = channel_amplitudes(gs)
    kd = kick_distribution(cs, cfg.molecule)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["order,discrete_mass"]
    for j, mass in zip(kd.orders, kd.discrete):
        lines.append(f"{int(j)},{float(mass)!r}")
    lines.append(f"# phi0 = {float(gs.phi0)!r}")
    lines.append(f"# n0 = {float(gs.n0)!r}")
    lines.append(f"# survival = {float(kd.survival)!r}")
    smear_total = float(sum(p for _, _, p in kd.smear))
    lines.append(f"# smear_mass = {smear_total!r}")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest.add_output(out)
    log.emit("wrote", path=str(out))
    if not args.no_figures:
        png = manifest.add_output(out.with_suffix(".png"))
        figures.save_kick_figure(png, kd.orders, kd.discrete)
        log.emit("wrote", path=png)
    manifest.write(manifest.add_output(str(out) + ".manifest.json"))
    log.emit("done", command="dump-kicks")
    return 0


def cmd_dump_config(args, log: _JsonLog) -> int:
    cfg = _load_config(args.config)
    log.emit("start", command="dump-config", config=args.config)
    text = serialize_config(cfg)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        log.emit("wrote", path=args.out)
    else:
        sys.stdout.write(text)
    log.emit("done", command="dump-config")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duvdiff",
        description="Molecular matter-wave diffraction at a deep-UV "
                    "standing-wave grating: simulation, image "
                    "preprocessing, and parameter fitting.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-json", default=None, metavar="PATH",
                        help="JSON-lines event log ('-' for stderr)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a detector image")
    p.add_argument("config")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--no-figures", action="store_true")
    _add_quadrature_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", help="run the image pipeline")
    p.add_argument("raw")
    p.add_argument("--out", required=True)
    p.add_argument("--bright", action="append", default=[],
                   help="bright/background frame (repeatable)")
    p.add_argument("--mask", default=None,
                   help="PGM mask; zero pixels excluded from the plane fit")
    p.add_argument("--theta", type=_quantity, default=0.4,
                   help="rotation angle in degrees")
    p.add_argument("--rect", type=_rect, default=None,
                   help="crop rectangle row0,col0,height,width")
    p.add_argument("--despike-q", type=_quantity, default=1e-5)
    p.add_argument("--smooth", type=int, required=True,
                   help="vertical boxcar height in pixels")
    p.add_argument("--pixel-pitch", type=_quantity, default=0.33e-6)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fit", help="two-stage parameter fit")
    p.add_argument("config")
    p.add_argument("image", help="preprocessed, normalized image")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--y02-bounds", type=_pair, default=(-60e-6, 20e-6))
    p.add_argument("--v-bounds", type=_pair, default=(0.0, 250.0))
    p.add_argument("--stage1-grid", type=int, default=7)
    p.add_argument("--stage1-smooth", type=int, default=31,
                   help="profile boxcar width (rows) for the stage-1 "
                        "objective")
    p.add_argument("--alpha-range", type=_range_triplet, default=None,
                   help="lo:hi:n for the polarizability magnitude")
    p.add_argument("--sigma-range", type=_range_triplet, default=None,
                   help="lo:hi:n for the absorption cross section")
    p.add_argument("--log-grid", action="store_true",
                   help="log-space the alpha/sigma grids")
    p.add_argument("--y0g", action="append", default=[],
                   help="grating-height candidate (repeatable)")
    p.add_argument("--manual-params", action="append", default=[],
                   metavar="NAME=VALUE",
                   help="skip optimization; simulate at the given "
                        "parameters (y02, v_shift, y0g, alpha, sigma)")
    p.add_argument("--no-figures", action="store_true")
    _add_quadrature_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="RSS and per-order peak table")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--out", required=True)
    p.add_argument("--trace-region", type=_quantity, default=2.0 / 3.0,
                   help="lower fraction of rows integrated into the trace")
    p.add_argument("--order-spacing", type=_quantity, default=None,
                   help="order spacing in pixels for the peak table")
    p.add_argument("--center", type=_quantity, default=None,
                   help="zeroth-order column (default: image center)")
    p.add_argument("--pixel-pitch", type=_quantity, default=0.33e-6)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("dump-kicks",
                       help="per-order momentum-kick distribution")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--velocity", type=_quantity, required=True,
                   help="forward velocity, m/s")
    p.add_argument("--y", type=_quantity, default=None,
                   help="vertical position at the grating "
                        "(default: grating height)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_dump_kicks)

    p = sub.add_parser("dump-config",
                       help="parse and re-emit a config in SI units")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    log = _JsonLog(args.log_json)
    try:
        if args.command == "dump-kicks" and args.y is None:
            cfg = _load_config(args.config)
            args.y = cfg.grating.height
        return args.func(args, log)
    except ConfigError as exc:
        log.emit("error", kind="config", message=str(exc))
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        log.emit("error", kind="data", message=str(exc))
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        log.emit("error", kind="numerics", message=str(exc))
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    except DuvDiffError as exc:
        log.emit("error", kind="other", message=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        log.close()


if __name__ == "__main__":
    sys.exit(main())
