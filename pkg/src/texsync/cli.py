"""Command-line entry point and experiment drivers.

Subcommands:

    run               one texturing run, full artifact set
    ablate-sync       synchronized vs unsynchronized runs over a seed sweep
    ablate-attention  cross-view attention reuse on vs off over a seed sweep
    make-mesh         write one of the built-in test meshes as an OBJ file

Every run directory gets a manifest (the exact resolved config), the baked
texture as 8-bit and 16-bit PNG plus a raw float32 dump, per-view renders,
the consistency report as plain text and CSV, and matplotlib figures for
the disagreement curve, the per-texel variance map, and (when snapshots
were requested) the intermediate texture estimates.

Exit codes: 0 success, 2 configuration or mesh problems (detected before
any artifact is written), 1 failures during sampling or while talking to
an external backbone.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import metrics as met
from .denoisers import PredictorError, make_predictor
from .diffusion import (
    RunContext,
    SamplerError,
    TextureResult,
    build_run_context,
    rig_for_mesh,
    run,
)
from .geometry import (
    Camera,
    GBuffer,
    Mesh,
    MeshError,
    camera_azimuth_elevation,
    load_mesh,
    make_cube,
    make_icosphere,
    make_quad,
    write_mesh,
)
from .metrics import RunConfig, build_config, manifest_lines, parse_config_file, write_report
from .uv_transport import LatentGrid, write_png, write_png16, write_raw

_CONFIG_KEYS = [f.name for f in dataclasses.fields(RunConfig)]


# ---------------------------------------------------------------------------
# Argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", default=None, help="key=value config file; flags win")
    p.add_argument("--mesh", default=None, help="OBJ mesh with a UV atlas")
    p.add_argument("--out-dir", dest="out_dir", default=None)
    for flag in (
        "texture-size",
        "view-size",
        "channels",
        "steps",
        "t-switch",
        "t-ref",
        "seed",
        "workers",
        "equatorial-views",
        "elevated-views",
        "snapshot-every",
    ):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), default=None, metavar="N")
    for flag in (
        "alpha-start",
        "alpha-end",
        "final-alpha",
        "gamma",
        "beta",
        "elevation-deg",
        "pattern-var",
        "perturb-sigma",
        "attention-bias",
    ):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), default=None, metavar="X")
    p.add_argument("--mode", choices=met.MODES, default=None)
    p.add_argument("--predictor", choices=met.PREDICTORS, default=None)
    p.add_argument("--attention", choices=("on", "off"), default=None)
    p.add_argument("--bridge-address", dest="bridge_address", default=None, metavar="HOST:PORT")
    p.add_argument(
        "--bridge-conditioning", dest="bridge_conditioning", choices=met.CONDITIONINGS, default=None
    )
    p.add_argument("--prompt", default=None)
    p.add_argument("--ancestral", action="store_const", const="true", default=None)
    p.add_argument(
        "--no-recenter",
        dest="recenter",
        action="store_const",
        const="false",
        default=None,
        help="keep the mesh where the file puts it",
    )


def _flag_overrides(args: argparse.Namespace) -> dict[str, str]:
    out: dict[str, str] = {}
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = str(value)
    return out


def _resolve_config(args: argparse.Namespace, presets: dict[str, str] | None = None) -> RunConfig:
    """Precedence, weakest first: dataclass defaults, command presets,
    config file, explicit flags."""
    merged = dict(presets or {})
    if args.config:
        merged.update(parse_config_file(args.config))
    merged.update(_flag_overrides(args))
    return build_config(None, merged)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="texsync",
        description="Texture a mesh with per-view diffusion trajectories "
        "synchronized through a shared UV texture.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="one texturing run with full artifacts")
    _add_config_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sync = sub.add_parser(
        "ablate-sync", help="compare synchronized runs against the unsynchronized baseline"
    )
    _add_config_flags(p_sync)
    p_sync.add_argument("--seeds", type=int, default=5, help="number of seeds to sweep")
    p_sync.set_defaults(func=cmd_ablate_sync)

    p_attn = sub.add_parser(
        "ablate-attention", help="compare cross-view attention reuse on vs off"
    )
    _add_config_flags(p_attn)
    p_attn.add_argument("--seeds", type=int, default=5, help="number of seeds to sweep")
    p_attn.set_defaults(func=cmd_ablate_attention)

    p_mesh = sub.add_parser("make-mesh", help="write a built-in test mesh as OBJ")
    p_mesh.add_argument("shape", choices=("quad", "cube", "icosphere"))
    p_mesh.add_argument("out", help="output OBJ path")
    p_mesh.add_argument("--half-size", type=float, default=None)
    p_mesh.add_argument("--subdivisions", type=int, default=2, help="icosphere refinement level")
    p_mesh.set_defaults(func=cmd_make_mesh)

    return parser


# ---------------------------------------------------------------------------
# Shared run plumbing


def _prepare(cfg: RunConfig) -> tuple[Mesh, list[Camera], RunContext]:
    """Validate config and mesh and precompute the run context.

    Everything that can reject a run happens here, before the output
    directory is created, so a failing invocation leaves no artifacts.
    """
    if not cfg.mesh:
        raise met.ConfigError("a mesh path is required (--mesh or mesh= in the config file)")
    mesh = load_mesh(cfg.mesh)
    if cfg.recenter:
        mesh = mesh.recentered()
    rig = rig_for_mesh(mesh, cfg)
    ctx = build_run_context(mesh, rig, cfg)
    return mesh, rig, ctx


def _execute(cfg: RunConfig, ctx: RunContext) -> TextureResult:
    predictor = make_predictor(cfg, ctx.gbufs, ctx.rig)
    try:
        return run(ctx.mesh, ctx.rig, predictor, cfg, ctx)
    finally:
        close = getattr(predictor, "close", None)
        if close is not None:
            close()


def write_run_artifacts(result: TextureResult, cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "views").mkdir(parents=True, exist_ok=True)
    figures = out / "figures"
    figures.mkdir(parents=True, exist_ok=True)

    (out / "manifest.txt").write_text("\n".join(manifest_lines(cfg)) + "\n", encoding="utf-8")
    write_raw(result.texture, out / "texture.raw")
    write_png(result.texture, out / "texture.png")
    write_png16(result.texture, out / "texture16.png")
    for v, view in enumerate(result.final_views):
        write_png(view, out / "views" / f"view_{v:02d}.png")
    write_report(result.report, cfg, out)

    met.plot_disagreement({cfg.mode: result.report}, figures / "disagreement.png")
    if result.report.variance_map is not None:
        met.plot_variance_map(result.report.variance_map, figures / "variance_map.png")
    if result.snapshots:
        met.plot_snapshot_grid(result.snapshots, figures / "snapshots.png")
    return out


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    mesh, rig, ctx = _prepare(cfg)
    result = _execute(cfg, ctx)
    out = write_run_artifacts(result, cfg, cfg.out_dir)
    d0 = result.report.final_disagreement
    seam = result.report.seam
    print(f"wrote {out}")
    print(f"final disagreement {d0:.6f}, seam ratio {'n/a' if seam is None else f'{seam:.4f}'}")
    return 0


# ---------------------------------------------------------------------------
# Ablations


def front_back_gap(final_views: list[LatentGrid], gbufs: list[GBuffer], rig: list[Camera]) -> float:
    """Distance between the front and back views' mean final value.

    The biased-conditioning fixture pushes those two views apart; attention
    reuse is expected to pull them back together.
    """
    front, back = _front_back_indices(rig)
    means = []
    for idx in (front, back):
        mask = gbufs[idx].mask
        means.append(float(final_views[idx].data[mask].mean()) if mask.any() else 0.0)
    return abs(means[0] - means[1])


def _front_back_indices(rig: list[Camera]) -> tuple[int, int]:
    angles = [camera_azimuth_elevation(cam) for cam in rig]
    low = [i for i, (_, el) in enumerate(angles) if abs(el) < np.radians(5.0)]
    if not low:
        raise met.ConfigError("rig has no equatorial cameras to compare front/back")

    def wrap(a: float) -> float:
        return float(np.abs((a + np.pi) % (2.0 * np.pi) - np.pi))

    front = min(low, key=lambda i: wrap(angles[i][0]))
    back = min(low, key=lambda i: wrap(angles[i][0] - np.pi))
    return front, back


def _sweep_config(base: RunConfig, **changes) -> RunConfig:
    cfg = dataclasses.replace(base, **changes)
    cfg.validate()
    return cfg


def cmd_ablate_sync(args: argparse.Namespace) -> int:
    base = _resolve_config(args, presets={"predictor": "toy-pattern", "perturb_sigma": "0.3"})
    out = Path(base.out_dir)
    rows: list[tuple[int, str, float, float | None]] = []
    first_reports: dict[str, met.ConsistencyReport] = {}

    for seed in range(args.seeds):
        for mode in met.MODES:
            cfg = _sweep_config(base, mode=mode, seed=seed, out_dir=str(out / f"{mode}_seed{seed}"))
            _, _, ctx = _prepare(cfg)
            result = _execute(cfg, ctx)
            write_run_artifacts(result, cfg, cfg.out_dir)
            rows.append((seed, mode, result.report.final_disagreement, result.report.seam))
            if seed == 0:
                first_reports[mode] = result.report

    lines, csv = _sync_tables(rows, args.seeds)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "ablation.csv").write_text("\n".join(csv) + "\n", encoding="utf-8")
    (out / "figures").mkdir(exist_ok=True)
    met.plot_disagreement(first_reports, out / "figures" / "disagreement_modes.png")
    print("\n".join(lines))
    return 0


def _sync_tables(rows, seeds: int) -> tuple[list[str], list[str]]:
    lines = []
    csv = ["seed,mode,final_disagreement,seam_ratio"]
    by_key = {(seed, mode): (d0, seam) for seed, mode, d0, seam in rows}
    d0_lower = seam_lower = seam_pairs = 0
    for seed, mode, d0, seam in rows:
        seam_text = "n/a" if seam is None else f"{seam:.6f}"
        lines.append(f"seed={seed} mode={mode} final_disagreement={d0:.6f} seam_ratio={seam_text}")
        csv.append(f"{seed},{mode},{d0!r},{'' if seam is None else repr(seam)}")
    for seed in range(seeds):
        d0_m, seam_m = by_key[(seed, "mvd")]
        d0_a, seam_a = by_key[(seed, "async-baseline")]
        if d0_m < d0_a:
            d0_lower += 1
        if seam_m is not None and seam_a is not None:
            seam_pairs += 1
            if seam_m < seam_a:
                seam_lower += 1
    lines.append(f"synchronized_d0_lower={d0_lower}/{seeds}")
    lines.append(f"synchronized_seam_lower={seam_lower}/{seam_pairs}")
    return lines, csv


def cmd_ablate_attention(args: argparse.Namespace) -> int:
    base = _resolve_config(
        args,
        presets={"predictor": "tiny-attention", "beta": "0.25", "attention_bias": "3.0"},
    )
    out = Path(base.out_dir)
    gaps: dict[str, list[float]] = {"on": [], "off": []}

    for seed in range(args.seeds):
        for attention in ("on", "off"):
            cfg = _sweep_config(
                base, attention=attention, seed=seed, out_dir=str(out / f"sar_{attention}_seed{seed}")
            )
            _, rig, ctx = _prepare(cfg)
            result = _execute(cfg, ctx)
            write_run_artifacts(result, cfg, cfg.out_dir)
            gaps[attention].append(front_back_gap(result.final_views, ctx.gbufs, rig))

    lines = []
    csv = ["seed,gap_attention_on,gap_attention_off"]
    reduced = 0
    for seed in range(args.seeds):
        on, off = gaps["on"][seed], gaps["off"][seed]
        reduced += int(on < off)
        lines.append(f"seed={seed} gap_on={on:.6f} gap_off={off:.6f}")
        csv.append(f"{seed},{on!r},{off!r}")
    lines.append(f"attention_reuse_reduces_gap={reduced}/{args.seeds}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "ablation.csv").write_text("\n".join(csv) + "\n", encoding="utf-8")
    (out / "figures").mkdir(exist_ok=True)
    met.plot_gap_bars(gaps["on"], gaps["off"], out / "figures" / "gap_bars.png")
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# Mesh generation


def cmd_make_mesh(args: argparse.Namespace) -> int:
    if args.shape == "quad":
        mesh = make_quad(args.half_size) if args.half_size else make_quad()
    elif args.shape == "cube":
        mesh = make_cube(args.half_size) if args.half_size else make_cube()
    else:
        mesh = make_icosphere(args.subdivisions)
    write_mesh(mesh, args.out)
    print(f"wrote {args.out} ({mesh.triangles.shape[0]} triangles)")
    return 0


# ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (met.ConfigError, MeshError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SamplerError, PredictorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
