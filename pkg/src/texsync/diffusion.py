"""Noise schedule, per-view sampler, and the synchronized denoising engine.

The engine runs one diffusion trajectory per camera view and couples them
every step through a shared texture: each view's clean estimate is
scattered into UV space, Voronoi-filled, masked to what that view can see,
and blended across views by cosine mass; the blended texture takes the
sampler step and is rendered back into every view. A final screen-space
phase (no texture sync) recovers per-view detail, and the RGB texture is
extracted from the final views with a high blending exponent and no fill.

Determinism contract: for a fixed (config, seed) the produced texture and
reports are bitwise identical regardless of worker count. All randomness is
drawn from seeded streams in a fixed serial order; the thread pool only
ever maps pure functions over views, reduced in view order.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics as met
from .denoisers import AttentionPlan, build_attention_plan
from .geometry import (
    Camera,
    GBuffer,
    Mesh,
    build_camera_rig,
    camera_azimuth_elevation,
    mirror_view_index,
    rasterize,
)
from .metrics import ConsistencyReport, RunConfig, StepRecord, stream_rng
from .uv_transport import (
    LatentGrid,
    aggregate,
    alpha_schedule,
    render_from_texture,
    scatter_to_uv,
    uv_chart_map,
    visibility_mask,
    voronoi_fill,
)


class SamplerError(RuntimeError):
    """Sampler abort; message carries the timestep (and view when known)."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal retention per timestep.

    alpha_bar has length total_steps + 1 with alpha_bar[0] == 1 (noiseless)
    and strictly decreases; all entries lie in (0, 1]. kind selects the
    deterministic update or the ancestral one (fresh noise each step).
    """

    total_steps: int
    alpha_bar: np.ndarray
    kind: str = "deterministic"  # deterministic | ancestral

    def validate(self) -> None:
        ab = self.alpha_bar
        if ab.shape != (self.total_steps + 1,):
            raise ValueError("alpha_bar must have length total_steps + 1")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if (np.diff(ab) >= 0).any():
            raise ValueError("alpha_bar must strictly decrease")
        if (ab <= 0).any() or (ab > 1).any():
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if self.kind not in ("deterministic", "ancestral"):
            raise ValueError(f"unknown sampler kind: {self.kind}")


def cosine_noise_schedule(
    total_steps: int, kind: str = "deterministic", offset: float = 0.008, max_beta: float = 0.999
) -> NoiseSchedule:
    """Squared-cosine signal retention with per-step noise growth clipped.

    Built by converting the raw cosine curve to per-step betas, clipping
    them into [1e-8, max_beta], and re-accumulating, which enforces strict
    monotonicity even for very short schedules.
    """
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    ts = np.arange(total_steps + 1, dtype=np.float64)
    f = np.cos((ts / total_steps + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
    raw = f / f[0]
    betas = np.clip(1.0 - raw[1:] / raw[:-1], 1e-8, max_beta)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    schedule = NoiseSchedule(total_steps, alpha_bar, kind)
    schedule.validate()
    return schedule


def estimate_clean(z_t: LatentGrid, eps: LatentGrid, t: int, schedule: NoiseSchedule) -> LatentGrid:
    """Remove predicted noise: z0 = (z_t - sqrt(1-ab_t) * eps) / sqrt(ab_t).

    At t = 0 (ab = 1) this is the identity. Raises on non-finite output so
    the sampler can abort with diagnostics instead of propagating NaNs.
    """
    if z_t.data.shape != eps.data.shape:
        raise ValueError("latent and noise estimate shapes differ")
    ab = float(schedule.alpha_bar[t])
    z0 = (z_t.data.astype(np.float64) - np.sqrt(1.0 - ab) * eps.data.astype(np.float64)) / np.sqrt(ab)
    if not np.isfinite(z0).all():
        raise ValueError(f"non-finite clean estimate at t={t}")
    return LatentGrid(z0.astype(np.float32), z_t.role)


def step_to_prev(
    z_t: LatentGrid,
    z0: LatentGrid,
    t: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator | None = None,
) -> LatentGrid:
    """One reverse step t -> t-1 as a linear combination of z_t and z0.

    The deterministic variant re-derives the implied noise from (z_t, z0)
    and carries it to the next noise level; the ancestral variant follows
    the forward-posterior with fresh rng noise. Works identically for
    screen-space latents and the shared texture.
    """
    if t < 1:
        raise ValueError("step_to_prev needs t >= 1")
    ab_t = float(schedule.alpha_bar[t])
    ab_p = float(schedule.alpha_bar[t - 1])
    zt = z_t.data.astype(np.float64)
    x0 = z0.data.astype(np.float64)
    eps_hat = (zt - np.sqrt(ab_t) * x0) / np.sqrt(1.0 - ab_t)
    if schedule.kind == "deterministic":
        out = np.sqrt(ab_p) * x0 + np.sqrt(1.0 - ab_p) * eps_hat
    else:
        if rng is None:
            raise ValueError("ancestral sampling needs an rng")
        sigma2 = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)
        direction = np.sqrt(max(1.0 - ab_p - sigma2, 0.0))
        out = (
            np.sqrt(ab_p) * x0
            + direction * eps_hat
            + np.sqrt(sigma2) * rng.standard_normal(zt.shape)
        )
    return LatentGrid(out.astype(np.float32), z_t.role)


# ---------------------------------------------------------------------------
# Engine state and context


@dataclass
class SamplerState:
    """Trajectory state at timestep t for all views plus the shared texture.

    In the texture-sync phase every view latent is, on covered pixels,
    exactly the nearest-texel render of latent_texture; background pixels
    carry forward-noised background color. The rng is the single serial
    stream all in-loop draws come from.
    """

    t: int
    phase: str  # texture-sync | screen-space-final
    view_latents: list[LatentGrid]
    latent_texture: LatentGrid
    background: np.ndarray  # (C,) solid background latent color
    rng: np.random.Generator


@dataclass
class RunContext:
    """Immutable per-run precomputation shared by every step."""

    cfg: RunConfig
    mesh: Mesh
    rig: list[Camera]
    gbufs: list[GBuffer]
    chart_map: np.ndarray
    mirrors: list[int]
    schedule: NoiseSchedule
    plan: AttentionPlan
    conditioning: list[LatentGrid] | None


@dataclass
class TextureResult:
    """Everything a run produces, before any files are written."""

    texture: LatentGrid
    owner: np.ndarray
    total_weight: np.ndarray
    final_views: list[LatentGrid]
    report: ConsistencyReport
    snapshots: list[tuple[int, LatentGrid]] = field(default_factory=list)


def rig_for_mesh(mesh: Mesh, cfg: RunConfig) -> list[Camera]:
    """Standard rig sized to the mesh: full coverage from every view."""
    bound = max(mesh.bounding_radius(), 1e-6)
    return build_rig_with(cfg, radius=1.5 * bound, half_extent=1.1 * bound)


def build_rig_with(cfg: RunConfig, radius: float, half_extent: float) -> list[Camera]:
    return build_camera_rig(
        radius,
        equatorial_count=cfg.equatorial_views,
        elevated_count=cfg.elevated_views,
        half_extent=half_extent,
        resolution=cfg.view_size,
        elevation_deg=cfg.elevation_deg,
    )


def _frontness(camera: Camera) -> float:
    """Cosine of the camera direction against the +x (front) axis."""
    az, el = camera_azimuth_elevation(camera)
    return float(np.cos(az) * np.cos(el))


def view_conditioning(cfg: RunConfig, rig: list[Camera], gbufs: list[GBuffer]) -> list[LatentGrid] | None:
    """Per-view conditioning images, depending on the predictor kind.

    bridge: normalized inverse depth (1 channel) or remapped camera-space
    normals (3 channels). tiny-attention with attention_bias != 0: a
    constant image of bias * frontness, the fixture that pushes front and
    back views apart for the attention-reuse experiments.
    """
    if cfg.predictor == "bridge":
        cond = []
        for gbuf in gbufs:
            if cfg.bridge_conditioning == "depth":
                img = np.zeros((gbuf.resolution, gbuf.resolution, 1), dtype=np.float32)
                if gbuf.mask.any():
                    d = gbuf.depth[gbuf.mask]
                    span = max(float(d.max() - d.min()), 1e-9)
                    img[gbuf.mask, 0] = (d.max() - d) / span
            else:
                img = np.zeros((gbuf.resolution, gbuf.resolution, 3), dtype=np.float32)
                img[gbuf.mask] = (gbuf.normal[gbuf.mask] + 1.0) / 2.0
            cond.append(LatentGrid(img, "view-latent"))
        return cond
    if cfg.predictor == "tiny-attention" and cfg.attention_bias != 0.0:
        cond = []
        for cam in rig:
            value = cfg.attention_bias * _frontness(cam)
            img = np.full((cfg.view_size, cfg.view_size, cfg.channels), value, dtype=np.float32)
            cond.append(LatentGrid(img, "view-latent"))
        return cond
    return None


def build_run_context(mesh: Mesh, rig: list[Camera], cfg: RunConfig) -> RunContext:
    """Rasterize all views and precompute everything steps reuse."""
    cfg.validate()
    if len(rig) != cfg.num_views:
        raise met.ConfigError(f"rig has {len(rig)} cameras, config expects {cfg.num_views}")
    gbufs = _map_indexed(cfg.workers, lambda v: rasterize(mesh, rig[v]), len(rig))
    chart_map = uv_chart_map(mesh, cfg.texture_size)
    mirrors = []
    for i in range(len(rig)):
        try:
            mirrors.append(mirror_view_index(i, rig))
        except ValueError:
            mirrors.append(i)  # hand-built rig without symmetry: self-mirror
    plan = build_attention_plan(
        len(rig),
        mirrors,
        beta=cfg.beta,
        t_ref=cfg.resolved_t_ref,
        reference_view=0,
        enabled=cfg.attention == "on",
    )
    schedule = cosine_noise_schedule(
        cfg.steps, "ancestral" if cfg.ancestral else "deterministic"
    )
    return RunContext(
        cfg=cfg,
        mesh=mesh,
        rig=rig,
        gbufs=gbufs,
        chart_map=chart_map,
        mirrors=mirrors,
        schedule=schedule,
        plan=plan,
        conditioning=view_conditioning(cfg, rig, gbufs),
    )


def _map_indexed(workers: int, fn, n: int) -> list:
    """Map fn over range(n), results in index order; pool only parallelizes
    pure per-view work so the outcome is worker-count independent."""
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


# ---------------------------------------------------------------------------
# Initialization


def init_state(ctx: RunContext) -> SamplerState:
    """Standard-normal latent texture, rendered into every view.

    Background pixels get independent standard-normal samples composited by
    the coverage mask. Draw order (texture, then per-view background noise
    in view order) is fixed, making init bitwise reproducible.
    """
    cfg = ctx.cfg
    rng = stream_rng(cfg.seed, 0)
    w_t = LatentGrid(
        rng.standard_normal((cfg.texture_size, cfg.texture_size, cfg.channels)).astype(np.float32),
        "latent-texture",
    )
    background = cfg.background_color()
    views = []
    for gbuf in ctx.gbufs:
        z = render_from_texture(w_t, gbuf)
        noise = rng.standard_normal(z.data.shape).astype(np.float32)
        z.data[~gbuf.mask] = noise[~gbuf.mask]
        views.append(z)
    phase = "texture-sync" if cfg.mode == "mvd" else "screen-space-final"
    return SamplerState(cfg.steps, phase, views, w_t, background, rng)


# ---------------------------------------------------------------------------
# Steps


def _predict(state: SamplerState, predictor, ctx: RunContext) -> list[LatentGrid]:
    try:
        return predictor.predict(
            state.view_latents, state.t, ctx.schedule, ctx.plan, ctx.conditioning
        )
    except Exception as exc:
        raise SamplerError(f"noise prediction failed at t={state.t}: {exc}") from exc


def _clean_estimates(
    state: SamplerState, eps_list: list[LatentGrid], ctx: RunContext
) -> list[LatentGrid]:
    out = []
    for v, (z, eps) in enumerate(zip(state.view_latents, eps_list)):
        try:
            out.append(estimate_clean(z, eps, state.t, ctx.schedule))
        except ValueError as exc:
            raise SamplerError(f"view {v}: {exc}") from exc
    return out


def _contribution_partials(z0s: list[LatentGrid], alpha: float, ctx: RunContext) -> list:
    """scatter -> fill -> visibility-mask for every view, in parallel."""

    def per_view(v: int):
        part = scatter_to_uv(z0s[v], ctx.gbufs[v], alpha, ctx.cfg.texture_size)
        if not part.valid.any():
            # Edge-on or back-facing view: nothing to propagate or mask.
            return part
        part = voronoi_fill(part)
        return visibility_mask(part, ctx.mesh, ctx.gbufs[v], ctx.chart_map)

    return _map_indexed(ctx.cfg.workers, per_view, len(z0s))


def _noised_background(
    state: SamplerState, t_prev: int, schedule: NoiseSchedule, shape: tuple[int, ...]
) -> np.ndarray:
    """Forward-noise the run's solid background color to level t_prev."""
    ab = float(schedule.alpha_bar[t_prev])
    eps = state.rng.standard_normal(shape)
    return (np.sqrt(ab) * state.background.astype(np.float64) + np.sqrt(1.0 - ab) * eps).astype(
        np.float32
    )


def _maybe_snapshot(ctx: RunContext, t: int, partials) -> LatentGrid | None:
    every = ctx.cfg.snapshot_every
    if every <= 0:
        return None
    if (ctx.cfg.steps - t) % every != 0 and t != 1:
        return None
    return aggregate(partials, ctx.cfg.gamma).values.copy()


def mvd_step(state: SamplerState, predictor, ctx: RunContext) -> tuple[SamplerState, StepRecord]:
    """One synchronized step: predict per view, blend in UV space, step the
    texture, and render it back into all views.

    Background pixels are replaced by the run's background color forward-
    noised to the new timestep (fresh noise per view, drawn serially).
    """
    if state.phase != "texture-sync":
        raise SamplerError(f"mvd_step in phase {state.phase} at t={state.t}")
    t = state.t
    cfg = ctx.cfg
    alpha = alpha_schedule(t, cfg.steps, cfg.alpha_start, cfg.alpha_end)
    eps_list = _predict(state, predictor, ctx)
    z0s = _clean_estimates(state, eps_list, ctx)
    partials = _contribution_partials(z0s, alpha, ctx)
    disagreement = met.disagreement_at(partials)
    snapshot = _maybe_snapshot(ctx, t, partials)

    blended = aggregate(partials, cfg.gamma)
    w_prev = step_to_prev(state.latent_texture, blended.values, t, ctx.schedule, state.rng)

    views = []
    for gbuf in ctx.gbufs:
        z = render_from_texture(w_prev, gbuf)
        bg = _noised_background(state, t - 1, ctx.schedule, z.data.shape)
        z.data[~gbuf.mask] = bg[~gbuf.mask]
        views.append(z)

    record = StepRecord(
        t=t,
        phase="texture-sync",
        alpha=alpha,
        disagreement=disagreement,
        clamped_pixels=sum(p.clamped_pixels for p in partials),
        snapshot=snapshot,
    )
    new_state = replace(state, t=t - 1, view_latents=views, latent_texture=w_prev)
    return new_state, record


def screen_step(
    state: SamplerState, predictor, ctx: RunContext
) -> tuple[SamplerState, StepRecord]:
    """One unsynchronized step: every view denoises independently.

    The texture is not touched; contribution partials are still computed so
    the disagreement curve stays comparable between modes.
    """
    t = state.t
    cfg = ctx.cfg
    alpha = alpha_schedule(t, cfg.steps, cfg.alpha_start, cfg.alpha_end)
    eps_list = _predict(state, predictor, ctx)
    z0s = _clean_estimates(state, eps_list, ctx)
    partials = _contribution_partials(z0s, alpha, ctx)
    disagreement = met.disagreement_at(partials)
    snapshot = _maybe_snapshot(ctx, t, partials)

    views = [
        step_to_prev(z, z0, t, ctx.schedule, state.rng)
        for z, z0 in zip(state.view_latents, z0s)
    ]
    record = StepRecord(
        t=t,
        phase="screen-space-final",
        alpha=alpha,
        disagreement=disagreement,
        clamped_pixels=sum(p.clamped_pixels for p in partials),
        snapshot=snapshot,
    )
    new_state = replace(
        state, t=t - 1, phase="screen-space-final", view_latents=views
    )
    return new_state, record


# ---------------------------------------------------------------------------
# Full run


def _final_gbufs(ctx: RunContext, resolution: int) -> list[GBuffer]:
    """G-buffers for the final extraction; re-rasterized if the decoded
    views come back at a different resolution than the latent views."""
    if resolution == ctx.cfg.view_size:
        return ctx.gbufs
    cams = [replace(cam, resolution=resolution) for cam in ctx.rig]
    return _map_indexed(ctx.cfg.workers, lambda v: rasterize(ctx.mesh, cams[v]), len(cams))


@dataclass
class Extraction:
    """Final bake plus the dense diagnostics the report is computed from.

    The exported texture is scattered WITHOUT Voronoi fill, so texels no
    view observed stay empty (gamma drives them to ~0) instead of being
    smeared over by edge values. That sparsity makes the export useless for
    adjacency statistics, so seam energy and the variance map come from a
    parallel filled-and-masked bake of the same decoded views.
    """

    texture: LatentGrid
    owner: np.ndarray
    total_weight: np.ndarray
    seam: float | None
    variance_map: np.ndarray


def extract_texture(views: list[LatentGrid], predictor, ctx: RunContext) -> Extraction:
    """Decode final views and bake them with a high blending exponent."""
    cfg = ctx.cfg
    if predictor.supports_decode:
        try:
            decoded = predictor.decode(views)
        except Exception as exc:
            raise SamplerError(f"decode failed: {exc}") from exc
    else:
        decoded = views
    gbufs = _final_gbufs(ctx, decoded[0].height)

    def per_view(v: int):
        sparse = scatter_to_uv(decoded[v], gbufs[v], cfg.final_alpha, cfg.texture_size)
        if not sparse.valid.any():
            return sparse, sparse
        dense = visibility_mask(voronoi_fill(sparse), ctx.mesh, gbufs[v], ctx.chart_map)
        return sparse, dense

    pairs = _map_indexed(cfg.workers, per_view, len(decoded))
    blended = aggregate([sparse for sparse, _ in pairs], cfg.gamma)
    diagnostic = aggregate([dense for _, dense in pairs], cfg.gamma)
    return Extraction(
        texture=LatentGrid(blended.values.data, "rgb"),
        owner=blended.owner,
        total_weight=blended.total_weight,
        seam=met.seam_energy(diagnostic.values, diagnostic.owner),
        variance_map=met.texel_variance_map([dense for _, dense in pairs]),
    )


def run(
    mesh: Mesh,
    rig: list[Camera],
    predictor,
    cfg: RunConfig,
    ctx: RunContext | None = None,
) -> TextureResult:
    """Full trajectory: synced phase, screen-space final phase, extraction.

    mode="mvd" synchronizes through the texture from t=T down to t_switch
    and then releases the views; mode="async-baseline" skips every texture
    interaction (aside from read-only consistency measurements) while
    keeping the identical texture-consistent initialization.
    """
    t_setup = time.perf_counter()
    if ctx is None:
        ctx = build_run_context(mesh, rig, cfg)
    state = init_state(ctx)
    t_loop = time.perf_counter()

    records: list[StepRecord] = []
    if cfg.mode == "mvd":
        t_switch = cfg.resolved_t_switch
        for _ in range(cfg.steps, max(1, t_switch) - 1, -1):
            state, rec = mvd_step(state, predictor, ctx)
            records.append(rec)
        state.phase = "screen-space-final"
        for _ in range(t_switch - 1, 0, -1):
            state, rec = screen_step(state, predictor, ctx)
            records.append(rec)
    else:
        for _ in range(cfg.steps, 0, -1):
            state, rec = screen_step(state, predictor, ctx)
            records.append(rec)
    if state.t != 0:
        raise SamplerError(f"trajectory ended at t={state.t}, expected 0")

    t_extract = time.perf_counter()
    extraction = extract_texture(state.view_latents, predictor, ctx)
    report = ConsistencyReport(
        steps=records,
        seam=extraction.seam,
        variance_map=extraction.variance_map,
        clamped_pixels=sum(rec.clamped_pixels for rec in records),
        runtime_seconds={
            "setup": t_loop - t_setup,
            "loop": t_extract - t_loop,
            "extract": time.perf_counter() - t_extract,
            "total": time.perf_counter() - t_setup,
        },
    )
    report.validate()
    snapshots = [(rec.t, rec.snapshot) for rec in records if rec.snapshot is not None]
    return TextureResult(
        texture=extraction.texture,
        owner=extraction.owner,
        total_weight=extraction.total_weight,
        final_views=state.view_latents,
        report=report,
        snapshots=snapshots,
    )
