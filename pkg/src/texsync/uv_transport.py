"""Screen <-> texture transport.

Everything that moves latent values between camera views and the shared UV
texture lives here: scattering view pixels into texels, jump-flood Voronoi
filling, triangle-visibility masking, cosine-weighted multi-view
aggregation, rendering a texture back into a view, and the exponent
schedule that shifts blending from near-uniform to head-on-view-dominated
over the course of denoising.

The UV -> texel convention used by every operation: a coordinate (u, v)
lands in column min(floor(u * W), W - 1) and row min(floor((1 - v) * H),
H - 1), so v = 1 is the top texel row. Texel (r, c) has center
(u, v) = ((c + 0.5) / W, 1 - (r + 0.5) / H).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import GBuffer, Mesh


@dataclass
class LatentGrid:
    """A C-channel float32 image: a view latent, a latent texture, or RGB.

    data: (H, W, C) float32. The role tag is carried for artifact naming and
    sanity checks; it does not change behavior.
    """

    data: np.ndarray
    role: str = "view-latent"  # view-latent | latent-texture | rgb

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValueError("LatentGrid data must be (H, W, C)")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    def validate(self) -> None:
        if not np.isfinite(self.data).all():
            raise ValueError(f"non-finite values in {self.role} grid")

    def copy(self) -> "LatentGrid":
        return LatentGrid(self.data.copy(), self.role)


@dataclass
class PartialTexture:
    """One view's contribution to the latent texture.

    values: texture-space LatentGrid.
    weight: (H, W) float64 cosine mass (theta^alpha summed over source pixels).
    valid:  (H, W) bool, texels this view may speak for.
    prefill_valid: the valid set before Voronoi filling (None until filled);
        kept so later stages can distinguish scattered from propagated texels.
    clamped_pixels: diagnostics count of source pixels whose UVs fell outside
        [0,1]^2 and were clamped.

    Invariant: weight > 0 implies valid, and ~valid implies weight == 0.
    """

    values: LatentGrid
    weight: np.ndarray
    valid: np.ndarray
    prefill_valid: np.ndarray | None = None
    clamped_pixels: int = 0

    def validate(self) -> None:
        if (self.weight[~self.valid] != 0.0).any():
            raise ValueError("invalid texels must carry zero weight")
        if (self.weight < 0.0).any():
            raise ValueError("negative texel weight")


@dataclass
class AggregateResult:
    """Blended texture plus the diagnostics the metrics layer feeds on.

    total_weight: per-texel sum of view weights.
    owner: per-texel index of the heaviest contributing view, -1 where no
        view contributed (ties go to the lower view index).
    """

    values: LatentGrid
    total_weight: np.ndarray
    owner: np.ndarray


def uv_to_texel(uv: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Map UV coordinates (..., 2) to (row, col) texel indices.

    Out-of-range coordinates are clamped into the unit square first; the
    number of clamped entries is returned for diagnostics.
    """
    u = uv[..., 0]
    v = uv[..., 1]
    out_of_range = int(((u < 0.0) | (u > 1.0) | (v < 0.0) | (v > 1.0)).sum())
    u = np.clip(u, 0.0, 1.0)
    v = np.clip(v, 0.0, 1.0)
    col = np.minimum((u * width).astype(np.int64), width - 1)
    row = np.minimum(((1.0 - v) * height).astype(np.int64), height - 1)
    return row, col, out_of_range


def scatter_to_uv(
    view: LatentGrid, gbuf: GBuffer, theta_exponent: float, texture_size: int
) -> PartialTexture:
    """Forward-project covered pixels into texels, weighted by theta^alpha.

    Pixels with theta == 0 (back-facing or uncovered) deposit nothing at any
    exponent, so a zero cosine never sneaks in through theta^0 == 1. Several
    pixels landing in one texel are combined by weighted mean; the texel
    weight keeps the *sum* of pixel masses so that total mass is conserved.
    """
    if theta_exponent < 0:
        raise ValueError("theta exponent must be >= 0")
    if view.height != gbuf.resolution or view.width != gbuf.resolution:
        raise ValueError("view resolution does not match G-buffer")
    h = w = int(texture_size)
    contributing = gbuf.mask & (gbuf.theta > 0.0)
    rows, cols, clamped = uv_to_texel(gbuf.uv[contributing], h, w)
    pix_weight = gbuf.theta[contributing] ** float(theta_exponent)
    pix_values = view.data[contributing].astype(np.float64)

    flat = rows * w + cols
    weight = np.zeros(h * w, dtype=np.float64)
    accum = np.zeros((h * w, view.channels), dtype=np.float64)
    np.add.at(weight, flat, pix_weight)
    np.add.at(accum, flat, pix_weight[:, None] * pix_values)

    valid = weight > 0.0
    values = np.zeros((h * w, view.channels), dtype=np.float64)
    values[valid] = accum[valid] / weight[valid][:, None]
    return PartialTexture(
        values=LatentGrid(values.reshape(h, w, -1).astype(np.float32), "latent-texture"),
        weight=weight.reshape(h, w),
        valid=valid.reshape(h, w),
        clamped_pixels=clamped,
    )


# ---------------------------------------------------------------------------
# Voronoi fill (jump flooding, contracted to match brute force exactly)


def nearest_seed_brute_force(valid: np.ndarray) -> np.ndarray:
    """Reference nearest-seed assignment: (H, W) linear seed indices.

    Euclidean distance between texel centers; ties go to the seed with the
    lower linear index (row-major). Quadratic cost; for tests and small
    grids only.
    """
    h, w = valid.shape
    seeds = np.flatnonzero(valid.ravel())
    if seeds.size == 0:
        raise ValueError("no seeds to fill from")
    sr, sc = np.divmod(seeds, w)
    rr, cc = np.indices((h, w))
    d2 = (rr.ravel()[:, None] - sr[None, :]) ** 2 + (cc.ravel()[:, None] - sc[None, :]) ** 2
    # argmin returns the first minimum; seeds are already in ascending
    # linear order, which is exactly the documented tie rule.
    return seeds[np.argmin(d2, axis=1)].reshape(h, w)


def _jfa_consider(
    best_lin: np.ndarray,
    best_r: np.ndarray,
    best_c: np.ndarray,
    best_d2: np.ndarray,
    step: int,
    rr: np.ndarray,
    cc: np.ndarray,
) -> bool:
    """One jump-flood round: pull candidates from the 8 neighbors at `step`.

    Updates in place; returns whether anything improved. The comparison is
    (distance^2, seed linear index) lexicographic, which encodes the tie
    rule directly in the relaxation.
    """
    h, w = best_lin.shape
    changed = False
    for dr in (-step, 0, step):
        for dc in (-step, 0, step):
            if dr == 0 and dc == 0:
                continue
            src_r = slice(max(0, -dr), h - max(0, dr))
            src_c = slice(max(0, -dc), w - max(0, dc))
            dst_r = slice(max(0, dr), h + min(0, dr))
            dst_c = slice(max(0, dc), w + min(0, dc))
            cand_lin = best_lin[src_r, src_c]
            has = cand_lin >= 0
            if not has.any():
                continue
            cand_r = best_r[src_r, src_c]
            cand_c = best_c[src_r, src_c]
            d2 = (rr[dst_r, dst_c] - cand_r) ** 2 + (cc[dst_r, dst_c] - cand_c) ** 2
            cur_d2 = best_d2[dst_r, dst_c]
            cur_lin = best_lin[dst_r, dst_c]
            better = has & ((d2 < cur_d2) | ((d2 == cur_d2) & (cand_lin < cur_lin)))
            if better.any():
                changed = True
                best_d2[dst_r, dst_c][better] = d2[better]
                best_lin[dst_r, dst_c][better] = cand_lin[better]
                best_r[dst_r, dst_c][better] = cand_r[better]
                best_c[dst_r, dst_c][better] = cand_c[better]
    return changed


def nearest_seed_jfa(valid: np.ndarray) -> np.ndarray:
    """Jump-flood nearest-seed assignment matching the brute-force reference.

    Runs 1+JFA (an initial unit-step round, then halving steps) and finishes
    with unit-step relaxation to a fixed point. The fixed-point sweep mops up
    the rare islands classic jump flooding leaves behind.
    """
    h, w = valid.shape
    if not valid.any():
        raise ValueError("no seeds to fill from")
    rr, cc = np.indices((h, w))
    rr = rr.astype(np.int64)
    cc = cc.astype(np.int64)
    best_lin = np.where(valid, rr * w + cc, -1)
    best_r = np.where(valid, rr, 0)
    best_c = np.where(valid, cc, 0)
    best_d2 = np.where(valid, 0, np.iinfo(np.int64).max)

    steps = [1]
    k = 1 << max(0, int(np.ceil(np.log2(max(h, w)))) - 1)
    while k >= 1:
        steps.append(k)
        k //= 2
    for step in steps:
        _jfa_consider(best_lin, best_r, best_c, best_d2, step, rr, cc)
    for _ in range(4 * max(h, w)):  # generous cap; converges in a few sweeps
        if not _jfa_consider(best_lin, best_r, best_c, best_d2, 1, rr, cc):
            break
    return best_lin


def voronoi_fill(partial: PartialTexture) -> PartialTexture:
    """Propagate every valid texel's value/weight to its Voronoi cell.

    After filling, all texels are valid and carry their nearest seed's value
    and weight; the original valid set is preserved in prefill_valid.
    Raises ValueError("no seeds to fill from") on an empty partial.
    """
    if not partial.valid.any():
        raise ValueError("no seeds to fill from")
    owner_lin = nearest_seed_jfa(partial.valid)
    h, w = partial.valid.shape
    flat_values = partial.values.data.reshape(h * w, -1)
    flat_weight = partial.weight.reshape(h * w)
    filled_values = flat_values[owner_lin.ravel()].reshape(partial.values.data.shape)
    filled_weight = flat_weight[owner_lin.ravel()].reshape(h, w)
    return PartialTexture(
        values=LatentGrid(filled_values.copy(), "latent-texture"),
        weight=filled_weight,
        valid=np.ones((h, w), dtype=bool),
        prefill_valid=partial.valid.copy(),
        clamped_pixels=partial.clamped_pixels,
    )


# ---------------------------------------------------------------------------
# Visibility masking


def uv_chart_map(mesh: Mesh, texture_size: int) -> np.ndarray:
    """Rasterize the UV atlas: per-texel triangle id, -1 in the gutters.

    A texel belongs to the triangle whose UV footprint contains its center;
    overlaps (shared chart edges) resolve to the lower triangle id. The map
    depends only on (mesh, resolution), so callers should compute it once.
    """
    h = w = int(texture_size)
    chart = np.full((h, w), -1, dtype=np.int32)
    for f in range(mesh.num_triangles - 1, -1, -1):
        # Descending order: later (lower-id) writes win, giving the tie rule.
        tri = mesh.uvs[f]
        cols = tri[:, 0] * w - 0.5
        rows = (1.0 - tri[:, 1]) * h - 0.5
        area2 = (cols[1] - cols[0]) * (rows[2] - rows[0]) - (cols[2] - cols[0]) * (
            rows[1] - rows[0]
        )
        if abs(area2) < 1e-14:
            continue
        c0 = max(0, int(np.ceil(cols.min())))
        c1 = min(w - 1, int(np.floor(cols.max())))
        r0 = max(0, int(np.ceil(rows.min())))
        r1 = min(h - 1, int(np.floor(rows.max())))
        if c0 > c1 or r0 > r1:
            continue
        pcx = np.arange(c0, c1 + 1, dtype=np.float64)[None, :]
        pcy = np.arange(r0, r1 + 1, dtype=np.float64)[:, None]
        w0 = ((cols[1] - pcx) * (rows[2] - pcy) - (cols[2] - pcx) * (rows[1] - pcy)) / area2
        w1 = ((cols[2] - pcx) * (rows[0] - pcy) - (cols[0] - pcx) * (rows[2] - pcy)) / area2
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        chart[r0 : r1 + 1, c0 : c1 + 1][inside] = f
    return chart


def visibility_mask(
    filled: PartialTexture,
    mesh: Mesh,
    gbuf: GBuffer,
    chart_map: np.ndarray | None = None,
) -> PartialTexture:
    """Invalidate texels whose UV triangle is not visible in this view.

    Bounds Voronoi propagation to the charts the view actually sees. Gutter
    texels (no chart) are always invalidated. Pass a precomputed chart_map
    when calling repeatedly; it only depends on (mesh, texture resolution).
    """
    h, w = filled.valid.shape
    if chart_map is None:
        chart_map = uv_chart_map(mesh, h)
    visible = gbuf.visible_triangles()
    keep = (chart_map >= 0) & np.isin(chart_map, visible)
    valid = filled.valid & keep
    weight = np.where(valid, filled.weight, 0.0)
    return PartialTexture(
        values=filled.values,
        weight=weight,
        valid=valid,
        prefill_valid=filled.prefill_valid,
        clamped_pixels=filled.clamped_pixels,
    )


# ---------------------------------------------------------------------------
# Aggregation and texture rendering


def aggregate(partials: list[PartialTexture], gamma: float = 1e-8) -> AggregateResult:
    """Blend per-view partial textures by their cosine mass.

    Per texel and channel: sum_v(value_v * weight_v) / (sum_v(weight_v) +
    gamma). gamma is a single additive constant per texel; texels no view
    covers come out ~0 (gamma-driven). Accumulation runs in float64 over the
    given view order, so the result is bitwise reproducible for a fixed
    input list.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if not partials:
        raise ValueError("nothing to aggregate")
    shape = partials[0].values.data.shape
    for p in partials:
        if p.values.data.shape != shape or p.weight.shape != shape[:2]:
            raise ValueError("partial texture dimensions disagree")

    num = np.zeros(shape, dtype=np.float64)
    den = np.zeros(shape[:2], dtype=np.float64)
    best_weight = np.zeros(shape[:2], dtype=np.float64)
    owner = np.full(shape[:2], -1, dtype=np.int32)
    for idx, p in enumerate(partials):
        w = np.where(p.valid, p.weight, 0.0)
        num += w[..., None] * p.values.data.astype(np.float64)
        den += w
        heavier = w > best_weight  # strict: ties keep the earlier (lower) view
        owner[heavier] = idx
        best_weight[heavier] = w[heavier]
    values = num / (den + gamma)[..., None]
    return AggregateResult(
        values=LatentGrid(values.astype(np.float32), "latent-texture"),
        total_weight=den,
        owner=owner,
    )


def render_from_texture(texture: LatentGrid, gbuf: GBuffer) -> LatentGrid:
    """Sample the texture back into a view with nearest-texel lookup.

    Nearest (not bilinear) because texels across a chart boundary belong to
    unrelated surface points. Uncovered pixels come back 0; the caller
    composites background using gbuf.mask.
    """
    h, w = texture.height, texture.width
    rows, cols, _ = uv_to_texel(gbuf.uv[gbuf.mask], h, w)
    out = np.zeros((gbuf.resolution, gbuf.resolution, texture.channels), dtype=np.float32)
    out[gbuf.mask] = texture.data[rows, cols]
    return LatentGrid(out, "view-latent")


def alpha_schedule(t: int, total_steps: int, alpha_start: float, alpha_end: float) -> float:
    """Blending exponent, linear in elapsed denoising fraction.

    t counts down from total_steps (all noise) to 0 (clean), so the exponent
    ramps from alpha_start at t = T to alpha_end at t = 0.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if alpha_end < alpha_start:
        raise ValueError("alpha_end must be >= alpha_start")
    return alpha_start + (alpha_end - alpha_start) * (total_steps - t) / total_steps


# ---------------------------------------------------------------------------
# Export: raw float dumps and PNG


_RAW_MAGIC = b"LTEX"


def write_raw(grid: LatentGrid, path: str | Path) -> None:
    """Dump a grid as magic + LE uint32 (width, height, channels) + LE float32."""
    header = _RAW_MAGIC + struct.pack("<III", grid.width, grid.height, grid.channels)
    Path(path).write_bytes(header + grid.data.astype("<f4").tobytes())


def read_raw(path: str | Path, role: str = "latent-texture") -> LatentGrid:
    blob = Path(path).read_bytes()
    if blob[:4] != _RAW_MAGIC:
        raise ValueError(f"{path}: not a raw latent dump")
    width, height, channels = struct.unpack("<III", blob[4:16])
    expected = 16 + width * height * channels * 4
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated dump ({len(blob)} bytes, want {expected})")
    data = np.frombuffer(blob[16:], dtype="<f4").reshape(height, width, channels)
    return LatentGrid(np.ascontiguousarray(data), role)


def to_uint8_rgb(grid: LatentGrid, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """First three channels mapped [lo, hi] -> [0, 255] with clipping."""
    if grid.channels < 3:
        rgb = np.repeat(grid.data[..., :1], 3, axis=2)
    else:
        rgb = grid.data[..., :3]
    scaled = (np.clip(rgb, lo, hi) - lo) / (hi - lo)
    return np.round(scaled * 255.0).astype(np.uint8)


def write_png(grid: LatentGrid, path: str | Path, lo: float = -1.0, hi: float = 1.0) -> None:
    """8-bit RGB PNG of the grid's first three channels."""
    from PIL import Image

    Image.fromarray(to_uint8_rgb(grid, lo, hi), mode="RGB").save(str(path))


def write_png16(grid: LatentGrid, path: str | Path, lo: float = -1.0, hi: float = 1.0) -> None:
    """16-bit RGB PNG, encoded directly (zlib + PNG chunks).

    Pillow cannot write 16-bit multichannel PNGs, so the few required chunks
    are assembled by hand: IHDR (bit depth 16, color type 2), one IDAT with
    filter-0 scanlines of big-endian samples, IEND.
    """
    if grid.channels < 3:
        rgb = np.repeat(grid.data[..., :1], 3, axis=2)
    else:
        rgb = grid.data[..., :3]
    scaled = (np.clip(rgb, lo, hi) - lo) / (hi - lo)
    samples = np.round(scaled * 65535.0).astype(">u2")

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (
            struct.pack(">I", len(payload))
            + tag
            + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
        )

    h, w = samples.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, 16, 2, 0, 0, 0)
    raster = b"".join(b"\x00" + samples[r].tobytes() for r in range(h))
    png = (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(raster, 6))
        + chunk(b"IEND", b"")
    )
    Path(path).write_bytes(png)
