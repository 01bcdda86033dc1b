"""Meshes, cameras, and the software rasterizer.

This module owns everything between a mesh file on disk and the per-view
buffers the synchronization loop consumes: loading/validating triangle
meshes with UV atlases, building the orthographic camera rig, rasterizing
G-buffers (UV, normal, depth, coverage, cosine weight, triangle id), and
the mirror-view lookup used for cross-view attention routing.

Conventions fixed here and relied on everywhere else:
  - World frame is z-up; the camera rig's equator lies in the xy-plane and
    azimuth 0 looks down the +x axis toward the origin.
  - Pixel (row, col) centers project to integer coordinates in screen space;
    row 0 is the top of the image (+up direction).
  - Depth is distance along the view direction from the camera plane;
    smaller is closer. Exact depth ties resolve to the lower triangle index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Raised when a mesh file or mesh data violates the mesh contract."""


# ---------------------------------------------------------------------------
# Mesh container and loader


@dataclass
class Mesh:
    """Indexed triangle mesh with a per-corner UV atlas.

    positions: (V, 3) float64, object units.
    triangles: (F, 3) int32 vertex indices.
    uvs:       (F, 3, 2) float64 texture coordinates in [0,1]^2.
    normals:   (V, 3) float64 unit per-vertex normals.
    """

    positions: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray
    normals: np.ndarray

    @property
    def num_vertices(self) -> int:
        return int(self.positions.shape[0])

    @property
    def num_triangles(self) -> int:
        return int(self.triangles.shape[0])

    def validate(self) -> None:
        """Check the type invariants; raise MeshError on violation."""
        v, f = self.num_vertices, self.num_triangles
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= v):
            raise MeshError("triangle index out of range")
        if self.uvs.shape != (f, 3, 2):
            raise MeshError("every triangle needs three UV corners")
        if self.normals.shape != (v, 3):
            raise MeshError("normals must be per-vertex")
        lengths = np.linalg.norm(self.normals, axis=1)
        if v and np.abs(lengths - 1.0).max() > 1e-4:
            raise MeshError("normals must have unit length within 1e-4")
        if f and np.min(np.abs(uv_triangle_areas(self.uvs))) <= 0.0:
            raise MeshError("degenerate UV triangle (zero area)")

    def bounding_radius(self) -> float:
        """Radius of the origin-centered sphere enclosing all vertices."""
        if not self.num_vertices:
            return 0.0
        return float(np.linalg.norm(self.positions, axis=1).max())

    def recentered(self) -> "Mesh":
        """Copy translated so the bounding-box center sits at the origin."""
        lo = self.positions.min(axis=0)
        hi = self.positions.max(axis=0)
        return Mesh(self.positions - (lo + hi) / 2.0, self.triangles, self.uvs, self.normals)


def uv_triangle_areas(uvs: np.ndarray) -> np.ndarray:
    """Signed area of each UV triangle, shape (F,)."""
    e1 = uvs[:, 1] - uvs[:, 0]
    e2 = uvs[:, 2] - uvs[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def compute_vertex_normals(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted average of incident face normals, normalized per vertex.

    The unnormalized face cross product already carries the area weight.
    Vertices touched by no face get an arbitrary unit normal.
    """
    normals = np.zeros_like(positions, dtype=np.float64)
    p0 = positions[triangles[:, 0]]
    cross = np.cross(positions[triangles[:, 1]] - p0, positions[triangles[:, 2]] - p0)
    for corner in range(3):
        np.add.at(normals, triangles[:, corner], cross)
    lengths = np.linalg.norm(normals, axis=1)
    degenerate = lengths < 1e-12
    normals[degenerate] = (0.0, 0.0, 1.0)
    lengths[degenerate] = 1.0
    return normals / lengths[:, None]


def _parse_corner(token: str, lineno: int) -> tuple[int, int, int]:
    """Split one ``v/vt[/vn]`` face corner into 0-based (v, vt, vn) indices.

    vt or vn may be absent; absence is encoded as -1 and handled upstream.
    Negative (relative) indices are not part of the supported subset.
    """
    parts = token.split("/")
    if len(parts) > 3 or not parts[0]:
        raise MeshError(f"line {lineno}: malformed face corner {token!r}")
    out = [-1, -1, -1]
    for slot, part in enumerate(parts):
        if part == "":
            continue
        idx = int(part)
        if idx <= 0:
            raise MeshError(f"line {lineno}: non-positive index in face corner {token!r}")
        out[slot] = idx - 1
    return out[0], out[1], out[2]


def load_mesh(path: str | Path) -> Mesh:
    """Parse a triangle mesh with UVs from `v`/`vt`/`vn`/`f` records.

    Indices are 1-based. Raises MeshError for missing files, non-triangle
    faces, missing UV references ("mesh lacks UV atlas"), out-of-range
    indices, or degenerate UV triangles. Normals are computed by
    area-weighted face averaging when the file carries none.
    """
    path = Path(path)
    if not path.is_file():
        raise MeshError(f"mesh file not found: {path}")

    positions: list[list[float]] = []
    uv_coords: list[list[float]] = []
    file_normals: list[list[float]] = []
    corners: list[list[tuple[int, int, int]]] = []  # (v, vt, vn), 0-based, -1 = absent

    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        kind = tokens[0]
        try:
            if kind == "v":
                positions.append([float(x) for x in tokens[1:4]])
            elif kind == "vt":
                uv_coords.append([float(x) for x in tokens[1:3]])
            elif kind == "vn":
                file_normals.append([float(x) for x in tokens[1:4]])
            elif kind == "f":
                if len(tokens) != 4:
                    raise MeshError(f"line {lineno}: non-triangle face rejected")
                corners.append([_parse_corner(tok, lineno) for tok in tokens[1:]])
        except MeshError:
            raise
        except (ValueError, IndexError) as exc:
            raise MeshError(f"line {lineno}: malformed record: {raw!r}") from exc

    if not corners:
        raise MeshError(f"{path}: no faces found")
    if not uv_coords:
        raise MeshError(f"{path}: mesh lacks UV atlas")

    pos = np.asarray(positions, dtype=np.float64)
    uvs_all = np.asarray(uv_coords, dtype=np.float64)
    tris = np.zeros((len(corners), 3), dtype=np.int32)
    uvs = np.zeros((len(corners), 3, 2), dtype=np.float64)
    vn_ids = np.full((len(corners), 3), -1, dtype=np.int64)

    for fi, face in enumerate(corners):
        for ci, (vi, ti, ni) in enumerate(face):
            if not 0 <= vi < len(pos):
                raise MeshError(f"face {fi}: vertex index {vi + 1} of {len(pos)} out of range")
            if ti < 0:
                raise MeshError(f"face {fi}: mesh lacks UV atlas (corner without vt index)")
            if ti >= len(uvs_all):
                raise MeshError(f"face {fi}: uv index {ti + 1} of {len(uvs_all)} out of range")
            if ni >= len(file_normals):
                raise MeshError(f"face {fi}: normal index {ni + 1} out of range")
            tris[fi, ci] = vi
            uvs[fi, ci] = uvs_all[ti]
            vn_ids[fi, ci] = ni

    if file_normals and (vn_ids >= 0).all():
        # Average the file's per-corner normals onto vertices, then normalize.
        fn = np.asarray(file_normals, dtype=np.float64)
        normals = np.zeros_like(pos)
        np.add.at(normals, tris.ravel(), fn[vn_ids.ravel()])
        lengths = np.linalg.norm(normals, axis=1)
        bad = lengths < 1e-12
        if bad.any():
            fallback = compute_vertex_normals(pos, tris)
            normals[bad] = fallback[bad]
            lengths[bad] = 1.0
        normals = normals / lengths[:, None]
    else:
        normals = compute_vertex_normals(pos, tris)

    mesh = Mesh(pos, tris, uvs, normals)
    mesh.validate()
    return mesh


def write_mesh(mesh: Mesh, path: str | Path, include_normals: bool = True) -> None:
    """Write a mesh in the same text format load_mesh reads.

    UVs are written per corner (no deduplication); normals are optional so
    fixtures can exercise the loader's computed-normal path.
    """
    lines: list[str] = []
    for p in mesh.positions:
        lines.append(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
    for corner_uv in mesh.uvs.reshape(-1, 2):
        lines.append(f"vt {corner_uv[0]:.9g} {corner_uv[1]:.9g}")
    if include_normals:
        for n in mesh.normals:
            lines.append(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
    for fi, tri in enumerate(mesh.triangles):
        refs = []
        for ci in range(3):
            vt = 3 * fi + ci + 1
            if include_normals:
                refs.append(f"{tri[ci] + 1}/{vt}/{tri[ci] + 1}")
            else:
                refs.append(f"{tri[ci] + 1}/{vt}")
        lines.append("f " + " ".join(refs))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Procedural fixtures


def make_quad(half_size: float = 0.8) -> Mesh:
    """Single square (two triangles) in the x=0 plane facing +x.

    UVs map the square affinely onto the full [0,1]^2 atlas, which makes the
    quad the canonical fixture for screen<->texture round-trip checks.
    """
    s = half_size
    positions = np.array(
        [[0.0, -s, -s], [0.0, s, -s], [0.0, s, s], [0.0, -s, s]], dtype=np.float64
    )
    triangles = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    corner_uv = {0: (0.0, 0.0), 1: (1.0, 0.0), 2: (1.0, 1.0), 3: (0.0, 1.0)}
    uvs = np.array([[corner_uv[i] for i in tri] for tri in triangles], dtype=np.float64)
    normals = np.tile((1.0, 0.0, 0.0), (4, 1)).astype(np.float64)
    return Mesh(positions, triangles, uvs, normals)


_CUBE_FACES = (
    # (axis, sign, CCW-from-outside corner order in the face plane)
    (0, +1.0), (0, -1.0), (1, +1.0), (1, -1.0), (2, +1.0), (2, -1.0),
)


def make_cube(half_size: float = 0.5, chart_inset: float = 0.06) -> Mesh:
    """Axis-aligned cube with one UV chart per face in a 3x2 grid.

    Vertices are duplicated per face so computed normals are flat face
    normals. chart_inset shrinks each chart inside its grid cell, leaving a
    gutter of unused texels between charts.
    """
    positions: list[list[float]] = []
    triangles = []
    uvs = []
    h = half_size
    for face_idx, (axis, sign) in enumerate(_CUBE_FACES):
        a_axis, b_axis = [k for k in range(3) if k != axis]
        ab = [(-h, -h), (h, -h), (h, h), (-h, h)]
        corners = []
        for a, b in ab:
            p = np.zeros(3)
            p[axis] = sign * h
            p[a_axis] = a
            p[b_axis] = b
            corners.append(p)
        outward = np.zeros(3)
        outward[axis] = sign
        # Reverse the in-plane loop when it winds clockwise seen from outside.
        if np.dot(np.cross(corners[1] - corners[0], corners[3] - corners[0]), outward) < 0:
            corners = [corners[0], corners[3], corners[2], corners[1]]
            ab = [ab[0], ab[3], ab[2], ab[1]]
        base = len(positions)
        positions += [list(c) for c in corners]
        cell_col, cell_row = face_idx % 3, face_idx // 3
        for a, b in ab:
            u = (cell_col + chart_inset + (1 - 2 * chart_inset) * (a + h) / (2 * h)) / 3.0
            v = (cell_row + chart_inset + (1 - 2 * chart_inset) * (b + h) / (2 * h)) / 2.0
            uvs.append((u, v))
        triangles.append((base, base + 1, base + 2))
        triangles.append((base, base + 2, base + 3))

    pos = np.asarray(positions, dtype=np.float64)
    tris = np.asarray(triangles, dtype=np.int32)
    uv_arr = np.asarray(uvs, dtype=np.float64)
    corner_uvs = uv_arr[tris]
    normals = compute_vertex_normals(pos, tris)
    mesh = Mesh(pos, tris, corner_uvs, normals)
    mesh.validate()
    return mesh


def make_icosphere(subdivisions: int = 2, radius: float = 1.0) -> Mesh:
    """Subdivided icosahedron on a sphere, one UV chart per triangle.

    Two subdivisions give 320 triangles. Charts live in a ceil(sqrt(F))^2
    cell grid; each triangle maps to an inset triangle inside its own cell.
    Normals are exactly radial.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    positions = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    midpoint_cache: dict[tuple[int, int], int] = {}

    def midpoint(i: int, j: int) -> int:
        key = (min(i, j), max(i, j))
        if key not in midpoint_cache:
            m = positions[i] + positions[j]
            positions.append(m / np.linalg.norm(m))
            midpoint_cache[key] = len(positions) - 1
        return midpoint_cache[key]

    for _ in range(subdivisions):
        next_faces = []
        for i, j, k in faces:
            ij, jk, ki = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            next_faces += [(i, ij, ki), (j, jk, ij), (k, ki, jk), (ij, jk, ki)]
        faces = next_faces

    pos = np.asarray(positions, dtype=np.float64) * radius
    tris = np.asarray(faces, dtype=np.int32)
    grid = int(np.ceil(np.sqrt(len(faces))))
    margin = 0.15
    corner_rel = np.array([(margin, margin), (1 - margin, margin), (0.5, 1 - margin)])
    uvs = np.zeros((len(faces), 3, 2), dtype=np.float64)
    for fi in range(len(faces)):
        cell_col, cell_row = fi % grid, fi // grid
        uvs[fi, :, 0] = (cell_col + corner_rel[:, 0]) / grid
        uvs[fi, :, 1] = (cell_row + corner_rel[:, 1]) / grid

    normals = pos / np.linalg.norm(pos, axis=1)[:, None]
    mesh = Mesh(pos, tris, uvs, normals)
    mesh.validate()
    return mesh


# ---------------------------------------------------------------------------
# Cameras


@dataclass(frozen=True)
class Camera:
    """Orthographic camera looking along view_dir.

    The screen spans [-half_extent, half_extent] along the `right` and `up`
    basis vectors; `resolution` pixels per side, square pixels. Depth of a
    world point is its offset from the camera center along view_dir.
    """

    center: np.ndarray
    view_dir: np.ndarray
    up: np.ndarray
    right: np.ndarray
    half_extent: float
    resolution: int
    kind: str = field(default="orthographic")

    @staticmethod
    def look_at(
        center: np.ndarray,
        target: np.ndarray | None = None,
        up_hint: np.ndarray = np.array([0.0, 0.0, 1.0]),
        half_extent: float = 1.0,
        resolution: int = 96,
    ) -> "Camera":
        """Build an orthonormal camera frame aimed from center at target."""
        center = np.asarray(center, dtype=np.float64)
        target = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
        forward = target - center
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise ValueError("camera center coincides with target")
        forward = forward / norm
        right = np.cross(forward, up_hint)
        if np.linalg.norm(right) < 1e-9:
            # Looking straight along the up hint; fall back to +x as hint.
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right = right / np.linalg.norm(right)
        up = np.cross(right, forward)
        if resolution <= 0:
            raise ValueError("camera resolution must be positive")
        return Camera(center, forward, up, right, float(half_extent), int(resolution))

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center ray origins (res, res, 3) and the shared direction."""
        res = self.resolution
        cols = (np.arange(res) + 0.5) * 2.0 / res - 1.0
        rows = 1.0 - (np.arange(res) + 0.5) * 2.0 / res
        sx = cols[None, :, None] * self.half_extent
        sy = rows[:, None, None] * self.half_extent
        origins = self.center + sx * self.right + sy * self.up
        return origins, self.view_dir


def build_camera_rig(
    radius: float,
    equatorial_count: int = 8,
    elevated_count: int = 2,
    half_extent: float | None = None,
    resolution: int = 96,
    elevation_deg: float = 45.0,
) -> list[Camera]:
    """Cameras on a sphere of the given radius, all looking at the origin.

    `equatorial_count` cameras sit on the equator at even azimuth intervals
    starting from +x; `elevated_count` more sit at `elevation_deg` above the
    equator, also at even azimuth intervals (two of them land at azimuths 0
    and 180). Ordering is deterministic: equatorial by azimuth, then
    elevated by azimuth.
    """
    if radius <= 0:
        raise ValueError("rig radius must be positive")
    he = radius if half_extent is None else half_extent
    cams: list[Camera] = []
    specs: list[tuple[float, float]] = []  # (azimuth_rad, elevation_rad)
    for k in range(equatorial_count):
        specs.append((2.0 * np.pi * k / max(equatorial_count, 1), 0.0))
    for k in range(elevated_count):
        specs.append((2.0 * np.pi * k / max(elevated_count, 1), np.deg2rad(elevation_deg)))
    for az, el in specs:
        center = radius * np.array(
            [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)]
        )
        cams.append(Camera.look_at(center, half_extent=he, resolution=resolution))
    return cams


def camera_azimuth_elevation(camera: Camera) -> tuple[float, float]:
    """Recover (azimuth, elevation) in radians from a rig camera's center."""
    c = camera.center
    r = np.linalg.norm(c)
    if r < 1e-12:
        raise ValueError("camera at the origin has no azimuth")
    return float(np.arctan2(c[1], c[0])), float(np.arcsin(np.clip(c[2] / r, -1.0, 1.0)))


def mirror_view_index(i: int, rig: list[Camera]) -> int:
    """Index of the view at the mirrored azimuth (reflection across y=0).

    The front view and the back view map to themselves, as do elevated
    cameras at azimuth 0/180. Raises ValueError if the rig has no camera at
    the mirrored position (only possible for hand-built rigs).
    """
    az_i, el_i = camera_azimuth_elevation(rig[i])
    for j, cam in enumerate(rig):
        az_j, el_j = camera_azimuth_elevation(cam)
        d_az = (az_j + az_i + np.pi) % (2.0 * np.pi) - np.pi  # az_j - (-az_i), wrapped
        if abs(d_az) < 1e-6 and abs(el_j - el_i) < 1e-6:
            return j
    raise ValueError(f"rig has no mirror for view {i}")


# ---------------------------------------------------------------------------
# Rasterization


@dataclass
class GBuffer:
    """Per-view rasterization output at camera resolution.

    uv:     (H, W, 2) interpolated texture coordinates, 0 where uncovered.
    normal: (H, W, 3) unit interpolated normals, 0 where uncovered.
    depth:  (H, W) distance along view_dir, +inf where uncovered.
    mask:   (H, W) bool coverage.
    theta:  (H, W) clamped cosine between pixel->camera direction and the
            surface normal; 0 where uncovered or back-facing.
    tri_id: (H, W) int32 triangle index, -1 where uncovered.
    """

    uv: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    theta: np.ndarray
    tri_id: np.ndarray

    @property
    def resolution(self) -> int:
        return int(self.mask.shape[0])

    def visible_triangles(self) -> np.ndarray:
        """Sorted unique triangle ids covered by at least one pixel."""
        return np.unique(self.tri_id[self.mask])


def rasterize(mesh: Mesh, camera: Camera) -> GBuffer:
    """Z-buffered rasterization with barycentric attribute interpolation.

    Orthographic projection makes screen-space barycentrics exact for
    interpolating any per-vertex attribute. Coverage uses an inclusive
    edge test (barycentrics >= 0); depth ties keep the lower triangle id.
    """
    res = camera.resolution
    uv_buf = np.zeros((res, res, 2), dtype=np.float64)
    n_buf = np.zeros((res, res, 3), dtype=np.float64)
    depth = np.full((res, res), np.inf, dtype=np.float64)
    tri_id = np.full((res, res), -1, dtype=np.int32)

    rel = mesh.positions - camera.center
    half = camera.half_extent
    # Pixel-center lattice: pixel (r, c) center sits at screen coords (c, r).
    px = ((rel @ camera.right) / half + 1.0) * res / 2.0 - 0.5
    py = (1.0 - (rel @ camera.up) / half) * res / 2.0 - 0.5
    pz = rel @ camera.view_dir

    for f in range(mesh.num_triangles):
        i0, i1, i2 = mesh.triangles[f]
        ax, ay = px[i0], py[i0]
        bx, by = px[i1], py[i1]
        cx, cy = px[i2], py[i2]
        area2 = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
        if abs(area2) < 1e-14:
            continue  # edge-on or degenerate in screen space
        c0 = max(0, int(np.ceil(min(ax, bx, cx))))
        c1 = min(res - 1, int(np.floor(max(ax, bx, cx))))
        r0 = max(0, int(np.ceil(min(ay, by, cy))))
        r1 = min(res - 1, int(np.floor(max(ay, by, cy))))
        if c0 > c1 or r0 > r1:
            continue
        pcx = np.arange(c0, c1 + 1, dtype=np.float64)[None, :]
        pcy = np.arange(r0, r1 + 1, dtype=np.float64)[:, None]
        w0 = ((bx - pcx) * (cy - pcy) - (cx - pcx) * (by - pcy)) / area2
        w1 = ((cx - pcx) * (ay - pcy) - (ax - pcx) * (cy - pcy)) / area2
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        if not inside.any():
            continue
        z = w0 * pz[i0] + w1 * pz[i1] + w2 * pz[i2]
        window = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        better = inside & (z < depth[window])
        if not better.any():
            continue
        depth[window][better] = z[better]
        tri_id[window][better] = f
        uv_tri = mesh.uvs[f]
        n_tri = mesh.normals[[i0, i1, i2]]
        for k in range(2):
            uv_buf[window][..., k][better] = (
                w0 * uv_tri[0, k] + w1 * uv_tri[1, k] + w2 * uv_tri[2, k]
            )[better]
        for k in range(3):
            n_buf[window][..., k][better] = (
                w0 * n_tri[0, k] + w1 * n_tri[1, k] + w2 * n_tri[2, k]
            )[better]

    mask = tri_id >= 0
    lengths = np.linalg.norm(n_buf, axis=2)
    safe = np.maximum(lengths, 1e-30)
    n_buf = n_buf / safe[..., None]
    theta = np.clip(n_buf @ (-camera.view_dir), 0.0, 1.0)
    theta[~mask | (lengths < 1e-12)] = 0.0
    uv_buf[~mask] = 0.0
    n_buf[~mask] = 0.0
    return GBuffer(uv_buf, n_buf, depth, mask, theta, tri_id)
