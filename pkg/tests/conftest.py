"""Shared fixtures: small meshes, synthetic G-buffers, and tiny run configs."""

import numpy as np
import pytest

from texsync.geometry import GBuffer, make_cube, make_quad


@pytest.fixture
def quad():
    return make_quad()


@pytest.fixture
def cube():
    return make_cube()


@pytest.fixture
def seam_cube():
    # chart_inset=0 makes chart cells share texel edges, so cross-owner
    # texel pairs exist and seam_energy is defined.
    return make_cube(chart_inset=0.0)


def synthetic_gbuffer(
    rng: np.random.Generator,
    resolution: int,
    coverage: float = 0.7,
    zero_theta_fraction: float = 0.1,
) -> GBuffer:
    """A random G-buffer for transport tests; geometry fields are dummies."""
    r = resolution
    uv = rng.uniform(-0.05, 1.05, (r, r, 2)).astype(np.float64)
    mask = rng.uniform(size=(r, r)) < coverage
    theta = rng.uniform(0.0, 1.0, (r, r))
    theta[rng.uniform(size=(r, r)) < zero_theta_fraction] = 0.0
    theta[~mask] = 0.0
    tri_id = np.where(mask, rng.integers(0, 4, (r, r)), -1).astype(np.int32)
    normal = np.zeros((r, r, 3), dtype=np.float64)
    normal[..., 2] = 1.0
    depth = np.where(mask, rng.uniform(0.5, 2.0, (r, r)), np.inf)
    return GBuffer(uv=uv, normal=normal, depth=depth, mask=mask, theta=theta, tri_id=tri_id)
