"""Mesh texturing by synchronized multi-view diffusion.

One diffusion trajectory runs per camera view; every denoising step the
views' clean estimates are blended in UV texture space and the blended
texture is what actually takes the step, so all trajectories stay
consistent on the surface they share.
"""

from .bridge import BridgePredictor, directional_prompt
from .denoisers import (
    AnalyticGaussianPredictor,
    AttentionPlan,
    IdentityPredictor,
    NoisePredictor,
    PredictorError,
    TinyAttentionPredictor,
    build_attention_plan,
    make_predictor,
)
from .diffusion import (
    NoiseSchedule,
    RunContext,
    SamplerError,
    SamplerState,
    TextureResult,
    build_run_context,
    cosine_noise_schedule,
    estimate_clean,
    init_state,
    mvd_step,
    rig_for_mesh,
    run,
    screen_step,
    step_to_prev,
)
from .geometry import (
    Camera,
    GBuffer,
    Mesh,
    MeshError,
    build_camera_rig,
    load_mesh,
    make_cube,
    make_icosphere,
    make_quad,
    mirror_view_index,
    rasterize,
    write_mesh,
)
from .metrics import (
    ConfigError,
    ConsistencyReport,
    RunConfig,
    StepRecord,
    build_config,
    disagreement_curve,
    seam_energy,
    texel_variance_map,
)
from .uv_transport import (
    AggregateResult,
    LatentGrid,
    PartialTexture,
    aggregate,
    alpha_schedule,
    render_from_texture,
    scatter_to_uv,
    uv_chart_map,
    visibility_mask,
    voronoi_fill,
)

__version__ = "0.1.0"

__all__ = [
    "AggregateResult",
    "AnalyticGaussianPredictor",
    "AttentionPlan",
    "BridgePredictor",
    "Camera",
    "ConfigError",
    "ConsistencyReport",
    "GBuffer",
    "IdentityPredictor",
    "LatentGrid",
    "Mesh",
    "MeshError",
    "NoisePredictor",
    "NoiseSchedule",
    "PartialTexture",
    "PredictorError",
    "RunConfig",
    "RunContext",
    "SamplerError",
    "SamplerState",
    "StepRecord",
    "TextureResult",
    "TinyAttentionPredictor",
    "aggregate",
    "alpha_schedule",
    "build_attention_plan",
    "build_camera_rig",
    "build_config",
    "build_run_context",
    "cosine_noise_schedule",
    "directional_prompt",
    "disagreement_curve",
    "estimate_clean",
    "init_state",
    "load_mesh",
    "make_cube",
    "make_icosphere",
    "make_predictor",
    "make_quad",
    "mirror_view_index",
    "mvd_step",
    "rasterize",
    "render_from_texture",
    "rig_for_mesh",
    "run",
    "scatter_to_uv",
    "screen_step",
    "seam_energy",
    "step_to_prev",
    "texel_variance_map",
    "uv_chart_map",
    "visibility_mask",
    "voronoi_fill",
    "write_mesh",
]
