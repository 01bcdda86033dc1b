"""Pluggable noise predictors.

Three families live here:

  - Closed-form Gaussian predictors (`analytic_gaussian_denoiser`,
    `pattern_denoiser`): given per-view target images, they return the
    posterior-optimal noise estimate for data distributed N(target, var*I)
    under the forward process. var=0 makes them delta-posterior oracles the
    sampler tests lean on; var~1 makes trajectories behave like a real
    generative model (targets are reached only in distribution).
  - A tiny untrained attention predictor (`tiny_attention_denoiser`):
    patch embedding -> one self-attention head -> linear head, with
    key/value tokens routed across views by an AttentionPlan. Its purpose
    is verifying the routing structure, not output quality.
  - An identity predictor used for wire-protocol equivalence runs.

All predictors are pure: identical inputs produce bitwise-identical
outputs, and they are safe to call concurrently once built.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Protocol, runtime_checkable

import numpy as np

from .metrics import RunConfig, stream_rng
from .uv_transport import LatentGrid, render_from_texture

if TYPE_CHECKING:
    from .diffusion import NoiseSchedule
    from .geometry import Camera, GBuffer


class PredictorError(RuntimeError):
    """Predictor failure, tagged with the view it happened in when known."""

    def __init__(self, message: str, view_index: int | None = None):
        self.view_index = view_index
        if view_index is not None:
            message = f"view {view_index}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class AttentionPlan:
    """Cross-view key/value routing for one run.

    sources[i] lists the views whose tokens view i attends over (queries
    always come from view i itself). Until timestep t_ref the output blends
    the source-set attention with attention onto reference_view, weighted
    beta : (1 - beta); from t_ref down only the source set is used.
    """

    sources: tuple[tuple[int, ...], ...]
    reference_view: int = 0
    beta: float = 1.0
    t_ref: int = 0

    def validate(self, num_views: int) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise PredictorError("attention beta must be in [0, 1]")
        if not 0 <= self.reference_view < num_views:
            raise PredictorError("attention reference view out of range")
        if len(self.sources) != num_views:
            raise PredictorError("attention plan covers wrong view count")
        for i, src in enumerate(self.sources):
            if not src:
                raise PredictorError(f"view {i} has an empty attention source set")
            for s in src:
                if not 0 <= s < num_views:
                    raise PredictorError(f"view {i} attends to invalid view {s}")


def build_attention_plan(
    num_views: int,
    mirrors: list[int],
    beta: float = 1.0,
    t_ref: int = 0,
    reference_view: int = 0,
    enabled: bool = True,
) -> AttentionPlan:
    """Default routing: previous view in rig order, self, and mirror view.

    Duplicates collapse (e.g. a self-mirrored front view), keeping first
    occurrence order. enabled=False is the attention-reuse-off ablation arm:
    every source set degrades to the view itself AND reference blending is
    switched off (beta forced to 1), so each view truly attends alone.
    """
    if not enabled:
        plan = AttentionPlan(tuple((i,) for i in range(num_views)), reference_view, 1.0, 0)
        plan.validate(num_views)
        return plan
    sources = []
    for i in range(num_views):
        wanted = [(i - 1) % num_views, i, mirrors[i]]
        seen: list[int] = []
        for s in wanted:
            if s not in seen:
                seen.append(s)
        sources.append(tuple(seen))
    plan = AttentionPlan(tuple(sources), reference_view, float(beta), int(t_ref))
    plan.validate(num_views)
    return plan


@runtime_checkable
class NoisePredictor(Protocol):
    """Contract the sampler drives: batched per-view noise prediction."""

    supports_attention_reuse: bool
    supports_decode: bool

    def predict(
        self,
        views: list[LatentGrid],
        t: int,
        schedule: "NoiseSchedule",
        plan: AttentionPlan | None = None,
        conditioning: list[LatentGrid] | None = None,
    ) -> list[LatentGrid]: ...

    def decode(self, views: list[LatentGrid]) -> list[LatentGrid]: ...


# ---------------------------------------------------------------------------
# Closed-form Gaussian predictors


class AnalyticGaussianPredictor:
    """Posterior-optimal noise for per-view data ~ N(target, var * I).

    With z_t = sqrt(ab)*x + sqrt(1-ab)*e, the posterior mean of x is
    target + k*(z_t - sqrt(ab)*target), k = sqrt(ab)*var / (ab*var + 1-ab),
    and the matching noise estimate is (z_t - sqrt(ab)*E[x|z_t]) / sqrt(1-ab).
    var=0 collapses to the delta posterior E[x|z_t] = target.
    """

    supports_attention_reuse = False
    supports_decode = False

    def __init__(self, target_means: list[LatentGrid], target_var: float):
        if target_var < 0:
            raise PredictorError("target variance must be >= 0")
        self.targets = [t.copy() for t in target_means]
        self.var = float(target_var)

    def predict(self, views, t, schedule, plan=None, conditioning=None):
        if len(views) != len(self.targets):
            raise PredictorError(f"expected {len(self.targets)} views, got {len(views)}")
        ab = float(schedule.alpha_bar[t])
        out = []
        for idx, view in enumerate(views):
            mu = self.targets[idx].data.astype(np.float64)
            if view.data.shape != mu.shape:
                raise PredictorError("view shape does not match target", view_index=idx)
            z = view.data.astype(np.float64)
            if 1.0 - ab < 1e-12:
                eps = np.zeros_like(z)
            else:
                if self.var == 0.0:
                    xhat = mu
                else:
                    k = np.sqrt(ab) * self.var / (ab * self.var + 1.0 - ab)
                    xhat = mu + k * (z - np.sqrt(ab) * mu)
                eps = (z - np.sqrt(ab) * xhat) / np.sqrt(1.0 - ab)
            out.append(LatentGrid(eps.astype(np.float32), view.role))
        return out

    def decode(self, views):
        raise PredictorError("analytic predictor has no decoder")


def analytic_gaussian_denoiser(
    target_means: list[LatentGrid], target_var: float
) -> AnalyticGaussianPredictor:
    return AnalyticGaussianPredictor(target_means, target_var)


def make_pattern_texture(size: int, channels: int, rng: np.random.Generator) -> LatentGrid:
    """Smooth sinusoidal ground-truth texture with values inside (-0.8, 0.8).

    Low-frequency by construction so that texture-space gradients are small
    compared to the cross-view disagreements the consistency metrics probe.
    """
    uu, vv = np.meshgrid(
        (np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="xy"
    )
    data = np.zeros((size, size, channels), dtype=np.float64)
    for c in range(channels):
        fu, fv = rng.uniform(0.5, 2.5, 2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.45, 0.7)
        data[..., c] = amp * np.sin(2.0 * np.pi * (fu * uu + fv * vv) + phase)
    return LatentGrid(data.astype(np.float32), "latent-texture")


def pattern_denoiser(
    texture_target: LatentGrid,
    gbufs: list["GBuffer"],
    target_var: float = 1.0,
    background: np.ndarray | None = None,
    perturb_sigma: float = 0.0,
    perturb_seed: int = 0,
) -> AnalyticGaussianPredictor:
    """Condition-dependent toy: each view's target is its own render of a
    shared ground-truth texture.

    Optional per-view perturbations (a constant per-channel color offset of
    scale perturb_sigma, drawn per view) make the views' targets disagree,
    which is the knob the consistency experiments turn. Background pixels
    target the run's solid background color when one is given.
    """
    rng = stream_rng(perturb_seed, 3)
    offsets = rng.normal(0.0, perturb_sigma, (len(gbufs), texture_target.channels))
    targets = []
    for v, gbuf in enumerate(gbufs):
        target = render_from_texture(texture_target, gbuf).data.astype(np.float64)
        if background is not None:
            target[~gbuf.mask] = np.asarray(background, dtype=np.float64)
        if perturb_sigma > 0.0:
            target = target + offsets[v]
        targets.append(LatentGrid(target.astype(np.float32), "view-latent"))
    return AnalyticGaussianPredictor(targets, target_var)


class IdentityPredictor:
    """Returns the input latents as the noise estimate; decode is identity.

    Exists so a run through the wire protocol's echo mode has a bit-exact
    local twin.
    """

    supports_attention_reuse = False
    supports_decode = True

    def predict(self, views, t, schedule, plan=None, conditioning=None):
        return [view.copy() for view in views]

    def decode(self, views):
        return [view.copy() for view in views]


def identity_predictor() -> IdentityPredictor:
    return IdentityPredictor()


# ---------------------------------------------------------------------------
# Tiny attention predictor


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AttentionCheckReport:
    """Outcome of the softmax-row audit over a probe batch."""

    rows_checked: int
    max_row_sum_error: float
    min_weight: float
    row_lengths: tuple[int, ...]
    ok: bool


class TinyAttentionPredictor:
    """One-block predictor: patch embed -> single-head attention -> head.

    Weights are random (seeded, lazily sized to the channel count) and never
    trained; what matters is the routing. For view i the attention output is

        t > t_ref:  beta * SA(i, concat sources[i]) + (1-beta) * SA(i, ref)
        otherwise:  SA(i, concat sources[i])

    with queries always from view i. The noise estimate is parameterized as
    eps = sqrt(1-ab)*z - sqrt(ab)*scale*A so the implied clean estimate
    sqrt(ab)*z + sqrt(1-ab)*scale*A stays bounded along the trajectory.

    Conditioning images (same shape as the view) are added to the input
    before patching, which is how per-view guidance reaches the tokens.
    """

    supports_attention_reuse = True
    supports_decode = False

    def __init__(self, weights_seed: int, patch: int = 8, token_dim: int = 32, scale: float = 0.1):
        self.weights_seed = int(weights_seed)
        self.patch = int(patch)
        self.token_dim = int(token_dim)
        self.scale = float(scale)
        self._weights: dict[int, dict[str, np.ndarray]] = {}

    def _weights_for(self, channels: int) -> dict[str, np.ndarray]:
        if channels not in self._weights:
            rng = np.random.default_rng(
                np.random.SeedSequence(self.weights_seed, spawn_key=(channels,))
            )
            feat = self.patch * self.patch * channels
            d = self.token_dim
            self._weights[channels] = {
                "embed": rng.normal(0.0, feat**-0.5, (feat, d)),
                "q": rng.normal(0.0, d**-0.5, (d, d)),
                "k": rng.normal(0.0, d**-0.5, (d, d)),
                "v": rng.normal(0.0, d**-0.5, (d, d)),
                "out": rng.normal(0.0, d**-0.5, (d, feat)),
            }
        return self._weights[channels]

    def _tokens(self, view: LatentGrid, cond: LatentGrid | None) -> np.ndarray:
        p = self.patch
        h, w, c = view.data.shape
        if h % p or w % p:
            raise PredictorError(f"resolution {h}x{w} not divisible by patch {p}")
        x = view.data.astype(np.float64)
        if cond is not None:
            if cond.data.shape != view.data.shape:
                raise PredictorError("conditioning shape must match view")
            x = x + cond.data.astype(np.float64)
        patches = (
            x.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4).reshape(-1, p * p * c)
        )
        return patches @ self._weights_for(c)["embed"]

    def _attend(
        self, weights: dict[str, np.ndarray], q_tokens: np.ndarray, kv_tokens: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        q = q_tokens @ weights["q"]
        k = kv_tokens @ weights["k"]
        v = kv_tokens @ weights["v"]
        rows = _softmax_rows(q @ k.T / np.sqrt(self.token_dim))
        return rows @ v, rows

    def _attention_outputs(
        self,
        views: list[LatentGrid],
        t: int,
        plan: AttentionPlan | None,
        conditioning: list[LatentGrid] | None,
        collect_rows: list[np.ndarray] | None = None,
    ) -> list[np.ndarray]:
        num = len(views)
        if plan is None:
            plan = AttentionPlan(tuple((i,) for i in range(num)))
        plan.validate(num)
        if conditioning is not None and len(conditioning) != num:
            raise PredictorError("conditioning list length must match views")
        c = views[0].channels
        weights = self._weights_for(c)
        tokens = [
            self._tokens(view, conditioning[i] if conditioning else None)
            for i, view in enumerate(views)
        ]
        outputs = []
        for i in range(num):
            kv = np.concatenate([tokens[s] for s in plan.sources[i]], axis=0)
            attended, rows = self._attend(weights, tokens[i], kv)
            if collect_rows is not None:
                collect_rows.append(rows)
            if t > plan.t_ref and plan.beta < 1.0:
                ref_out, ref_rows = self._attend(weights, tokens[i], tokens[plan.reference_view])
                if collect_rows is not None:
                    collect_rows.append(ref_rows)
                attended = plan.beta * attended + (1.0 - plan.beta) * ref_out
            outputs.append(attended @ weights["out"])
        return outputs

    def predict(self, views, t, schedule, plan=None, conditioning=None):
        outputs = self._attention_outputs(views, t, plan, conditioning)
        ab = float(schedule.alpha_bar[t])
        p = self.patch
        result = []
        for view, out in zip(views, outputs):
            h, w, c = view.data.shape
            a_img = (
                out.reshape(h // p, w // p, p, p, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)
            )
            z = view.data.astype(np.float64)
            eps = np.sqrt(1.0 - ab) * z - np.sqrt(ab) * self.scale * a_img
            result.append(LatentGrid(eps.astype(np.float32), view.role))
        return result

    def attention_rows(
        self,
        views: list[LatentGrid],
        t: int,
        plan: AttentionPlan | None = None,
        conditioning: list[LatentGrid] | None = None,
    ) -> list[np.ndarray]:
        """Softmax row matrices produced while predicting on this batch."""
        rows: list[np.ndarray] = []
        self._attention_outputs(views, t, plan, conditioning, collect_rows=rows)
        return rows

    def decode(self, views):
        raise PredictorError("attention toy has no decoder")


def tiny_attention_denoiser(
    weights_seed: int, patch: int = 8, token_dim: int = 32, scale: float = 0.1
) -> TinyAttentionPredictor:
    return TinyAttentionPredictor(weights_seed, patch, token_dim, scale)


def attention_rows_stochastic_check(
    predictor: TinyAttentionPredictor,
    num_views: int = 4,
    resolution: int = 32,
    channels: int = 3,
    seed: int = 1234,
) -> AttentionCheckReport:
    """Audit softmax rows on a random probe batch: nonnegative, sum to 1.

    Probes both routing branches (t above and below t_ref with beta < 1) so
    reference-view rows are covered too.
    """
    rng = np.random.default_rng(seed)
    views = [
        LatentGrid(rng.standard_normal((resolution, resolution, channels)).astype(np.float32))
        for _ in range(num_views)
    ]
    mirrors = [(num_views - i) % num_views for i in range(num_views)]
    plan = build_attention_plan(num_views, mirrors, beta=0.5, t_ref=5)
    all_rows: list[np.ndarray] = []
    for t in (10, 3):  # above and below t_ref
        all_rows.extend(predictor.attention_rows(views, t, plan))
    max_err = 0.0
    min_weight = np.inf
    lengths: set[int] = set()
    count = 0
    for rows in all_rows:
        count += rows.shape[0]
        lengths.add(rows.shape[1])
        max_err = max(max_err, float(np.abs(rows.sum(axis=1) - 1.0).max()))
        min_weight = min(min_weight, float(rows.min()))
    return AttentionCheckReport(
        rows_checked=count,
        max_row_sum_error=max_err,
        min_weight=min_weight,
        row_lengths=tuple(sorted(lengths)),
        ok=(max_err <= 1e-6 and min_weight >= 0.0),
    )


# ---------------------------------------------------------------------------
# Factory


def make_predictor(cfg: RunConfig, gbufs: list["GBuffer"], rig: list["Camera"]):
    """Build the predictor the config names, wired to the run's fixtures."""
    if cfg.predictor in ("toy-pattern", "toy-gaussian"):
        target = make_pattern_texture(cfg.texture_size, cfg.channels, stream_rng(cfg.seed, 2))
        sigma = cfg.perturb_sigma if cfg.predictor == "toy-pattern" else 0.0
        return pattern_denoiser(
            target,
            gbufs,
            target_var=cfg.pattern_var,
            background=cfg.background_color(),
            perturb_sigma=sigma,
            perturb_seed=cfg.seed,
        )
    if cfg.predictor == "tiny-attention":
        # Weights are model parameters, not samples: keep them fixed across
        # run seeds so only the trajectory noise varies.
        return tiny_attention_denoiser(weights_seed=0)
    if cfg.predictor == "identity":
        return identity_predictor()
    if cfg.predictor == "bridge":
        from .bridge import BridgePredictor

        return BridgePredictor(cfg.bridge_address, cfg.prompt, rig)
    raise PredictorError(f"unknown predictor kind: {cfg.predictor}")
