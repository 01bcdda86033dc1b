"""Run configuration, consistency metrics, and report/figure rendering.

The metrics here operationalize "did the views agree": a per-timestep
disagreement statistic over co-visible texels, a seam-energy ratio that
compares texture gradients across view-ownership boundaries against
interior gradients, and a per-texel cross-view variance map.

Reports are deterministic for a fixed (config, seed): wall-clock timings are
deliberately kept out of report.txt/report.csv and written to a separate
timings file, so byte-comparing reports across worker counts is meaningful.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .uv_transport import LatentGrid, PartialTexture

MODES = ("mvd", "async-baseline")
PREDICTORS = ("toy-gaussian", "toy-pattern", "tiny-attention", "identity", "bridge")
CONDITIONINGS = ("depth", "normal")


class ConfigError(ValueError):
    """Raised for invalid run configuration values."""


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent deterministic RNG stream `stream` under a root seed.

    Streams in use: 0 sampler state, 1 background color, 2 pattern texture,
    3 per-view perturbations.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


@dataclass
class RunConfig:
    """Everything a run needs; flat key=value files map 1:1 onto fields."""

    mesh: str = ""
    out_dir: str = "runs/out"
    texture_size: int = 512
    view_size: int = 96
    channels: int = 4
    steps: int = 50
    alpha_start: float = 1.0
    alpha_end: float = 5.0
    final_alpha: float = 6.0
    gamma: float = 1e-8
    t_switch: int = -1  # -1: switch to screen space for the last 20% of steps
    beta: float = 1.0
    t_ref: int = -1  # -1: blend against the reference view until 50% of steps
    seed: int = 0
    mode: str = "mvd"
    predictor: str = "toy-pattern"
    bridge_address: str = ""
    bridge_conditioning: str = "depth"
    prompt: str = "an object"
    attention: str = "on"  # off: attention sources collapse to the view itself
    workers: int = 1
    ancestral: bool = False
    equatorial_views: int = 8
    elevated_views: int = 2
    elevation_deg: float = 45.0
    recenter: bool = True
    pattern_var: float = 1.0
    perturb_sigma: float = 0.0
    attention_bias: float = 0.0
    snapshot_every: int = 0

    @property
    def num_views(self) -> int:
        return self.equatorial_views + self.elevated_views

    @property
    def resolved_t_switch(self) -> int:
        if self.t_switch >= 0:
            return self.t_switch
        return max(1, round(0.2 * self.steps))

    @property
    def resolved_t_ref(self) -> int:
        if self.t_ref >= 0:
            return self.t_ref
        return self.steps // 2

    def background_color(self, channels: int | None = None) -> np.ndarray:
        """Per-run solid background latent color, uniform in [-1, 1]."""
        c = self.channels if channels is None else channels
        return stream_rng(self.seed, 1).uniform(-1.0, 1.0, c).astype(np.float32)

    def validate(self) -> None:
        if self.texture_size <= 0 or self.view_size <= 0:
            raise ConfigError("resolutions must be positive")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not (self.t_switch == -1 or 0 <= self.t_switch <= self.steps):
            raise ConfigError("t_switch must be -1 or in [0, steps]")
        if not (self.t_ref == -1 or 0 <= self.t_ref <= self.steps):
            raise ConfigError("t_ref must be -1 or in [0, steps]")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must be in [0, 1]")
        if self.alpha_start < 0 or self.alpha_end < self.alpha_start:
            raise ConfigError("need 0 <= alpha_start <= alpha_end")
        if self.final_alpha < 0:
            raise ConfigError("final_alpha must be >= 0")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.predictor not in PREDICTORS:
            raise ConfigError(f"predictor must be one of {PREDICTORS}")
        if self.predictor == "bridge" and not self.bridge_address:
            raise ConfigError("bridge predictor needs bridge_address host:port")
        if self.bridge_conditioning not in CONDITIONINGS:
            raise ConfigError(f"bridge_conditioning must be one of {CONDITIONINGS}")
        if self.attention not in ("on", "off"):
            raise ConfigError("attention must be on or off")
        if self.predictor == "tiny-attention" and self.view_size % 8 != 0:
            raise ConfigError("tiny-attention needs view_size divisible by 8")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.equatorial_views < 1 or self.elevated_views < 0:
            raise ConfigError("rig needs >= 1 equatorial view")
        if self.pattern_var < 0 or self.perturb_sigma < 0:
            raise ConfigError("variances must be >= 0")
        if self.snapshot_every < 0:
            raise ConfigError("snapshot_every must be >= 0")


def _coerce(raw: str, target_type: type):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    try:
        return target_type(raw)
    except ValueError as exc:
        raise ConfigError(f"not a {target_type.__name__}: {raw!r}") from exc


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value lines; blank lines and #-comments ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def build_config(file: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """RunConfig from an optional file plus overrides (flags beat the file)."""
    merged: dict[str, str] = {}
    if file is not None:
        merged.update(parse_config_file(file))
    merged.update(overrides or {})
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    # dataclass field types arrive as strings under postponed annotations
    named = {"int": int, "float": float, "str": str, "bool": bool}
    kwargs = {}
    for key, value in merged.items():
        if key not in types:
            raise ConfigError(f"unknown config key: {key}")
        t = types[key]
        kwargs[key] = _coerce(value, named[t] if isinstance(t, str) else t)
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def manifest_lines(cfg: RunConfig) -> list[str]:
    """Sorted key=value echo of the full effective config."""
    pairs = dataclasses.asdict(cfg)
    pairs["t_switch_effective"] = cfg.resolved_t_switch
    pairs["t_ref_effective"] = cfg.resolved_t_ref
    return [f"{key}={pairs[key]!r}" if isinstance(pairs[key], str) else f"{key}={pairs[key]}"
            for key in sorted(pairs)]


# ---------------------------------------------------------------------------
# Consistency metrics


def _contributions(partials: list[PartialTexture]) -> tuple[np.ndarray, np.ndarray]:
    """Stack view values (V, H, W, C) and contribution masks (V, H, W).

    A view contributes to a texel only where it actually scattered pixels
    into it (and the texel survived visibility masking); texels whose value
    arrived by Voronoi propagation are nearest-seed copies, not estimates,
    and would put a resolution-dependent floor under every statistic.
    """
    values = np.stack([p.values.data.astype(np.float64) for p in partials])
    valid = np.stack(
        [p.valid if p.prefill_valid is None else (p.valid & p.prefill_valid) for p in partials]
    )
    return values, valid


def texel_variance_map(partials: list[PartialTexture]) -> np.ndarray:
    """Per-texel std across contributing views, averaged over channels.

    Texels visible to fewer than two views report 0. Population std
    (ddof=0), computed in float64 in fixed view order.
    """
    values, valid = _contributions(partials)
    count = valid.sum(axis=0)
    seen = np.maximum(count, 1)[..., None]
    w = valid[..., None].astype(np.float64)
    mean = (values * w).sum(axis=0) / seen
    var = ((values - mean) ** 2 * w).sum(axis=0) / seen
    std = np.sqrt(var).mean(axis=-1)
    std[count < 2] = 0.0
    return std


def disagreement_at(partials: list[PartialTexture]) -> float:
    """Mean cross-view std over texels at least two views contribute to."""
    values, valid = _contributions(partials)
    count = valid.sum(axis=0)
    sel = count >= 2
    if not sel.any():
        return 0.0
    std = texel_variance_map(partials)
    return float(std[sel].mean())


def disagreement_curve(snapshots: list[list[PartialTexture]]) -> list[float]:
    """D(t) for a recorded sequence of per-view contribution snapshots."""
    return [disagreement_at(s) for s in snapshots]


def seam_energy(texture: LatentGrid | np.ndarray, ownership: np.ndarray) -> float | None:
    """Cross-owner gradient energy normalized by interior gradient energy.

    Adjacent texel pairs (right and down neighbors) where both texels are
    owned: pairs with different owners are seams, pairs with the same owner
    are interior. Returns mean |difference| ratio seam/interior; 1.0 means
    seams are indistinguishable from texture interior. None when no seam
    pairs exist; a featureless texture (0/0) reports 1.0 by convention.
    """
    data = texture.data if isinstance(texture, LatentGrid) else texture
    data = data.astype(np.float64)
    diffs = []
    owners_equal = []
    for axis in (0, 1):
        a = data[:-1, :] if axis == 0 else data[:, :-1]
        b = data[1:, :] if axis == 0 else data[:, 1:]
        oa = ownership[:-1, :] if axis == 0 else ownership[:, :-1]
        ob = ownership[1:, :] if axis == 0 else ownership[:, 1:]
        both = (oa >= 0) & (ob >= 0)
        diffs.append(np.abs(a - b).mean(axis=-1)[both])
        owners_equal.append((oa == ob)[both])
    diff = np.concatenate(diffs)
    same = np.concatenate(owners_equal)
    if not (~same).any():
        return None
    cross = float(diff[~same].mean())
    interior = float(diff[same].mean()) if same.any() else 0.0
    if cross == 0.0 and interior == 0.0:
        return 1.0
    return cross / max(interior, 1e-12)


# ---------------------------------------------------------------------------
# Report assembly


@dataclass
class StepRecord:
    """One denoising step's metrics, in trajectory order."""

    t: int
    phase: str  # texture-sync | screen-space-final
    alpha: float
    disagreement: float
    clamped_pixels: int = 0
    snapshot: LatentGrid | None = None


@dataclass
class ConsistencyReport:
    """Per-run consistency metrics plus (non-deterministic) runtime stats."""

    steps: list[StepRecord] = field(default_factory=list)
    seam: float | None = None
    variance_map: np.ndarray | None = None
    clamped_pixels: int = 0
    runtime_seconds: dict[str, float] = field(default_factory=dict)

    @property
    def final_disagreement(self) -> float:
        return self.steps[-1].disagreement if self.steps else 0.0

    def validate(self) -> None:
        for rec in self.steps:
            if not np.isfinite(rec.disagreement):
                raise ValueError(f"non-finite disagreement at t={rec.t}")
        if self.seam is not None and not np.isfinite(self.seam):
            raise ValueError("non-finite seam energy")

    def summary_lines(self, cfg: RunConfig) -> list[str]:
        """Deterministic report body (no timings)."""
        seam = "n/a" if self.seam is None else repr(self.seam)
        lines = [
            f"mode={cfg.mode}",
            f"predictor={cfg.predictor}",
            f"seed={cfg.seed}",
            f"steps={cfg.steps}",
            f"views={cfg.num_views}",
            f"disagreement_initial={self.steps[0].disagreement!r}" if self.steps else "disagreement_initial=n/a",
            f"disagreement_final={self.final_disagreement!r}",
            f"seam_energy={seam}",
            f"clamped_pixels={self.clamped_pixels}",
        ]
        return lines

    def csv_lines(self) -> list[str]:
        rows = ["t,phase,alpha,disagreement"]
        for rec in self.steps:
            rows.append(f"{rec.t},{rec.phase},{rec.alpha!r},{rec.disagreement!r}")
        return rows


def write_report(report: ConsistencyReport, cfg: RunConfig, out_dir: str | Path) -> None:
    """report.txt + report.csv (deterministic) and timings.txt (not)."""
    out = Path(out_dir)
    (out / "report.txt").write_text("\n".join(report.summary_lines(cfg)) + "\n", encoding="utf-8")
    (out / "report.csv").write_text("\n".join(report.csv_lines()) + "\n", encoding="utf-8")
    timing_lines = [f"{key}={value:.3f}" for key, value in sorted(report.runtime_seconds.items())]
    (out / "timings.txt").write_text("\n".join(timing_lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_disagreement(reports: dict[str, ConsistencyReport], path: str | Path) -> None:
    """D(t) curves, one line per labeled report, t decreasing rightward."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, report in reports.items():
        ts = [rec.t for rec in report.steps]
        ds = [rec.disagreement for rec in report.steps]
        ax.plot(ts, ds, marker=".", label=label)
    ax.invert_xaxis()
    ax.set_xlabel("timestep t (denoising right)")
    ax.set_ylabel("cross-view disagreement D(t)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(str(path), dpi=110)
    plt.close(fig)


def plot_variance_map(variance: np.ndarray, path: str | Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    im = ax.imshow(variance, cmap="magma")
    ax.set_title("per-texel cross-view std")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(str(path), dpi=110)
    plt.close(fig)


def plot_gap_bars(gaps_on: list[float], gaps_off: list[float], path: str | Path) -> None:
    """Per-seed front/back gap, attention reuse on vs off, side by side."""
    plt = _pyplot()
    seeds = np.arange(len(gaps_on))
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.bar(seeds - 0.18, gaps_on, width=0.36, label="attention reuse on")
    ax.bar(seeds + 0.18, gaps_off, width=0.36, label="attention reuse off")
    ax.set_xlabel("seed")
    ax.set_ylabel("front/back mean gap")
    ax.set_xticks(seeds)
    ax.legend()
    fig.tight_layout()
    fig.savefig(str(path), dpi=110)
    plt.close(fig)


def plot_snapshot_grid(snapshots: list[tuple[int, LatentGrid]], path: str | Path) -> None:
    """Clean-texture estimates over time, RGB-mapped, on one figure."""
    from .uv_transport import to_uint8_rgb

    if not snapshots:
        return
    plt = _pyplot()
    cols = min(len(snapshots), 5)
    rows = int(np.ceil(len(snapshots) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.6 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (t, grid) in zip(axes.ravel(), snapshots):
        ax.imshow(to_uint8_rgb(grid))
        ax.set_title(f"t={t}", fontsize=9)
    fig.tight_layout()
    fig.savefig(str(path), dpi=110)
    plt.close(fig)
