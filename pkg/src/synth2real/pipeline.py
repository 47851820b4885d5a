"""Four-stage latent search: sample, convex-set refinement, fit + interpolation, SSIM selection.

Every random draw comes from a stream keyed on ``(seed, restart, stage, ...)``
so a restart's result depends only on its key, never on scheduling.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import imageops
from .generator import GeneratorSpec, SteeringBasis, decode, decode_batched
from .losses import LossWeights, csanns_loss, fit_loss, sampling_losses
from .perception import FeatureExtractor, default_extractor

log = logging.getLogger(__name__)

STAGE_SAMPLE, STAGE_CSANNS, STAGE_FIT = 1, 2, 3


class PipelineAbort(RuntimeError):
    """Raised when no restart produced a usable result."""


def _stream(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# --- configuration ---------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingConfig:
    n_samples: int = 64
    sigma2: float = 0.25
    control_bound: float = 2.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")


@dataclass(frozen=True)
class CsannsConfig:
    outer_iters: int = 12
    proposals: int = 64
    inner_iters: int = 20
    lr: float = 0.01
    lr_divisor: float = 10.0
    lr_every: int = 4
    beta_clamp: float = 2.0
    blend_range: tuple = (0.25, 0.75)
    brightness: bool = True
    brightness_range: tuple = (0.7, 1.3)
    sigma2: float = 0.25
    anchor_margin: float = 12.0
    # per-group overrides of ``lr``; None means use ``lr``.  The defaults let
    # the anchored mixture weights actually move within the decaying schedule.
    alpha_lr: float | None = 4.0
    beta_lr: float | None = 0.05
    brightness_lr: float | None = None

    def __post_init__(self):
        if min(self.outer_iters, self.proposals, self.inner_iters, self.lr_every) < 1:
            raise ValueError("iteration and proposal counts must be >= 1")
        lo, hi = self.blend_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("blend_range must be ordered within [0, 1]")
        lo, hi = self.brightness_range
        if not 0.0 < lo <= 1.0 <= hi:
            raise ValueError("brightness_range must be ordered and contain 1")
        if self.beta_clamp < 0:
            raise ValueError("beta_clamp must be non-negative")
        object.__setattr__(self, "blend_range", tuple(self.blend_range))
        object.__setattr__(self, "brightness_range", tuple(self.brightness_range))

    def rate(self, group: str, inner: int) -> float:
        """Learning rate of ``group`` at inner step ``inner`` (step-wise decay)."""
        base = {"alpha": self.alpha_lr, "beta": self.beta_lr, "brightness": self.brightness_lr}[group]
        base = self.lr if base is None else base
        return base / self.lr_divisor ** (inner // self.lr_every)


@dataclass(frozen=True)
class FitConfig:
    steps: int = 1000
    lr: float = 0.01
    noise: float = 0.01
    noise_ramp: float = 0.5
    lr_rampup: float = 0.05
    lr_rampdown: float = 0.25

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def rate(self, step: int) -> float:
        t = step / self.steps
        ramp = min(1.0, (1.0 - t) / self.lr_rampdown)
        ramp = 0.5 - 0.5 * math.cos(ramp * math.pi)
        ramp *= min(1.0, t / self.lr_rampup) if self.lr_rampup > 0 else 1.0
        return self.lr * ramp

    def noise_std(self, step: int) -> float:
        t = step / self.steps
        return self.noise * max(0.0, 1.0 - t / self.noise_ramp)


DEFAULT_WEIGHTS = (1.0, 0.9, 0.8, 0.7)


@dataclass(frozen=True)
class InterpolationSchedule:
    """``(k, a)`` pairs: retain the first ``k`` rows of the fit with weight ``a``."""

    entries: tuple

    def __post_init__(self):
        entries = tuple((int(k), float(a)) for k, a in self.entries)
        for k, a in entries:
            if k < 1:
                raise ValueError("layer count k must be >= 1")
            if not 0.0 < a <= 1.0:
                raise ValueError(f"weight a={a} outside (0, 1]")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def grid(cls, ks, weights=DEFAULT_WEIGHTS) -> "InterpolationSchedule":
        return cls(tuple((k, a) for k in ks for a in weights))

    @classmethod
    def for_layers(cls, n_layers: int, weights=DEFAULT_WEIGHTS) -> "InterpolationSchedule":
        """Row counts spread from one row to all of them: ``{1, L/3, 2L/3, L}``."""
        ks = sorted({1, max(1, n_layers // 3), max(1, 2 * n_layers // 3), n_layers})
        return cls.grid(ks, weights)


@dataclass(frozen=True)
class SelectionConfig:
    resolution: int | None = None


@dataclass(frozen=True)
class PipelineConfig:
    sampling: SamplingConfig = SamplingConfig()
    csanns: CsannsConfig = CsannsConfig()
    fit: FitConfig = FitConfig()
    # None derives the schedule from the generator's layer count
    interpolation: InterpolationSchedule | None = None
    selection: SelectionConfig = SelectionConfig()
    weights: LossWeights = LossWeights()
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def schedule(self, n_layers: int) -> InterpolationSchedule:
        if self.interpolation is None:
            return InterpolationSchedule.for_layers(n_layers)
        return self.interpolation

    def with_overrides(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)


# --- results ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class Proposal:
    """A latent code plus the global brightness it is displayed with."""

    code: np.ndarray
    brightness: float = 1.0
    label: str = ""
    restart: int = 0


@dataclass
class Trace:
    """Per-evaluation losses and their running minimum."""

    loss: list = field(default_factory=list)
    best: list = field(default_factory=list)

    def push(self, value: float) -> bool:
        """Record ``value``; True if it improves on everything before it."""
        improved = not self.best or value < self.best[-1]
        self.loss.append(float(value))
        self.best.append(float(value) if improved else self.best[-1])
        return improved

    def as_arrays(self) -> dict:
        return {"loss": np.array(self.loss), "best": np.array(self.best)}


@dataclass
class RestartResult:
    restart: int
    w_s: Proposal
    w_n: Proposal
    w_f: Proposal
    candidates: list
    traces: dict
    losses: dict

    @property
    def proposals(self) -> list[Proposal]:
        """Step-4 inputs from this restart: ``w_s``, ``w_n``, then interpolation candidates."""
        return [self.w_s, self.w_n, *self.candidates]


@dataclass
class PipelineResult:
    restarts: list
    proposals: list
    ssim: np.ndarray
    selected: int
    aborted: list = field(default_factory=list)

    @property
    def selected_proposal(self) -> Proposal:
        return self.proposals[self.selected]

    @property
    def selected_ssim(self) -> float:
        return float(self.ssim[self.selected])


# --- helpers -------------------------------------------------------------------------------

def render_proposal(spec: GeneratorSpec, p: Proposal) -> np.ndarray:
    return np.clip(decode(spec, p.code) * p.brightness, 0.0, 1.0)


def _check_basis(basis: SteeringBasis, spec: GeneratorSpec) -> None:
    if basis is None or len(basis.centroids) == 0:
        raise ValueError("steering basis has no centroids")
    if tuple(basis.latent_shape) != spec.latent_shape:
        raise ValueError(f"basis latent shape {basis.latent_shape} != generator {spec.latent_shape}")


def draw_samples(basis: SteeringBasis, cfg: SamplingConfig, key: tuple) -> np.ndarray:
    """Centroid + Gaussian noise + uniformly scaled controls, one stream per sample.

    The Gaussian term is a single ``D``-vector added to every row.
    """
    controls = basis.controls
    L, D = basis.latent_shape
    sigma = math.sqrt(cfg.sigma2)
    out = np.empty((cfg.n_samples, L, D))
    for i in range(cfg.n_samples):
        rng = _stream(*key, i)
        c = int(rng.integers(len(basis.centroids)))
        # one w-space draw shared by every row, like the prior's own codes
        w = basis.centroids[c] + sigma * rng.standard_normal(D)
        if len(controls):
            u = rng.uniform(-1.0, 1.0, len(controls))
            w = w + cfg.control_bound * np.tensordot(u, controls, axes=1)
        out[i] = w
    return out


def draw_proposals(basis: SteeringBasis, w_n: np.ndarray, cfg: CsannsConfig, key: tuple) -> np.ndarray:
    """Centroid + noise proposals, each pre-blended with the current code."""
    L, D = basis.latent_shape
    sigma = math.sqrt(cfg.sigma2)
    lo, hi = cfg.blend_range
    out = np.empty((cfg.proposals, L, D))
    for i in range(cfg.proposals):
        rng = _stream(*key, i)
        c = int(rng.integers(len(basis.centroids)))
        w_p = basis.centroids[c] + sigma * rng.standard_normal(D)
        t = rng.uniform(lo, hi)
        out[i] = t * w_p + (1.0 - t) * w_n
    return out


# --- step 1 --------------------------------------------------------------------------------

def step1_sample(spec: GeneratorSpec, target: imageops.MaskSet, basis: SteeringBasis,
                 cfg: SamplingConfig, weights: LossWeights, key: tuple = (0, 0),
                 extractor: FeatureExtractor | None = None, chunk: int = 64):
    """Best of ``n_samples`` steered prior draws under the sampling loss.

    Returns ``(code, loss, trace)``.
    """
    _check_basis(basis, spec)
    codes = draw_samples(basis, cfg, (*key, STAGE_SAMPLE))
    losses = np.empty(len(codes))
    for i in range(0, len(codes), chunk):
        imgs = decode(spec, codes[i:i + chunk])
        losses[i:i + chunk] = sampling_losses(target.render, target.face_alpha, imgs, weights, extractor)
    if not np.isfinite(losses).all():
        raise ad.NonFiniteError("non-finite sampling loss")
    trace = Trace()
    for v in losses:
        trace.push(v)
    best = int(np.argmin(losses))
    return codes[best], float(losses[best]), trace


# --- step 2 --------------------------------------------------------------------------------

def mixture_code(logits, candidates, beta, controls, beta_clamp: float):
    """Per-layer softmax mixture of candidates plus clamped control offsets.

    ``logits`` is ``(P + 1, L)``, ``candidates`` ``(P + 1, L, D)``, ``beta``
    ``(C,)`` and ``controls`` ``(C, L, D)``.  Returns ``(code, weights)``.
    """
    alpha = ad.softmax(logits, axis=0)
    code = ad.einsum("jl,jld->ld", alpha, candidates)
    if controls.shape[0]:
        b = ad.clamp(beta, -beta_clamp, beta_clamp)
        code = ad.add(code, ad.einsum("c,cld->ld", b, controls))
    return code, alpha


def anchor_logits(n_candidates: int, n_layers: int, margin: float) -> np.ndarray:
    """Logits that put all but ``exp(-margin)`` of each layer's mass on column 0."""
    logits = np.zeros((n_candidates, n_layers))
    if n_candidates > 1:
        logits[0] = margin + math.log(n_candidates - 1)
    return logits


def step2_csanns(spec: GeneratorSpec, target: imageops.MaskSet, w_init: Proposal | np.ndarray,
                 basis: SteeringBasis, cfg: CsannsConfig, weights: LossWeights, key: tuple = (0, 0),
                 extractor: FeatureExtractor | None = None, monitor=None):
    """Convex-combination refinement of ``w_init``.

    ``monitor(alpha, beta, brightness)`` is called with the clamped values
    of every evaluation.  Returns ``(proposal, loss, trace)``.
    """
    _check_basis(basis, spec)
    ext = default_extractor() if extractor is None else extractor
    w_weights = weights.without_landmarks()
    if isinstance(w_init, Proposal):
        w_n, bright_n = np.array(w_init.code, dtype=np.float64), float(w_init.brightness)
    else:
        w_n, bright_n = np.array(w_init, dtype=np.float64), 1.0
    if not np.isfinite(w_n).all():
        raise ValueError("w_init must be finite")
    controls = basis.controls
    L = spec.n_layers
    b_lo, b_hi = cfg.brightness_range
    trace = Trace()

    def evaluate(tape, logits, cands, beta, bright):
        code, alpha = mixture_code(logits, cands, beta, controls, cfg.beta_clamp)
        img = decode(spec, code)
        if cfg.brightness:
            s = ad.clamp(bright, b_lo, b_hi)
            img = ad.mul(img, s)
        loss = csanns_loss(target.render, target.face_alpha, img, w_weights, ext)
        return loss, code, alpha

    best_loss = None
    for outer in range(cfg.outer_iters):
        props = draw_proposals(basis, w_n, cfg, (*key, STAGE_CSANNS, outer))
        cands = np.concatenate([w_n[None], props])
        values = [anchor_logits(len(cands), L, cfg.anchor_margin), np.zeros(len(controls)),
                  np.array(bright_n)]
        groups = ["alpha", "beta", "brightness"]
        states = [ad.AdamState(lr=cfg.rate(g, 0)) for g in groups]
        for inner in range(cfg.inner_iters):
            tape = ad.Tape()
            tv = [tape.variable(v) for v in values]
            loss, code, alpha = evaluate(tape, tv[0], cands, tv[1], tv[2])
            value = loss.item()
            if not math.isfinite(value):
                raise ad.NonFiniteError("non-finite refinement loss")
            bright = float(np.clip(values[2], b_lo, b_hi)) if cfg.brightness else 1.0
            if monitor is not None:
                monitor(alpha.data, np.clip(values[1], -cfg.beta_clamp, cfg.beta_clamp), bright)
            if trace.push(value):
                best_loss = value
                best_code, best_bright = code.data.copy(), bright
            grads = tape.backward(loss)
            active = [True, len(controls) > 0, cfg.brightness]
            for g_idx, (name, on) in enumerate(zip(groups, active)):
                if not on:
                    continue
                values[g_idx] = ad.adam_step(states[g_idx], [values[g_idx]], [grads[tv[g_idx]]],
                                             lr=cfg.rate(name, inner))[0]
        # the next outer iteration restarts from the best code found so far
        w_n, bright_n = best_code, best_bright
    return Proposal(best_code, best_bright, "w_n"), float(best_loss), trace


# --- step 3 --------------------------------------------------------------------------------

def step3_fit(spec: GeneratorSpec, target: imageops.MaskSet, w_init: Proposal | np.ndarray,
              cfg: FitConfig, key: tuple = (0, 0), extractor: FeatureExtractor | None = None):
    """Unconstrained Adam fit of every latent entry under the masked perceptual loss.

    The brightness of ``w_init`` is held fixed.  Returns ``(proposal, loss, trace)``;
    the returned code is the exact point whose loss was lowest, the clean
    starting code included.
    """
    ext = default_extractor() if extractor is None else extractor
    if isinstance(w_init, Proposal):
        w, bright = np.array(w_init.code, dtype=np.float64), float(w_init.brightness)
    else:
        w, bright = np.array(w_init, dtype=np.float64), 1.0
    rng = _stream(*key, STAGE_FIT)
    state = ad.AdamState(lr=cfg.lr)
    trace = Trace()

    def loss_at(code):
        tape = ad.Tape()
        v = tape.variable(code)
        img = ad.mul(decode(spec, v), bright)
        loss = fit_loss(target.render, target.face_alpha, img, ext)
        return tape, v, loss

    best_code = w.copy()
    best_loss = None
    for step in range(cfg.steps + 1):
        noise = np.zeros_like(w) if step == 0 else cfg.noise_std(step - 1) * rng.standard_normal(w.shape)
        point = w + noise
        tape, v, loss = loss_at(point)
        value = loss.item()
        if not math.isfinite(value):
            raise ad.NonFiniteError("non-finite fit loss")
        if trace.push(value):
            best_loss, best_code = value, point.copy()
        if step == cfg.steps:
            break
        g = tape.backward(loss)[v]
        w = ad.adam_step(state, [w], [g], lr=cfg.rate(step))[0]
    return Proposal(best_code, bright, "w_f"), float(best_loss), trace


def step3_interpolate(w_f: np.ndarray, w_n: np.ndarray, schedule: InterpolationSchedule) -> list[np.ndarray]:
    """``w_f * sqrt(alpha) + w_n * sqrt(1 - alpha)`` with alpha = a on rows < k, else 0."""
    w_f = np.asarray(w_f, dtype=np.float64)
    w_n = np.asarray(w_n, dtype=np.float64)
    if w_f.shape != w_n.shape:
        raise ValueError(f"shape mismatch {w_f.shape} vs {w_n.shape}")
    L = w_f.shape[0]
    out = []
    for k, a in schedule.entries:
        if k > L:
            raise ValueError(f"k={k} exceeds layer count {L}")
        alpha = np.zeros(L)
        alpha[:k] = a
        out.append(blend_rows(w_f, w_n, alpha))
    return out


def blend_rows(w_f: np.ndarray, w_n: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    out = np.empty_like(w_f)
    for row, a in enumerate(alpha):
        if a == 1.0:
            out[row] = w_f[row]
        elif a == 0.0:
            out[row] = w_n[row]
        else:
            out[row] = w_f[row] * math.sqrt(a) + w_n[row] * math.sqrt(1.0 - a)
    return out


# --- step 4 --------------------------------------------------------------------------------

def _selection_image(img: np.ndarray, resolution: int | None) -> np.ndarray:
    if resolution is None or img.shape[0] == resolution:
        return img
    return imageops.resize_area(img, (resolution, resolution))


def proposal_ssim(spec: GeneratorSpec, target_image: np.ndarray, proposals: list[Proposal],
                  resolution: int | None = None) -> np.ndarray:
    ref = _selection_image(np.asarray(target_image), resolution)
    scores = np.empty(len(proposals))
    codes = np.stack([p.code for p in proposals])
    imgs = decode_batched(spec, codes)
    for i, (p, img) in enumerate(zip(proposals, imgs)):
        shown = np.clip(img * p.brightness, 0.0, 1.0)
        scores[i] = imageops.ssim(_selection_image(shown, resolution), ref)
    return scores


def step4_select(spec: GeneratorSpec, target_image: np.ndarray, proposals: list[Proposal],
                 cfg: SelectionConfig = SelectionConfig()) -> tuple[int, np.ndarray]:
    """Index of the proposal with the highest SSIM (first on ties) and all scores."""
    if not proposals:
        raise ValueError("no proposals to select from")
    scores = proposal_ssim(spec, target_image, proposals, cfg.resolution)
    return int(np.argmax(scores)), scores


# --- orchestration ---------------------------------------------------------------------------

def run_restart(spec: GeneratorSpec, target: imageops.MaskSet, basis: SteeringBasis,
                config: PipelineConfig, restart: int,
                extractor: FeatureExtractor | None = None) -> RestartResult:
    """Steps 1 to 3 for one restart."""
    key = (config.seed, restart)
    with threadpool_limits(limits=1):
        w_s, l_s, t_s = step1_sample(spec, target, basis, config.sampling, config.weights, key, extractor)
        w_n, l_n, t_n = step2_csanns(spec, target, w_s, basis, config.csanns, config.weights, key,
                                     extractor)
        w_f, l_f, t_f = step3_fit(spec, target, w_n, config.fit, key, extractor)
        schedule = config.schedule(spec.n_layers)
        codes = step3_interpolate(w_f.code, w_n.code, schedule)
    cands = [Proposal(c, w_n.brightness, f"k={k},a={a:g}", restart)
             for c, (k, a) in zip(codes, schedule.entries)]
    log.info("restart %d: sample %.5f  csanns %.5f  fit %.5f", restart, l_s, l_n, l_f)
    return RestartResult(
        restart=restart,
        w_s=Proposal(w_s, 1.0, "w_s", restart),
        w_n=replace(w_n, restart=restart),
        w_f=replace(w_f, restart=restart),
        candidates=cands,
        traces={"step1": t_s.as_arrays(), "step2": t_n.as_arrays(), "step3": t_f.as_arrays()},
        losses={"step1": l_s, "step2": l_n, "step3": l_f},
    )


def _restart_job(args):
    spec, target, basis, config, restart = args
    try:
        return run_restart(spec, target, basis, config, restart)
    except ad.NonFiniteError as exc:
        return exc.__class__.__name__ + f": {exc}", restart


def run_pipeline(spec: GeneratorSpec, target: imageops.MaskSet, basis: SteeringBasis,
                 config: PipelineConfig = PipelineConfig(), workers: int = 1) -> PipelineResult:
    """All restarts of steps 1 to 3, then one SSIM selection over the pooled proposals."""
    jobs = [(spec, target, basis, config, r) for r in range(config.restarts)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            outcomes = list(pool.map(_restart_job, jobs))
    else:
        outcomes = [_restart_job(j) for j in jobs]
    done = [o for o in outcomes if isinstance(o, RestartResult)]
    aborted = [o for o in outcomes if not isinstance(o, RestartResult)]
    for msg, r in aborted:
        log.warning("restart %d aborted: %s", r, msg)
    if not done:
        raise PipelineAbort("all restarts aborted: " + "; ".join(m for m, _ in aborted))
    pool_props = [p for r in done for p in r.proposals]
    with threadpool_limits(limits=1):
        idx, scores = step4_select(spec, target.render, pool_props, config.selection)
    return PipelineResult(done, pool_props, scores, idx, aborted)


def composite_face_only(spec: GeneratorSpec, proposal: Proposal, masks: imageops.MaskSet,
                        levels: int = 5) -> np.ndarray:
    """Decoded face blended over the render's background, with the render's hair on top."""
    img = render_proposal(spec, proposal)
    if img.shape != masks.render.shape:
        raise ValueError(f"decoded image {img.shape} does not match render {masks.render.shape}")
    alpha = np.clip(masks.face_alpha - masks.hair_alpha, 0.0, 1.0)
    blended = imageops.laplacian_composite(img, masks.render, alpha, levels)
    # band-wise blending bleeds across the mask edge; hair occludes the face, so layer it last
    hair = masks.hair_alpha[..., None]
    return hair * masks.render + (1.0 - hair) * blended
