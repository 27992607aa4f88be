"""The optimization core: sign-PGD under an L-infinity budget over
instruction-augmented feature-matching losses.

Loss modes:

* ``instructta`` — squared feature distance between the adversarial
  image and the target image under randomly paired instructions, minus
  a weighted image/text alignment term (the dual objective).
* ``womf`` — the feature distance alone (alignment term recorded in the
  trace but excluded from the total).
* ``womfg`` — the feature distance under the single inferred
  instruction, no paraphrase augmentation at all.
* ``mfit`` — maximize the aligned image/text similarity alone.
* ``mfii`` — maximize aligned image/image similarity to the target image.
* ``mftt`` — query-based analog: estimate the gradient of the victim's
  response similarity with random-direction probes (no internal access).

Every mode shares the same projection: step, clamp into the epsilon
ball around the benign image, clamp into [0, 1]. Budgets are expressed
in 1/255 units of the [0, 1] pixel domain, so epsilon = 8 means 8/255.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .encoders import AlignPair, SurrogateModel
from .errors import ConfigError, ContractError, NonFiniteError
from .imaging import Gallery, Image, synthesize_target
from .instructions import InstructionSet, sample_pair_indices
from .rng import SplitMix64, derive_seed

LOSS_MODES = ("instructta", "womf", "womfg", "mfit", "mfii", "mftt")
BASELINE_KINDS = ("mfit", "mfii", "mftt")
ABLATION_KINDS = ("womf", "womfg")

CONSTRAINT_SLACK = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    """Everything that determines one attack run.

    ``epsilon`` and ``eta`` are in 1/255 units of the [0, 1] pixel
    domain (epsilon = 8 means an 8/255 budget).
    """

    epsilon: float = 8.0
    eta: float = 1.0
    iterations: int = 100
    n_instructions: int = 10
    seed: int = 0
    loss_mode: str = "instructta"
    mf_weight: float = 1.0
    record_trace: bool = True
    pair_samples: int = 1
    mftt_queries: int = 8
    mftt_sigma: float = 2.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.iterations > 0 and self.eta <= 0:
            raise ConfigError(f"eta must be > 0 when iterations > 0, got {self.eta}")
        if self.n_instructions < 1:
            raise ConfigError(f"n_instructions must be >= 1, got {self.n_instructions}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        if self.pair_samples < 1:
            raise ConfigError(f"pair_samples must be >= 1, got {self.pair_samples}")
        if self.mftt_queries < 1:
            raise ConfigError(f"mftt_queries must be >= 1, got {self.mftt_queries}")

    @property
    def epsilon_pixels(self) -> float:
        return self.epsilon / 255.0

    @property
    def eta_pixels(self) -> float:
        return self.eta / 255.0


@dataclass(frozen=True)
class LossBreakdown:
    """One iteration's loss values; ``total == j_ins - mf_weight * j_mf``
    holds bit-for-bit with the weight that was actually applied."""

    j_ins: float
    j_mf: float
    mf_weight: float
    total: float
    pair: Optional[tuple[int, int]] = None

    def __post_init__(self):
        expected = self.j_ins - self.mf_weight * self.j_mf
        if self.total != expected and not (
                math.isnan(self.total) and math.isnan(expected)):
            raise ContractError(
                f"loss breakdown inconsistent: total {self.total!r} != "
                f"j_ins - w*j_mf = {expected!r}")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    loss: LossBreakdown
    linf: float


@dataclass(frozen=True)
class AttackResult:
    adversarial: Image
    trace: tuple[TraceRecord, ...]
    config: AttackConfig
    elapsed_seconds: float  # wall time; excluded from determinism contracts


@dataclass
class AttackDeps:
    """Shared immutable dependencies for attack runs."""

    surrogate: SurrogateModel
    align: AlignPair
    gallery: Gallery
    provider: object  # Offline or Remote instruction provider
    victim: object = None  # required by mftt only (duck-typed respond())


def pgd_step(x_adv: Image, grad: T.Tensor, x: Image, cfg: AttackConfig) -> Image:
    """One projected sign step: descend, clamp to the epsilon ball
    around ``x``, then clamp to [0, 1]."""
    if x_adv.pixels.shape != x.pixels.shape or grad.shape != x.pixels.shape:
        raise ContractError("pgd_step shapes disagree")
    stepped = _pgd_step_array(x_adv.pixels, grad.data, x.pixels, cfg)
    return Image(stepped)


def _pgd_step_array(x_adv: np.ndarray, grad: np.ndarray, x: np.ndarray,
                    cfg: AttackConfig) -> np.ndarray:
    eps = cfg.epsilon_pixels
    stepped = x_adv - cfg.eta_pixels * np.sign(grad)
    clamped = np.clip(stepped, x - eps, x + eps)
    return np.clip(clamped, 0.0, 1.0)


def _check_constraints(x_adv: np.ndarray, x: np.ndarray, cfg: AttackConfig,
                       iteration: int) -> float:
    linf = float(np.max(np.abs(x_adv - x))) if x_adv.size else 0.0
    if T.debug_checks_enabled():
        if linf > cfg.epsilon_pixels + CONSTRAINT_SLACK:
            raise ContractError(
                f"epsilon ball violated at iteration {iteration}: "
                f"{linf} > {cfg.epsilon_pixels}")
        if x_adv.min() < 0.0 or x_adv.max() > 1.0:
            raise ContractError(f"pixel range violated at iteration {iteration}")
    return linf


def _require_finite(value: float, breakdown_hint: str, iteration: int,
                    trace: list) -> None:
    if not math.isfinite(value):
        err = NonFiniteError(
            f"non-finite loss ({breakdown_hint}) at iteration {iteration}; "
            f"{len(trace)} prior iterations recorded")
        err.trace = tuple(trace)
        raise err


def build_instruction_set(provider, target_text: str, cfg: AttackConfig) -> InstructionSet:
    """Infer the seed instruction and, unless the mode forbids it,
    augment it to ``n`` paraphrases. ``womfg`` never calls rephrase."""
    seed_instruction = provider.infer_instruction(target_text)
    if cfg.loss_mode == "womfg":
        return InstructionSet((seed_instruction,), provenance="offline")
    return provider.rephrase_instructions(seed_instruction, cfg.n_instructions)


def run_attack(x: Image, target_text: str, deps: AttackDeps,
               cfg: AttackConfig) -> AttackResult:
    """Dispatch one attack run according to ``cfg.loss_mode``."""
    start = time.perf_counter()
    if cfg.loss_mode in ("instructta", "womf", "womfg"):
        adv, trace = _run_feature_attack(x, target_text, deps, cfg)
    elif cfg.loss_mode in ("mfit", "mfii"):
        adv, trace = _run_align_attack(x, target_text, deps, cfg)
    elif cfg.loss_mode == "mftt":
        adv, trace = _run_query_attack(x, target_text, deps, cfg)
    else:  # pragma: no cover - guarded by AttackConfig
        raise ConfigError(f"unknown loss_mode {cfg.loss_mode!r}")
    if not cfg.record_trace:
        trace = []
    return AttackResult(adversarial=adv, trace=tuple(trace), config=cfg,
                        elapsed_seconds=time.perf_counter() - start)


def run_instructta(x: Image, target_text: str, deps: AttackDeps,
                   cfg: AttackConfig) -> AttackResult:
    """The full pipeline: target image synthesis, instruction inference
    and augmentation, then iterated sign-PGD on the dual loss."""
    return run_attack(x, target_text, deps, replace(cfg, loss_mode="instructta"))

def run_baseline(kind: str, x: Image, target_text: str, deps: AttackDeps,
                 cfg: AttackConfig) -> AttackResult:
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline {kind!r}")
    return run_attack(x, target_text, deps, replace(cfg, loss_mode=kind))


def run_ablation(kind: str, x: Image, target_text: str, deps: AttackDeps,
                 cfg: AttackConfig) -> AttackResult:
    if kind not in ABLATION_KINDS:
        raise ConfigError(f"unknown ablation {kind!r}")
    return run_attack(x, target_text, deps, replace(cfg, loss_mode=kind))


def run_noise_control(x: Image, cfg: AttackConfig) -> AttackResult:
    """Uniform noise at the same budget; the random-perturbation control."""
    start = time.perf_counter()
    rng = SplitMix64(derive_seed(cfg.seed, 0xC0))
    eps = cfg.epsilon_pixels
    noise = rng.uniform(x.pixels.shape, -eps, eps)
    adv = np.clip(x.pixels + noise, 0.0, 1.0)
    return AttackResult(adversarial=Image(adv), trace=(), config=cfg,
                        elapsed_seconds=time.perf_counter() - start)


# -- mode bodies -----------------------------------------------------------------


def _run_feature_attack(x: Image, target_text: str, deps: AttackDeps,
                        cfg: AttackConfig):
    m = deps.surrogate
    rng = SplitMix64(cfg.seed)
    target_image = synthesize_target(deps.gallery, target_text)
    q_set = build_instruction_set(deps.provider, target_text, cfg)

    target_tensor = target_image.to_tensor()
    target_feats = [m.features(target_tensor, p) for p in q_set.instructions]
    yt_embedding = deps.align.text_embedding(target_text)

    use_mf = cfg.loss_mode == "instructta"
    weight = cfg.mf_weight if use_mf else 0.0
    x_base = x.pixels
    x_adv = x_base
    trace: list[TraceRecord] = []
    for it in range(1, cfg.iterations + 1):
        x_tensor = T.Tensor(x_adv, requires_grad=True)
        pairs = [sample_pair_indices(q_set, rng) for _ in range(cfg.pair_samples)]
        terms = [T.l2_dist_sq(m.features(x_tensor, q_set[i]), target_feats[j])
                 for i, j in pairs]
        j_ins_t = terms[0] if len(terms) == 1 else \
            T.scale(sum(terms[1:], start=terms[0]), 1.0 / len(terms))
        j_mf_t = T.dot(deps.align.image_embedding(x_tensor), yt_embedding)
        total_t = T.sub(j_ins_t, T.scale(j_mf_t, weight)) if use_mf else j_ins_t

        j_ins = j_ins_t.item()
        j_mf = j_mf_t.item()
        total = j_ins - weight * j_mf
        _require_finite(total, f"j_ins={j_ins!r} j_mf={j_mf!r}", it, trace)

        grad = T.backward(total_t, leaves=[x_tensor])[x_tensor]
        x_adv = _pgd_step_array(x_adv, grad.data, x_base, cfg)
        linf = _check_constraints(x_adv, x_base, cfg, it)
        trace.append(TraceRecord(it, LossBreakdown(
            j_ins=j_ins, j_mf=j_mf, mf_weight=weight, total=total,
            pair=pairs[0]), linf))
    return Image(x_adv), trace


def _run_align_attack(x: Image, target_text: str, deps: AttackDeps,
                      cfg: AttackConfig):
    align = deps.align
    if cfg.loss_mode == "mfii":
        target_image = synthesize_target(deps.gallery, target_text)
        target_emb = align.image_embedding(target_image.to_tensor())
    else:
        target_emb = align.text_embedding(target_text)

    x_base = x.pixels
    x_adv = x_base
    trace: list[TraceRecord] = []
    for it in range(1, cfg.iterations + 1):
        x_tensor = T.Tensor(x_adv, requires_grad=True)
        similarity = T.dot(align.image_embedding(x_tensor), target_emb)
        total_t = T.scale(similarity, -1.0)

        j_mf = similarity.item()
        total = 0.0 - 1.0 * j_mf
        _require_finite(total, f"j_mf={j_mf!r}", it, trace)

        grad = T.backward(total_t, leaves=[x_tensor])[x_tensor]
        x_adv = _pgd_step_array(x_adv, grad.data, x_base, cfg)
        linf = _check_constraints(x_adv, x_base, cfg, it)
        trace.append(TraceRecord(it, LossBreakdown(
            j_ins=0.0, j_mf=j_mf, mf_weight=1.0, total=total), linf))
    return Image(x_adv), trace


def _run_query_attack(x: Image, target_text: str, deps: AttackDeps,
                      cfg: AttackConfig):
    """Random-gradient-free analog of the query-only baseline: probe the
    victim's text response around the iterate and ascend the estimated
    similarity gradient. Touches only the victim's public respond()."""
    if deps.victim is None:
        raise ConfigError("the query-based baseline needs a victim handle")
    victim = deps.victim
    align = deps.align
    rng = SplitMix64(cfg.seed)
    query_instruction = deps.provider.infer_instruction(target_text)
    yt_emb = align.text_embedding(target_text).data

    response_cache: dict[str, np.ndarray] = {}

    def similarity(pixels: np.ndarray) -> float:
        reply = victim.respond(Image(pixels), query_instruction)
        emb = response_cache.get(reply)
        if emb is None:
            emb = align.text_embedding(reply).data
            response_cache[reply] = emb
        return float(emb @ yt_emb)

    sigma = cfg.mftt_sigma / 255.0
    x_base = x.pixels
    x_adv = x_base
    trace: list[TraceRecord] = []
    for it in range(1, cfg.iterations + 1):
        base_val = similarity(x_adv)
        _require_finite(base_val, f"similarity={base_val!r}", it, trace)
        estimate = np.zeros_like(x_base)
        for _ in range(cfg.mftt_queries):
            direction = rng.normal(x_base.shape)
            direction /= np.linalg.norm(direction.reshape(-1))
            probe = np.clip(x_adv + sigma * direction, 0.0, 1.0)
            estimate += ((similarity(probe) - base_val) / sigma) * direction
        estimate /= cfg.mftt_queries
        # descend on -similarity == ascend on similarity
        x_adv = _pgd_step_array(x_adv, -estimate, x_base, cfg)
        linf = _check_constraints(x_adv, x_base, cfg, it)
        trace.append(TraceRecord(it, LossBreakdown(
            j_ins=0.0, j_mf=base_val, mf_weight=1.0, total=0.0 - 1.0 * base_val),
            linf))
    return Image(x_adv), trace


def estimate_gradient_rgf(objective, point: np.ndarray, queries: int,
                          sigma: float, rng: SplitMix64) -> np.ndarray:
    """Plain random-gradient-free estimator of ``d objective / d point``.

    Exposed for validating the estimator against analytic gradients on
    smooth toy objectives; the query attack uses the same scheme.
    """
    base = float(objective(point))
    estimate = np.zeros_like(point, dtype=np.float64)
    for _ in range(queries):
        direction = rng.normal(point.shape)
        direction /= np.linalg.norm(direction.reshape(-1))
        estimate += ((float(objective(point + sigma * direction)) - base)
                     / sigma) * direction
    return estimate / queries


# -- trace export ------------------------------------------------------------------

def write_trace_jsonl(result: AttackResult, path) -> None:
    """One JSON object per iteration: {iter, j_ins, j_mf, total, linf}."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for rec in result.trace:
            fh.write(json.dumps({
                "iter": rec.iteration,
                "j_ins": rec.loss.j_ins,
                "j_mf": rec.loss.j_mf,
                "total": rec.loss.total,
                "linf": rec.linf,
            }))
            fh.write("\n")
