"""Toy victim model, similarity scoring, success judging, benchmarks,
parameter sweeps, the instruction audit, and perceptual reporting.

The victim is a retrieval model: it projects an (image, instruction)
pair to instruction-aware features, maps them through a fixed seeded
linear readout into text-embedding space, and answers with the caption
bank entry whose embedding is most similar. That gives a discrete,
deterministic, judgeable response without training a decoder.

Benchmark samples are constructed so targeted success is achievable:
a (target text, instruction) pair is kept only if the victim actually
describes the target text's retrieved gallery image with that text
(the toy stand-in for generating instruction-answer pairs with a
strong captioner), and the benign image's clean response must differ
from the target. The attack itself never sees the sampled instruction.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .attack import (AttackConfig, AttackDeps, AttackResult, run_attack,
                     run_noise_control)
from .encoders import (ProjectorArch, SurrogateModel, TextArch, TextEncoder,
                       VisionArch, init_params)
from .errors import ConfigError, ContractError, JudgeFormatError
from .imaging import Gallery, Image, resize
from .instructions import JUDGE_PROMPT
from .rng import SplitMix64, derive_seed

METHOD_LABELS = {
    "clean": "Clean image",
    "noise": "Random noise",
    "mftt": "MF-tt (RGF analog)",
    "mfit": "MF-it",
    "mfii": "MF-ii",
    "instructta": "InstructTA",
    "womf": "InstructTA-woMF",
    "womfg": "InstructTA-woMFG",
}
# fixed keys so per-sample seed derivation never depends on list order
_METHOD_KEYS = {name: k for k, name in enumerate(
    ("clean", "noise", "mftt", "mfit", "mfii", "instructta", "womf", "womfg"))}

ENSEMBLE_SIZE = 5


class ToyVictim:
    """Deterministic toy vision-language model (the attack target).

    The readout is differential: features of the input are taken
    relative to the features of a fixed mid-gray reference image under
    the same instruction, then mapped by a seeded linear readout into
    text-embedding space. Without the reference subtraction an untrained
    feature stack carries a large input-independent component that
    biases every response toward one bank entry.
    """

    def __init__(self, feature_model: SurrogateModel, readout_seed: int,
                 captions: list[str]):
        if not captions:
            raise ConfigError("victim caption bank may not be empty")
        if len(set(captions)) != len(captions):
            raise ConfigError("victim caption bank entries must be unique")
        self.features = feature_model
        self.readout_seed = readout_seed
        self.captions = list(captions)
        dim = feature_model.vision.arch.dim
        self.readout = init_params(
            readout_seed, {"readout": (feature_model.feature_len, dim)})["readout"]
        bank = []
        for caption in captions:
            emb = T.l2_normalize(feature_model.text.embed(caption)).data
            bank.append(emb)
        self._bank = np.stack(bank)
        size = feature_model.image_size
        self._reference = Image(np.full((size, size, 3), 0.5))
        self._reference_features: dict[str, np.ndarray] = {}

    @classmethod
    def from_seed(cls, seed: int, captions: list[str],
                  vision_arch: VisionArch = VisionArch(),
                  text_arch: TextArch = TextArch(),
                  projector_arch: ProjectorArch = ProjectorArch()) -> "ToyVictim":
        model = SurrogateModel.from_seed(seed, vision_arch, text_arch,
                                         projector_arch)
        return cls(model, derive_seed(seed, 99), captions)

    @property
    def vision_seed(self) -> int:
        """Seed of the vision encoder (what a gray-box attacker knows)."""
        return self.features.vision.seed

    @property
    def image_size(self) -> int:
        return self.features.image_size

    def _reference_for(self, instruction: str) -> np.ndarray:
        ref = self._reference_features.get(instruction)
        if ref is None:
            ref = self.features.features(self._reference.to_tensor(),
                                         instruction).data
            self._reference_features[instruction] = ref
        return ref

    def readout_embedding(self, x: Image, instruction: str) -> np.ndarray:
        feats = self.features.features(x.to_tensor(), instruction).data
        contrast = feats - self._reference_for(instruction)
        out = contrast @ self.readout.data
        norm = np.linalg.norm(out)
        return out / norm if norm > 0 else out

    def respond(self, x: Image, instruction: str) -> str:
        """The caption whose embedding best matches the readout; ties
        break toward the lowest bank index."""
        scores = self._bank @ self.readout_embedding(x, instruction)
        return self.captions[int(np.argmax(scores))]


def build_text_ensemble(seed: int, count: int = ENSEMBLE_SIZE,
                        arch: TextArch = TextArch()) -> list[TextEncoder]:
    """Independently seeded toy text encoders for scoring."""
    return [TextEncoder(derive_seed(seed, i), arch) for i in range(count)]


def _cosine(enc: TextEncoder, a: str, b: str) -> float:
    ea = T.l2_normalize(enc.embed(a)).data
    eb = T.l2_normalize(enc.embed(b)).data
    return float(ea @ eb)


def clip_score(response: str, target_text: str,
               ensemble: list[TextEncoder]) -> tuple[tuple[float, ...], float]:
    """Per-encoder cosine similarities and their plain mean."""
    if not response or not target_text:
        raise ContractError("clip_score needs non-empty texts")
    scores = tuple(_cosine(enc, response, target_text) for enc in ensemble)
    return scores, float(np.mean(scores))


class OfflineJudge:
    """Threshold judge: success iff the embedding cosine reaches tau."""

    def __init__(self, embedder: TextEncoder, tau: float = 0.8):
        self.embedder = embedder
        self.tau = tau

    def judge(self, response: str, target_text: str) -> bool:
        if not response or not target_text:
            raise ContractError("judge needs non-empty texts")
        return _cosine(self.embedder, response, target_text) >= self.tau


class RemoteJudge:
    """LLM judge: sends the fixed yes/no prompt and parses the leading token."""

    def __init__(self, client):
        self.client = client  # anything with chat(prompt) -> str

    def judge(self, response: str, target_text: str) -> bool:
        reply = self.client.chat(JUDGE_PROMPT.instantiate(
            candidate=response, reference=target_text))
        token = ""
        for word in reply.replace(".", " ").replace(",", " ").split():
            token = word.strip().lower()
            break
        if token.startswith("yes"):
            return True
        if token.startswith("no"):
            return False
        raise JudgeFormatError(
            f"judge reply was neither yes nor no: {reply[:80]!r}", payload=reply)


def judge_success(judge, response: str, target_text: str) -> bool:
    return judge.judge(response, target_text)


# -- benchmark ---------------------------------------------------------------------


@dataclass(frozen=True)
class BenchSample:
    sample_id: str
    image: Image
    target_text: str
    real_instruction: str


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    response: str
    target_text: str
    success: Optional[bool]  # None when a remote judge reply was unusable
    encoder_scores: tuple[float, ...]


@dataclass(frozen=True)
class EvalReport:
    """Scores for one method over a benchmark batch.

    ``ensemble_score`` is the arithmetic mean of the per-encoder means,
    and ``asr`` is always ``nos / total`` by construction.
    """

    method: str
    encoder_scores: tuple[float, ...]
    ensemble_score: float
    nos: int
    total: int
    samples: tuple[SampleRecord, ...]
    judge_errors: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def asr(self) -> float:
        return self.nos / self.total if self.total else 0.0

    @property
    def label(self) -> str:
        return METHOD_LABELS.get(self.method, self.method)


@dataclass(frozen=True)
class UsablePair:
    """A (target text, instruction) choice the victim can actually be
    steered to, plus the benign gallery entries it may start from."""

    target_text: str
    instruction: str
    benign_indices: tuple[int, ...]


def enumerate_usable_pairs(victim: ToyVictim, gallery: Gallery,
                           instructions: list[str], judge) -> list[UsablePair]:
    """All (target text, instruction) pairs for which the victim, shown
    the gallery image retrieved for the text, answers with it (the toy
    analog of generating instruction-answer pairs with a competent
    captioner), and at least one other gallery entry gives a clean
    response that does not match the target."""
    if not instructions:
        raise ConfigError("instruction library is empty")
    size = victim.image_size
    resized = [resize(img, size, size) for img in gallery.images]
    responses = {(g, p): victim.respond(resized[g], p)
                 for g in range(len(gallery)) for p in instructions}
    usable = []
    for target_text in victim.captions:
        m = gallery.retrieve_index(target_text)
        for p_real in instructions:
            if not judge.judge(responses[(m, p_real)], target_text):
                continue
            benign = tuple(
                c for c in range(len(gallery))
                if c != m and not judge.judge(responses[(c, p_real)],
                                              target_text))
            if benign:
                usable.append(UsablePair(target_text, p_real, benign))
    return usable


def draw_benchmark_samples(victim: ToyVictim, gallery: Gallery,
                           instructions: list[str], judge, count: int,
                           seed: int) -> list[BenchSample]:
    """Construct attackable (image, target text, instruction) triples by
    sampling uniformly from the usable-pair table. The benign image's
    clean response never matches the target, so the clean row scores
    zero by construction."""
    if count < 1:
        raise ConfigError(f"sample count must be >= 1, got {count}")
    usable = enumerate_usable_pairs(victim, gallery, instructions, judge)
    if not usable:
        raise ConfigError(
            "the victim/gallery pairing admits no attackable (target, "
            "instruction) pair; change the victim seed or the gallery")
    size = victim.image_size
    resized = [resize(img, size, size) for img in gallery.images]
    rng = SplitMix64(derive_seed(seed, 0xBE))
    samples = []
    for s in range(count):
        pair = usable[rng.randint(len(usable))]
        c = pair.benign_indices[rng.randint(len(pair.benign_indices))]
        samples.append(BenchSample(
            sample_id=f"s{s:03d}", image=resized[c],
            target_text=pair.target_text,
            real_instruction=pair.instruction))
    return samples


@dataclass
class BenchContext:
    """Everything a benchmark needs besides the samples."""

    deps: AttackDeps
    victim: ToyVictim
    judge: object
    ensemble: list[TextEncoder]
    workers: int = 1


def _craft(sample: BenchSample, method: str, cfg: AttackConfig,
           deps: AttackDeps) -> AttackResult:
    if method == "clean":
        return AttackResult(adversarial=sample.image, trace=(), config=cfg,
                            elapsed_seconds=0.0)
    if method == "noise":
        return run_noise_control(sample.image, cfg)
    return run_attack(sample.image, sample.target_text, deps,
                      replace(cfg, loss_mode=method))


def _bench_one(sample: BenchSample, method: str, child_seed: int,
               cfg: AttackConfig, ctx: BenchContext):
    cfg = replace(cfg, seed=child_seed)
    try:
        result = _craft(sample, method, cfg, ctx.deps)
        response = ctx.victim.respond(result.adversarial,
                                      sample.real_instruction)
        scores, _ = clip_score(response, sample.target_text, ctx.ensemble)
        try:
            success = ctx.judge.judge(response, sample.target_text)
        except JudgeFormatError as exc:
            warnings.warn(f"judge failed on {sample.sample_id}: {exc}")
            success = None
        record = SampleRecord(sample.sample_id, response, sample.target_text,
                              success, scores)
        return record, result
    except (JudgeFormatError,):  # pragma: no cover - handled above
        raise
    except Exception as exc:
        raise type(exc)(f"[sample {sample.sample_id}, method {method}] {exc}") \
            from exc


def run_benchmark(samples: list[BenchSample], methods: list[str],
                  ctx: BenchContext, cfg: AttackConfig,
                  artifact_sink=None) -> dict[str, EvalReport]:
    """Craft, query, score, and judge every sample for every method.

    The clean-image row is always evaluated. Per-sample randomness comes
    from child seeds of ``cfg.seed`` keyed by (method, sample index), so
    results do not depend on worker scheduling. Per-sample failures
    abort the run with the sample id attached. ``artifact_sink``, when
    given, receives ``(method, sample, AttackResult)`` in a fixed order.
    """
    if not samples:
        raise ConfigError("benchmark needs at least one sample")
    ordered = ["clean"] + [m for m in methods if m != "clean"]
    unknown = [m for m in ordered if m not in _METHOD_KEYS]
    if unknown:
        raise ConfigError(f"unknown benchmark methods: {unknown}")

    tasks = [(sample, method,
              derive_seed(cfg.seed, _METHOD_KEYS[method], idx))
             for method in ordered for idx, sample in enumerate(samples)]
    if ctx.workers > 1:
        import multiprocessing as mp

        with ProcessPoolExecutor(
                max_workers=ctx.workers,
                mp_context=mp.get_context("fork")) as pool:
            outcomes = list(pool.map(
                _bench_one_star,
                [(s, m, k, cfg, ctx) for s, m, k in tasks],
                chunksize=1))
    else:
        outcomes = [_bench_one(s, m, k, cfg, ctx) for s, m, k in tasks]

    reports: dict[str, EvalReport] = {}
    per_method = len(samples)
    for mi, method in enumerate(ordered):
        chunk = outcomes[mi * per_method:(mi + 1) * per_method]
        records = tuple(rec for rec, _ in chunk)
        judged = [r for r in records if r.success is not None]
        nos = sum(1 for r in judged if r.success)
        if judged:
            matrix = np.array([r.encoder_scores for r in judged])
            member_means = tuple(float(v) for v in matrix.mean(axis=0))
        else:
            member_means = tuple(0.0 for _ in ctx.ensemble)
        reports[method] = EvalReport(
            method=method,
            encoder_scores=member_means,
            ensemble_score=float(np.mean(member_means)),
            nos=nos,
            total=len(judged),
            samples=records,
            judge_errors=len(records) - len(judged),
            metadata={"attack": METHOD_LABELS.get(method, method),
                      "config": asdict(cfg)},
        )
        if artifact_sink is not None:
            for idx, (_, result) in enumerate(chunk):
                artifact_sink(method, samples[idx], result)
    return reports


def _bench_one_star(args):
    return _bench_one(*args)


# -- sweeps ------------------------------------------------------------------------


def sweep(kind: str, grid: list, samples: list[BenchSample],
          ctx: BenchContext, cfg: AttackConfig,
          method: str = "instructta") -> list[dict]:
    """One benchmark row per grid point.

    ``epsilon`` and ``n`` vary the corresponding config field; ``shuffle``
    treats each grid value as a permutation seed and reshuffles which
    instruction accompanies which (image, target) pair.
    """
    if kind not in ("epsilon", "n", "shuffle"):
        raise ConfigError(f"unknown sweep kind {kind!r}")
    if not grid:
        raise ConfigError("sweep grid may not be empty")
    rows = []
    for value in grid:
        if kind == "epsilon":
            point_cfg = replace(cfg, epsilon=float(value))
            point_samples = samples
        elif kind == "n":
            point_cfg = replace(cfg, n_instructions=int(value))
            point_samples = samples
        else:
            point_cfg = cfg
            point_samples = shuffle_instructions(samples, int(value))
        reports = run_benchmark(point_samples, [method], ctx, point_cfg)
        report = reports[method]
        row = {"param": kind, "value": value}
        for i, s in enumerate(report.encoder_scores):
            row[f"enc{i}"] = s
        row.update({"ensemble": report.ensemble_score, "nos": report.nos,
                    "total": report.total, "asr": report.asr})
        rows.append(row)
    return rows


def shuffle_instructions(samples: list[BenchSample], seed: int) -> list[BenchSample]:
    """Permute the instruction<->(image, target) pairing with a seeded shuffle."""
    rng = SplitMix64(derive_seed(seed, 0x5F))
    perm = rng.shuffled_indices(len(samples))
    return [replace(s, real_instruction=samples[perm[i]].real_instruction)
            for i, s in enumerate(samples)]


# -- instruction audit --------------------------------------------------------------


@dataclass(frozen=True)
class AuditFixture:
    inferred: str
    rephrasings: tuple[str, ...]
    real: str


@dataclass(frozen=True)
class AuditTable:
    """Mean pairwise similarities among instruction classes (a 2x2 table:
    rows inferred/real, columns rephrased/real)."""

    inferred_vs_rephrased: float
    inferred_vs_real: float
    real_vs_rephrased: float
    real_vs_real: float

    def rows(self) -> list[dict]:
        return [
            {"instruction": "inferred", "rephrased": self.inferred_vs_rephrased,
             "real": self.inferred_vs_real},
            {"instruction": "real", "rephrased": self.real_vs_rephrased,
             "real": self.real_vs_real},
        ]


def instruction_audit(fixtures: list[AuditFixture],
                      embedder: TextEncoder) -> AuditTable:
    if not fixtures:
        raise ContractError("instruction audit needs at least one fixture")
    inf_re, inf_real, real_re, real_real = [], [], [], []
    for fx in fixtures:
        for r in fx.rephrasings:
            inf_re.append(_cosine(embedder, fx.inferred, r))
            real_re.append(_cosine(embedder, fx.real, r))
        inf_real.append(_cosine(embedder, fx.inferred, fx.real))
        real_real.append(_cosine(embedder, fx.real, fx.real))
    def m(vals):
        return float(np.mean(vals)) if vals else math.nan
    return AuditTable(m(inf_re), m(inf_real), m(real_re), m(real_real))


def build_audit_fixtures(provider, target_texts: list[str],
                         real_instructions: list[str], n: int,
                         seed: int) -> list[AuditFixture]:
    """Run the instruction pipeline over target texts and attach a real
    instruction to each, mirroring how benchmark pairs are formed."""
    rng = SplitMix64(derive_seed(seed, 0xAD))
    fixtures = []
    for text in target_texts:
        inferred = provider.infer_instruction(text)
        q = provider.rephrase_instructions(inferred, n)
        real = real_instructions[rng.randint(len(real_instructions))]
        fixtures.append(AuditFixture(inferred=inferred,
                                     rephrasings=q.instructions[1:], real=real))
    return fixtures


# -- perceptual proxies ---------------------------------------------------------------


def perceptual_report(x: Image, x_adv: Image) -> dict[str, float]:
    """L-infinity, RMSE, and mean absolute difference between two images."""
    if x.pixels.shape != x_adv.pixels.shape:
        raise ContractError(
            f"perceptual report shapes differ: {x.pixels.shape} vs "
            f"{x_adv.pixels.shape}")
    diff = x_adv.pixels - x.pixels
    return {
        "linf": float(np.max(np.abs(diff))),
        "rmse": float(np.sqrt(np.mean(diff * diff))),
        "mean_abs": float(np.mean(np.abs(diff))),
    }


# -- report files -----------------------------------------------------------------------


def write_report_csv(reports: dict[str, EvalReport], path,
                     order: Optional[list[str]] = None) -> None:
    """Table-style CSV: one row per method, per-encoder scores, ensemble,
    NoS, total, ASR. Fixed six-decimal formatting keeps reruns byte-identical."""
    methods = order or list(reports)
    n_enc = len(next(iter(reports.values())).encoder_scores)
    headers = (["method"] + [f"enc{i}" for i in range(n_enc)]
               + ["ensemble", "nos", "total", "asr"])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(headers)
        for name in methods:
            r = reports[name]
            writer.writerow([r.label]
                            + [f"{v:.6f}" for v in r.encoder_scores]
                            + [f"{r.ensemble_score:.6f}", r.nos, r.total,
                               f"{r.asr:.6f}"])


def write_report_json(reports: dict[str, EvalReport], path,
                      order: Optional[list[str]] = None) -> None:
    methods = order or list(reports)
    payload = []
    for name in methods:
        r = reports[name]
        payload.append({
            "method": r.method,
            "label": r.label,
            "encoder_scores": list(r.encoder_scores),
            "ensemble_score": r.ensemble_score,
            "nos": r.nos,
            "total": r.total,
            "asr": r.asr,
            "judge_errors": r.judge_errors,
            "samples": [{
                "id": s.sample_id,
                "response": s.response,
                "target_text": s.target_text,
                "success": s.success,
                "encoder_scores": list(s.encoder_scores),
            } for s in r.samples],
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
