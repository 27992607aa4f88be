"""Wiring a full laboratory from one master seed.

All component seeds derive from the master seed along documented paths
(``derive_seed(seed, key, ...)``):

====================  =======================
component             derivation keys
====================  =======================
victim                (1, scan index)
surrogate             (2,)
align pair            (3,)
instruction provider  (4,)
judge embedder        (5, scan index)
score ensemble        (6,)
gallery retrieval     (7,)
====================  =======================

Two components are scanned rather than taken at index 0, because random
toy models vary in usefulness. The judge embedder must keep the caption
bank apart (fraction of distinct caption pairs it would call identical
at the success threshold must not exceed ``judge_confusion_limit``).
The victim must admit enough attackable (target, instruction) pairs for
benchmark construction. Both scans walk deterministic child-seed
sequences, so the whole laboratory is a pure function of the master
seed and the data files.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .assets import (default_gallery_manifest, load_caption_bank,
                     load_real_instructions)
from .attack import AttackDeps
from .encoders import (AlignPair, ProjectorArch, SurrogateModel, TextArch,
                       TextEncoder, VisionArch)
from .errors import ConfigError
from .evaluation import (BenchContext, OfflineJudge, ToyVictim,
                         build_text_ensemble, enumerate_usable_pairs)
from .imaging import Gallery
from .instructions import OfflineProvider
from .rng import derive_seed

DEFAULT_SCAN_LIMIT = 16
DEFAULT_MIN_USABLE_PAIRS = 6
DEFAULT_MIN_DISTINCT_TARGETS = 2
DEFAULT_JUDGE_CONFUSION_LIMIT = 0.10


@dataclass
class Lab:
    """A fully wired experiment: models, data, providers, scoring."""

    seed: int
    victim: ToyVictim
    surrogate: SurrogateModel
    align: AlignPair
    gallery: Gallery
    provider: object
    judge: OfflineJudge
    ensemble: list
    captions: list[str]
    real_instructions: list[str]
    workers: int = 1
    judge_scan_index: int = 0
    victim_scan_index: int = 0

    @property
    def deps(self) -> AttackDeps:
        return AttackDeps(surrogate=self.surrogate, align=self.align,
                          gallery=self.gallery, provider=self.provider,
                          victim=self.victim)

    @property
    def bench_context(self) -> BenchContext:
        return BenchContext(deps=self.deps, victim=self.victim,
                            judge=self.judge, ensemble=self.ensemble,
                            workers=self.workers)


def _judge_confusion(embedder: TextEncoder, captions: list[str],
                     tau: float) -> float:
    embs = np.stack([T.l2_normalize(embedder.embed(c)).data for c in captions])
    cross = (embs @ embs.T)[np.triu_indices(len(captions), 1)]
    return float((cross >= tau).mean()) if cross.size else 0.0


def _scan_judge(seed: int, captions: list[str], tau: float,
                confusion_limit: float, scan_limit: int,
                text_arch: TextArch) -> tuple[OfflineJudge, int]:
    for k in range(scan_limit):
        embedder = TextEncoder(derive_seed(seed, 5, k), text_arch)
        if _judge_confusion(embedder, captions, tau) <= confusion_limit:
            return OfflineJudge(embedder, tau=tau), k
    raise ConfigError(
        f"no judge embedder within {scan_limit} candidates keeps the "
        f"caption bank apart at tau={tau}")


def _scan_victim(seed: int, captions: list[str], gallery: Gallery,
                 instructions: list[str], judge: OfflineJudge,
                 min_pairs: int, min_targets: int, scan_limit: int,
                 vision_arch: VisionArch, text_arch: TextArch,
                 projector_arch: ProjectorArch) -> tuple[ToyVictim, int]:
    for k in range(scan_limit):
        victim = ToyVictim.from_seed(derive_seed(seed, 1, k), captions,
                                     vision_arch, text_arch, projector_arch)
        usable = enumerate_usable_pairs(victim, gallery, instructions, judge)
        targets = {p.target_text for p in usable}
        if len(usable) >= min_pairs and len(targets) >= min_targets:
            return victim, k
    raise ConfigError(
        f"no victim within {scan_limit} candidates admits at least "
        f"{min_pairs} attackable pairs over {min_targets} targets")


def build_lab(seed: int, *,
              gallery_manifest=None,
              caption_bank_path=None,
              instruction_library: Optional[list[str]] = None,
              provider=None,
              judge=None,
              judge_tau: float = 0.8,
              share_vision_encoder: bool = True,
              vision_arch: VisionArch = VisionArch(),
              text_arch: TextArch = TextArch(),
              projector_arch: ProjectorArch = ProjectorArch(),
              workers: int = 1,
              min_usable_pairs: int = DEFAULT_MIN_USABLE_PAIRS,
              min_distinct_targets: int = DEFAULT_MIN_DISTINCT_TARGETS,
              judge_confusion_limit: float = DEFAULT_JUDGE_CONFUSION_LIMIT,
              scan_limit: int = DEFAULT_SCAN_LIMIT) -> Lab:
    """Build every component of the laboratory from one master seed.

    Passing ``provider`` or ``judge`` overrides the offline defaults
    (e.g. with remote-backed instances); everything else still derives
    from the seed.
    """
    captions = load_caption_bank(caption_bank_path)
    instructions = (list(instruction_library) if instruction_library
                    else load_real_instructions())
    retrieval_encoder = TextEncoder(derive_seed(seed, 7), text_arch)
    gallery = Gallery.from_manifest(
        gallery_manifest or default_gallery_manifest(),
        retrieval_encoder, image_size=vision_arch.image_size)

    judge_scan = 0
    if judge is None:
        judge, judge_scan = _scan_judge(seed, captions, judge_tau,
                                        judge_confusion_limit, scan_limit,
                                        text_arch)
    victim, victim_scan = _scan_victim(
        seed, captions, gallery, instructions, judge,
        min_usable_pairs, min_distinct_targets, scan_limit,
        vision_arch, text_arch, projector_arch)

    shared_vision = victim.vision_seed if share_vision_encoder else None
    surrogate = SurrogateModel.from_seed(
        derive_seed(seed, 2), vision_arch, text_arch, projector_arch,
        vision_seed=shared_vision)
    align = AlignPair.from_seed(
        derive_seed(seed, 3), vision_arch, text_arch,
        vision_seed=shared_vision)
    if provider is None:
        provider = OfflineProvider(seed=derive_seed(seed, 4))
    ensemble = build_text_ensemble(derive_seed(seed, 6), arch=text_arch)
    return Lab(seed=seed, victim=victim, surrogate=surrogate, align=align,
               gallery=gallery, provider=provider, judge=judge,
               ensemble=ensemble, captions=captions,
               real_instructions=instructions, workers=workers,
               judge_scan_index=judge_scan, victim_scan_index=victim_scan)
