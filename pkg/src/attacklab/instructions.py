"""Instruction inference and augmentation.

Given a target text, produce a plausible instruction (the question the
text answers) and a set of ``n`` paraphrases of it. Two providers share
the interface: a deterministic offline stub (pure function of inputs
and seed) and a remote chat-completion client that sends the fixed
prompt templates below and parses bullet-list replies.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Optional

import requests

from .assets import load_reserve_templates, load_stopwords, load_thesaurus
from .errors import ContractError, ProviderError, ProviderFormatError
from .rng import SplitMix64, derive_seed

INFER_FIXED_SENTENCE = "What is the question or prompt for the following answer?"
REPHRASE_FIXED_SENTENCE = (
    "Rephrase the following sentence without changing its original meaning.")
JUDGE_FIXED_SENTENCE = (
    "Determine whether these two texts describe the same objects or things, "
    "you only need to answer yes or no:")

INFER_TEMPLATE = (
    'What is the question or prompt for the following answer? '
    'You just provide a question or prompt.\n\n"""\n\n{target_text}\n\n"""'
)
REPHRASE_TEMPLATE = (
    'Rephrase the following sentence without changing its original meaning. '
    'Please give {count} examples of paraphrasing that look different and '
    'begin the statement with "-".\n\n"""\n\n{seed_instruction}\n\n"""'
)
JUDGE_TEMPLATE = (
    "Determine whether these two texts describe the same objects or things, "
    "you only need to answer yes or no:\n\n1. {candidate}\n\n2. {reference}"
)

_STUB_INSTRUCTION = (
    "Can you describe what's in the picture you're looking at related to {keyword}?")

_PREFIXES = [
    "", "Please ", "Kindly ", "Could you ", "Would you ", "I'd like you to ",
    "If possible, ", "When you have a moment, ", "Go ahead and ", "First, ",
    "Now, ", "Be so kind and ",
]
_SUFFIXES = ["", " Thanks.", " Please be specific.", " Keep it concise.",
             " Focus on the main subject."]
_MAX_SYNONYM_VARIANTS = 12


@dataclass(frozen=True)
class PromptTemplate:
    """A fixed prompt with placeholders; the fixed sentence never changes."""

    kind: str  # infer | rephrase | judge
    text: str

    _FIXED = {
        "infer": INFER_FIXED_SENTENCE,
        "rephrase": REPHRASE_FIXED_SENTENCE,
        "judge": JUDGE_FIXED_SENTENCE,
    }

    def __post_init__(self):
        fixed = self._FIXED.get(self.kind)
        if fixed is None:
            raise ContractError(f"unknown template kind {self.kind!r}")
        if fixed not in self.text:
            raise ContractError(
                f"{self.kind} template is missing its fixed sentence")

    def instantiate(self, **fields) -> str:
        rendered = self.text.format(**fields)
        if self._FIXED[self.kind] not in rendered:
            raise ContractError(
                f"instantiation altered the fixed {self.kind} sentence")
        return rendered


INFER_PROMPT = PromptTemplate("infer", INFER_TEMPLATE)
REPHRASE_PROMPT = PromptTemplate("rephrase", REPHRASE_TEMPLATE)
JUDGE_PROMPT = PromptTemplate("judge", JUDGE_TEMPLATE)


def normalize_text(s: str) -> str:
    return " ".join(s.lower().split())


def _words(text: str) -> list[str]:
    out, cur = [], []
    for ch in text.lower():
        if ch.isalnum():
            cur.append(ch)
        elif cur:
            out.append("".join(cur))
            cur = []
    if cur:
        out.append("".join(cur))
    return out


def _text_key(s: str) -> int:
    h = 0xCBF29CE484222325
    for b in s.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & ((1 << 64) - 1)
    return h


@dataclass(frozen=True)
class InstructionSet:
    """The seed instruction plus its paraphrases; entry 0 is the seed."""

    instructions: tuple[str, ...]
    provenance: str  # offline | remote | mixed

    def __post_init__(self):
        if not self.instructions:
            raise ContractError("instruction set may not be empty")
        if any(not i.strip() for i in self.instructions):
            raise ContractError("instruction set entries must be non-empty")
        normed = [normalize_text(i) for i in self.instructions]
        if len(set(normed)) != len(normed):
            raise ContractError("instruction set entries must be distinct")

    @property
    def seed_instruction(self) -> str:
        return self.instructions[0]

    @property
    def n(self) -> int:
        return len(self.instructions)

    def __len__(self) -> int:
        return len(self.instructions)

    def __getitem__(self, idx: int) -> str:
        return self.instructions[idx]


def sample_pair_indices(q: InstructionSet, rng: SplitMix64) -> tuple[int, int]:
    """Two independent uniform draws with replacement (i == j allowed)."""
    if len(q) < 1:
        raise ContractError("cannot sample from an empty instruction set")
    return rng.randint(len(q)), rng.randint(len(q))


def sample_pair(q: InstructionSet, rng: SplitMix64) -> tuple[str, str]:
    i, j = sample_pair_indices(q, rng)
    return q[i], q[j]


class OfflineProvider:
    """Deterministic instruction provider; a pure function of inputs + seed.

    Inference picks the longest non-stopword token of the target text
    (lexicographically first on ties) and drops it into a fixed question
    template. Rephrasing composes politeness prefixes, thesaurus
    substitutions, and suffixes in a seeded order, topping up from a
    reserve template list when combinations collide.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.call_count = 0
        self._stopwords = load_stopwords()
        self._thesaurus = load_thesaurus()
        self._reserve = load_reserve_templates()

    # -- inference ------------------------------------------------------
    def infer_instruction(self, target_text: str) -> str:
        if not target_text or not target_text.strip():
            raise ContractError("target text must be non-empty")
        self.call_count += 1
        return _STUB_INSTRUCTION.format(keyword=self._keyword(target_text))

    def _keyword(self, target_text: str) -> str:
        tokens = _words(target_text)
        content = [t for t in tokens if t not in self._stopwords]
        pool = content or tokens
        if not pool:
            return "it"
        # longest first, then lexicographic
        return sorted(pool, key=lambda t: (-len(t), t))[0]

    # -- rephrasing -----------------------------------------------------
    def rephrase_instructions(self, seed_instruction: str, n: int) -> InstructionSet:
        if n < 1:
            raise ContractError(f"instruction count must be >= 1, got {n}")
        if not seed_instruction.strip():
            raise ContractError("seed instruction must be non-empty")
        self.call_count += 1
        entries = [seed_instruction]
        seen = {normalize_text(seed_instruction)}
        for cand in self._candidates(seed_instruction):
            if len(entries) == n:
                break
            key = normalize_text(cand)
            if key in seen:
                continue
            seen.add(key)
            entries.append(cand)
        if len(entries) < n:
            raise ContractError(
                f"offline rephrase capacity exhausted at {len(entries)} of {n}")
        return InstructionSet(tuple(entries), provenance="offline")

    def _synonym_variants(self, text: str) -> list[str]:
        variants = []
        lowered = text.lower()
        words = set(_words(lowered))
        for word, syns in self._thesaurus.items():
            if word not in words:
                continue
            for syn in syns:
                replaced = _replace_word(text, word, syn)
                if replaced != text:
                    variants.append(replaced)
                if len(variants) >= _MAX_SYNONYM_VARIANTS:
                    return variants
        return variants

    def _candidates(self, seed_instruction: str):
        """Transformed instructions in a seeded order, then the reserve list."""
        variants = [seed_instruction] + self._synonym_variants(seed_instruction)
        total = len(variants) * len(_PREFIXES) * len(_SUFFIXES)
        rng = SplitMix64(derive_seed(self.seed, _text_key(seed_instruction)))
        for combo in rng.shuffled_indices(total):
            v, rest = divmod(combo, len(_PREFIXES) * len(_SUFFIXES))
            p, s = divmod(rest, len(_SUFFIXES))
            if v == 0 and p == 0 and s == 0:
                continue  # the identity combination
            base = variants[v]
            if _PREFIXES[p]:
                base = _PREFIXES[p] + base[:1].lower() + base[1:]
            yield base + _SUFFIXES[s]
        yield from self._reserve


def _replace_word(text: str, word: str, replacement: str) -> str:
    """Whole-word, case-insensitive replacement (all occurrences)."""
    out = []
    i, n = 0, len(text)
    wl = len(word)
    low = text.lower()
    while i < n:
        j = low.find(word, i)
        if j < 0:
            out.append(text[i:])
            break
        before_ok = j == 0 or not low[j - 1].isalnum()
        after_ok = j + wl >= n or not low[j + wl].isalnum()
        if before_ok and after_ok:
            out.append(text[i:j])
            out.append(replacement)
            i = j + wl
        else:
            out.append(text[i: j + 1])
            i = j + 1
    return "".join(out)


_BULLETS = ("-", "*", "•")


def _strip_listing(line: str) -> str:
    s = line.strip()
    for b in _BULLETS:
        if s.startswith(b):
            s = s[len(b):].strip()
            break
    else:
        # numbered forms: "1." or "1)"
        head, sep, rest = s.partition(".")
        if head.isdigit() and sep:
            s = rest.strip()
        else:
            head, sep, rest = s.partition(")")
            if head.isdigit() and sep:
                s = rest.strip()
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        s = s[1:-1].strip()
    return s


@dataclass
class RemoteConfig:
    endpoint: str
    model: str
    timeout: float = 30.0
    retries: int = 2
    strict_parsing: bool = False
    api_key_env: str = "ATTACKLAB_LLM_KEY"
    # decoding parameters (temperature etc.) pass through untouched
    decode_params: dict = field(default_factory=dict)


class RemoteProvider:
    """Chat-completion-backed provider with retry/timeout handling.

    Sends ``{"model": ..., "messages": [{"role": "user", "content": ...}]}``
    and reads ``choices[0].message.content``. Short rephrase replies are
    topped up from the offline stub and marked as mixed provenance.
    """

    def __init__(self, config: RemoteConfig, fallback_seed: int = 0):
        self.config = config
        self.call_count = 0
        self._offline = OfflineProvider(fallback_seed)

    def chat(self, prompt: str) -> str:
        cfg = self.config
        key = os.environ.get(cfg.api_key_env)
        if not key:
            raise ProviderError(
                f"API key environment variable {cfg.api_key_env} is not set")
        payload = {"model": cfg.model,
                   "messages": [{"role": "user", "content": prompt}]}
        payload.update(cfg.decode_params)
        headers = {"Authorization": f"Bearer {key}"}
        last_error: Optional[str] = None
        last_status: Optional[int] = None
        for attempt in range(cfg.retries + 1):
            if attempt:
                time.sleep(0.05 * attempt)
            try:
                resp = requests.post(cfg.endpoint, json=payload,
                                     headers=headers, timeout=cfg.timeout)
            except requests.RequestException as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code >= 500:
                last_error = f"server error {resp.status_code}"
                last_status = resp.status_code
                continue
            if resp.status_code != 200:
                raise ProviderError(
                    f"provider rejected the request: HTTP {resp.status_code}",
                    status=resp.status_code)
            try:
                data = resp.json()
                content = data["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProviderFormatError(
                    f"malformed chat completion payload: {exc}",
                    payload=resp.text) from exc
            if not isinstance(content, str):
                raise ProviderFormatError("completion content is not text",
                                          payload=resp.text)
            return content
        raise ProviderError(
            f"provider unreachable after {cfg.retries + 1} attempts "
            f"({last_error})", status=last_status)

    def infer_instruction(self, target_text: str) -> str:
        if not target_text or not target_text.strip():
            raise ContractError("target text must be non-empty")
        self.call_count += 1
        reply = self.chat(INFER_PROMPT.instantiate(target_text=target_text))
        for line in reply.splitlines():
            cleaned = _strip_listing(line)
            if cleaned:
                return cleaned
        raise ProviderFormatError("inference reply held no usable line",
                                  payload=reply)

    def rephrase_instructions(self, seed_instruction: str, n: int) -> InstructionSet:
        if n < 1:
            raise ContractError(f"instruction count must be >= 1, got {n}")
        if not seed_instruction.strip():
            raise ContractError("seed instruction must be non-empty")
        self.call_count += 1
        if n == 1:
            return InstructionSet((seed_instruction,), provenance="remote")
        reply = self.chat(REPHRASE_PROMPT.instantiate(
            count=n - 1, seed_instruction=seed_instruction))
        entries = [seed_instruction]
        seen = {normalize_text(seed_instruction)}
        parsed_any = False
        for line in reply.splitlines():
            if self.config.strict_parsing and not line.strip().startswith("-"):
                continue
            cleaned = _strip_listing(line)
            if not cleaned:
                continue
            parsed_any = True
            key = normalize_text(cleaned)
            if key in seen or len(entries) >= n:
                continue
            seen.add(key)
            entries.append(cleaned)
        if not parsed_any:
            raise ProviderFormatError("rephrase reply held no list lines",
                                      payload=reply)
        provenance = "remote"
        if len(entries) < n:
            provenance = "mixed"
            for cand in self._offline._candidates(seed_instruction):
                if len(entries) == n:
                    break
                key = normalize_text(cand)
                if key not in seen:
                    seen.add(key)
                    entries.append(cand)
        if len(entries) < n:
            raise ContractError(
                f"rephrase top-up capacity exhausted at {len(entries)} of {n}")
        return InstructionSet(tuple(entries), provenance=provenance)
