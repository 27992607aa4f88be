"""Access to the bundled data files (word lists, galleries, instruction
libraries). All loaders cache nothing and return plain Python values."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .errors import DataError


def data_dir() -> Path:
    return Path(str(resources.files("attacklab").joinpath("data")))


def _load_lines(name: str) -> list[str]:
    path = data_dir() / name
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"missing bundled data file {name}: {exc}") from exc
    return [line.strip() for line in text.splitlines() if line.strip()]


def load_stopwords() -> frozenset[str]:
    return frozenset(_load_lines("stopwords.txt"))


def load_thesaurus() -> dict[str, list[str]]:
    """Parse 'word = syn1, syn2, ...' lines into an ordered mapping."""
    table: dict[str, list[str]] = {}
    for line in _load_lines("thesaurus.txt"):
        word, _, rest = line.partition("=")
        word = word.strip()
        syns = [s.strip() for s in rest.split(",") if s.strip()]
        if word and syns:
            table[word] = syns
    return table


def load_reserve_templates() -> list[str]:
    return _load_lines("reserve_templates.txt")


def load_real_instructions() -> list[str]:
    return _load_lines("real_instructions.txt")


def load_caption_bank(path=None) -> list[str]:
    if path is None:
        return _load_lines("caption_bank.txt")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read caption bank {path}: {exc}") from exc
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        raise DataError(f"caption bank {path} is empty")
    return lines


def load_unrelated_controls() -> list[str]:
    return _load_lines("unrelated_controls.txt")


def default_gallery_manifest() -> Path:
    return data_dir() / "gallery" / "manifest.json"
