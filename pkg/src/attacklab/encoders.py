"""Deterministic toy encoders: a patch-transformer vision encoder, a
hashing text encoder, an instruction-conditioned cross-attention
projector, and an aligned image/text embedding pair.

None of these are trained. Parameters are drawn once from a seeded
splitmix stream (Xavier-uniform, every parameter a 2-D matrix), so one
seed fixes every output bitwise. Gradients flow to image inputs only;
parameters are plain constants in the graph.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from math import sqrt
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, ShapeMismatchError
from .rng import SplitMix64, derive_seed

PARAMS_FORMAT = "attacklab-params-v1"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class VisionArch:
    image_size: int = 32
    patch_size: int = 4
    dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    attn_sharpness: float = 8.0

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class TextArch:
    vocab: int = 1024
    dim: int = 32
    heads: int = 2
    max_len: int = 32
    attn_sharpness: float = 8.0


@dataclass(frozen=True)
class ProjectorArch:
    queries: int = 8
    dim: int = 32
    heads: int = 2
    attn_sharpness: float = 8.0
    # gain on instruction tokens in the key/value set: conditioning should
    # modulate the features, not dominate the image content
    instruction_gain: float = 0.25

    @property
    def feature_len(self) -> int:
        return self.queries * self.dim


def init_params(seed: int, shapes: dict, fans: Optional[dict] = None) -> dict:
    """Draw named parameter matrices from one seeded stream.

    Every parameter is uniform on (-a, a) with a = sqrt(6 / (fan_in +
    fan_out)); draws happen in dict order, so the full parameter set is
    a pure function of (seed, shape table). For weight matrices the fans
    are the shape itself; embedding-style lookup tables pass explicit
    fans of (1, dim), since a row lookup is a one-hot matmul with an
    effective fan-in of one.
    """
    rng = SplitMix64(seed)
    fans = fans or {}
    out = {}
    for name, shape in shapes.items():
        a = xavier_bound(fans.get(name, shape))
        out[name] = T.Tensor(rng.uniform(shape, -a, a))
    return out


def xavier_bound(fan_pair) -> float:
    fan_in, fan_out = fan_pair
    return sqrt(6.0 / (fan_in + fan_out))


def _table_fans(shapes: dict, table_names: tuple) -> dict:
    return {name: (1, shapes[name][1]) for name in table_names if name in shapes}


def hash_token(token: str, vocab: int) -> int:
    """FNV-1a 64-bit hash of the UTF-8 token, reduced into the vocab."""
    h = _FNV_OFFSET
    for b in token.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h % vocab


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    tokens = []
    current = []
    for ch in text.lower():
        if ch.isalnum():
            current.append(ch)
        elif current:
            tokens.append("".join(current))
            current = []
    if current:
        tokens.append("".join(current))
    return tokens


def _attention(q_in, kv_in, p, prefix, heads, sharpness=1.0):
    """Multi-head scaled dot-product attention; queries may differ from kv.

    ``sharpness`` multiplies the scores before the softmax. Untrained
    random projections produce nearly uniform attention, which averages
    out input-specific signal; a sharpness above 1 keeps these toy
    encoders input-selective.
    """
    q = T.matmul(q_in, p[f"{prefix}.wq"])
    k = T.matmul(kv_in, p[f"{prefix}.wk"])
    v = T.matmul(kv_in, p[f"{prefix}.wv"])
    dim = q.shape[1]
    dh = dim // heads
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = T.narrow(q, 1, lo, hi)
        kh = T.narrow(k, 1, lo, hi)
        vh = T.narrow(v, 1, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), sharpness / sqrt(dh))
        outs.append(T.matmul(T.softmax(scores, axis=1), vh))
    return T.matmul(T.concat(outs, axis=1), p[f"{prefix}.wo"])


def _block(x, p, prefix, heads, sharpness=1.0):
    """Pre-norm transformer block: self-attention + gelu MLP, residual."""
    h = T.layer_norm(x)
    x = T.add(x, _attention(h, h, p, f"{prefix}.attn", heads, sharpness))
    m = T.layer_norm(x)
    up = T.gelu(T.matmul(m, p[f"{prefix}.up"]))
    return T.add(x, T.matmul(up, p[f"{prefix}.down"]))


def _block_shapes(prefix, dim, mlp_ratio=2):
    return {
        f"{prefix}.attn.wq": (dim, dim),
        f"{prefix}.attn.wk": (dim, dim),
        f"{prefix}.attn.wv": (dim, dim),
        f"{prefix}.attn.wo": (dim, dim),
        f"{prefix}.up": (dim, dim * mlp_ratio),
        f"{prefix}.down": (dim * mlp_ratio, dim),
    }


class VisionEncoder:
    """Patch-embedding transformer over a square RGB image.

    ``encode`` maps an (S, S, 3) tensor to a (num_patches + 1, dim)
    token matrix; token 0 is the pooled token. Differentiable w.r.t.
    the image.
    """

    def __init__(self, seed: int, arch: VisionArch = VisionArch()):
        if arch.image_size % arch.patch_size:
            raise ContractError("image size must be a multiple of the patch size")
        if arch.dim % arch.heads:
            raise ContractError("embed dim must be divisible by the head count")
        self.seed = seed
        self.arch = arch
        patch_dim = arch.patch_size ** 2 * 3
        shapes = {
            "patch_proj": (patch_dim, arch.dim),
            "cls": (1, arch.dim),
            "pos": (arch.num_patches + 1, arch.dim),
        }
        for b in range(arch.depth):
            shapes.update(_block_shapes(f"block{b}", arch.dim, arch.mlp_ratio))
        self.params = init_params(seed, shapes,
                                  _table_fans(shapes, ("cls", "pos")))
        self._patch_index = self._build_patch_index()

    def _build_patch_index(self) -> np.ndarray:
        s, ps = self.arch.image_size, self.arch.patch_size
        grid = s // ps
        p = np.arange(grid * grid)
        pr, pc = p // grid, p % grid
        i = np.arange(ps)
        j = np.arange(ps)
        c = np.arange(3)
        rows = pr[:, None, None, None] * ps + i[None, :, None, None]
        cols = pc[:, None, None, None] * ps + j[None, None, :, None]
        flat = (rows * s + cols) * 3 + c[None, None, None, :]
        return flat.reshape(-1)

    def encode(self, x: T.Tensor) -> T.Tensor:
        a = self.arch
        if x.shape != (a.image_size, a.image_size, 3):
            raise ShapeMismatchError(
                f"vision encoder expects ({a.image_size}, {a.image_size}, 3), "
                f"got {x.shape}; resize first")
        p = self.params
        patch_dim = a.patch_size ** 2 * 3
        patches = T.reshape(T.take_flat(x, self._patch_index),
                            (a.num_patches, patch_dim))
        t = T.matmul(patches, p["patch_proj"])
        t = T.add(T.concat([p["cls"], t], axis=0), p["pos"])
        for b in range(a.depth):
            t = _block(t, p, f"block{b}", a.heads, a.attn_sharpness)
        return T.layer_norm(t)

    def pooled(self, x: T.Tensor) -> T.Tensor:
        """The pooled token (row 0) as a vector."""
        return T.reshape(T.narrow(self.encode(x), 0, 0, 1), (self.arch.dim,))


class TextEncoder:
    """Hashing bag-of-tokens transformer encoder.

    Tokens are lowercased alphanumeric runs hashed into a fixed vocab,
    truncated to ``max_len``. Empty text maps to a dedicated sentinel
    embedding rather than an error.
    """

    def __init__(self, seed: int, arch: TextArch = TextArch()):
        if arch.dim % arch.heads:
            raise ContractError("embed dim must be divisible by the head count")
        self.seed = seed
        self.arch = arch
        shapes = {
            "tokens": (arch.vocab, arch.dim),
            "pos": (arch.max_len, arch.dim),
            "sentinel": (1, arch.dim),
        }
        shapes.update(_block_shapes("block0", arch.dim))
        self.params = init_params(
            seed, shapes, _table_fans(shapes, ("tokens", "pos", "sentinel")))

    def token_ids(self, text: str) -> list[int]:
        return [hash_token(t, self.arch.vocab)
                for t in tokenize(text)[: self.arch.max_len]]

    def token_matrix(self, text: str) -> T.Tensor:
        """Contextualized token embeddings, shape (T, dim) with T >= 1."""
        p = self.params
        ids = self.token_ids(text)
        if ids:
            rows = T.gather_rows(p["tokens"], np.array(ids))
            rows = T.add(rows, T.narrow(p["pos"], 0, 0, len(ids)))
        else:
            rows = p["sentinel"]
        return T.layer_norm(_block(rows, p, "block0", self.arch.heads,
                                   self.arch.attn_sharpness))

    def embed(self, text: str) -> T.Tensor:
        """Mean-pooled text embedding of dimension ``dim`` (not normalized)."""
        return T.mean(self.token_matrix(text), axis=0)


class Projector:
    """Learned-query cross-attention head producing instruction-aware
    features: queries attend over [instruction tokens ; visual tokens]
    and the per-query outputs are flattened into one feature vector."""

    def __init__(self, seed: int, arch: ProjectorArch = ProjectorArch()):
        if arch.dim % arch.heads:
            raise ContractError("embed dim must be divisible by the head count")
        self.seed = seed
        self.arch = arch
        shapes = {"queries": (arch.queries, arch.dim)}
        shapes.update({
            "cross.wq": (arch.dim, arch.dim),
            "cross.wk": (arch.dim, arch.dim),
            "cross.wv": (arch.dim, arch.dim),
            "cross.wo": (arch.dim, arch.dim),
            "head": (arch.dim, arch.dim),
        })
        self.params = init_params(seed, shapes,
                                  _table_fans(shapes, ("queries",)))

    def project(self, visual_tokens: T.Tensor, instruction_tokens: T.Tensor) -> T.Tensor:
        p = self.params
        kv = T.concat([T.scale(instruction_tokens, self.arch.instruction_gain),
                       visual_tokens], axis=0)
        attended = _attention(p["queries"], kv, p, "cross", self.arch.heads,
                              self.arch.attn_sharpness)
        h = T.layer_norm(attended)
        return T.reshape(T.matmul(h, p["head"]), (self.arch.feature_len,))


class SurrogateModel:
    """Vision encoder + instruction embedder + projector: M(x, p)."""

    def __init__(self, vision: VisionEncoder, text: TextEncoder, projector: Projector):
        if vision.arch.dim != projector.arch.dim or text.arch.dim != projector.arch.dim:
            raise ContractError("component embed dims disagree")
        self.vision = vision
        self.text = text
        self.projector = projector

    @classmethod
    def from_seed(cls, seed: int,
                  vision_arch: VisionArch = VisionArch(),
                  text_arch: TextArch = TextArch(),
                  projector_arch: ProjectorArch = ProjectorArch(),
                  vision_seed: Optional[int] = None) -> "SurrogateModel":
        """Build all three components from child seeds of ``seed``.

        ``vision_seed`` overrides the derived vision seed; passing the
        victim's vision seed gives the gray-box shared-encoder setup.
        """
        return cls(
            VisionEncoder(vision_seed if vision_seed is not None
                          else derive_seed(seed, 0), vision_arch),
            TextEncoder(derive_seed(seed, 1), text_arch),
            Projector(derive_seed(seed, 2), projector_arch),
        )

    @property
    def feature_len(self) -> int:
        return self.projector.arch.feature_len

    @property
    def image_size(self) -> int:
        return self.vision.arch.image_size

    def features(self, x: T.Tensor, instruction: str) -> T.Tensor:
        """Instruction-aware features of the image, length queries*dim."""
        if not instruction:
            raise ContractError("surrogate features need a non-empty instruction")
        return self.projector.project(self.vision.encode(x),
                                      self.text.token_matrix(instruction))


class AlignPair:
    """Aligned-style image/text embedding pair (f, g); both outputs are
    unit-normalized vectors of the shared embed dim."""

    def __init__(self, vision: VisionEncoder, head_seed: int, g: TextEncoder):
        if vision.arch.dim != g.arch.dim:
            raise ContractError("image and text embed dims disagree")
        self.vision = vision
        self.g = g
        self.head_seed = head_seed
        self.params = init_params(head_seed,
                                  {"head": (vision.arch.dim, vision.arch.dim)})

    @classmethod
    def from_seed(cls, seed: int,
                  vision_arch: VisionArch = VisionArch(),
                  text_arch: TextArch = TextArch(),
                  vision_seed: Optional[int] = None) -> "AlignPair":
        return cls(
            VisionEncoder(vision_seed if vision_seed is not None
                          else derive_seed(seed, 0), vision_arch),
            derive_seed(seed, 1),
            TextEncoder(derive_seed(seed, 2), text_arch),
        )

    @property
    def dim(self) -> int:
        return self.vision.arch.dim

    def image_embedding(self, x: T.Tensor) -> T.Tensor:
        """f(x): unit vector, differentiable w.r.t. the image."""
        pooled = T.reshape(T.narrow(self.vision.encode(x), 0, 0, 1), (1, self.dim))
        return T.l2_normalize(T.reshape(T.matmul(pooled, self.params["head"]),
                                        (self.dim,)))

    def text_embedding(self, text: str) -> T.Tensor:
        """g(t): unit vector; empty text yields the sentinel embedding."""
        return T.l2_normalize(self.g.embed(text))


# -- parameter export / import -------------------------------------------------

def _component_params(model) -> dict:
    """Flat name -> Tensor map for a component or composite model."""
    if hasattr(model, "params"):
        flat = dict(model.params)
    else:
        flat = {}
    if isinstance(model, SurrogateModel):
        for prefix, comp in (("vision", model.vision), ("text", model.text),
                             ("projector", model.projector)):
            flat.update({f"{prefix}/{k}": v for k, v in comp.params.items()})
    elif isinstance(model, AlignPair):
        for prefix, comp in (("vision", model.vision), ("g", model.g)):
            flat.update({f"{prefix}/{k}": v for k, v in comp.params.items()})
    return flat


def _arch_descriptor(model) -> dict:
    if isinstance(model, SurrogateModel):
        return {"kind": "surrogate",
                "vision": asdict(model.vision.arch),
                "text": asdict(model.text.arch),
                "projector": asdict(model.projector.arch)}
    if isinstance(model, AlignPair):
        return {"kind": "align_pair",
                "vision": asdict(model.vision.arch),
                "text": asdict(model.g.arch)}
    return {"kind": type(model).__name__.lower(), "arch": asdict(model.arch)}


def _model_seed(model) -> int:
    return getattr(model, "seed", getattr(model, "head_seed", 0))


def export_params(model, path) -> None:
    """Write parameters as a one-line JSON header plus a float64 blob."""
    flat = _component_params(model)
    header = {
        "format": PARAMS_FORMAT,
        "seed": _model_seed(model),
        "arch": _arch_descriptor(model),
        "shapes": [[name, list(t.shape)] for name, t in flat.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, t in flat.items():
            fh.write(t.data.astype("<f8").tobytes(order="C"))


def import_params(model, path) -> None:
    """Load a parameter blob saved by :func:`export_params` into ``model``.

    The architecture descriptor and shape table must match exactly.
    """
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable parameter header in {path}: {exc}") from exc
    if header.get("format") != PARAMS_FORMAT:
        raise DataError(f"unknown parameter format {header.get('format')!r}")
    if header.get("arch") != _arch_descriptor(model):
        raise DataError("parameter file architecture does not match the model")
    flat = _component_params(model)
    expected = [[name, list(t.shape)] for name, t in flat.items()]
    if header.get("shapes") != expected:
        raise DataError("parameter file shape table does not match the model")
    offset = 0
    loaded = {}
    for name, shape in header["shapes"]:
        count = int(np.prod(shape))
        chunk = blob[offset: offset + 8 * count]
        if len(chunk) != 8 * count:
            raise DataError(f"parameter blob truncated at entry {name!r}")
        loaded[name] = T.Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape))
        offset += 8 * count
    if offset != len(blob):
        raise DataError("parameter blob has trailing bytes")
    for name, tens in loaded.items():
        comp, _, pname = name.rpartition("/")
        target = model
        if comp:
            attr = {"vision": "vision", "text": "text",
                    "projector": "projector", "g": "g"}[comp]
            target = getattr(model, attr)
        target.params[pname] = tens
