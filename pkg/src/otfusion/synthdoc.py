"""Synthetic form-like documents for exercising cross-modal fusion.

Each document is a BIO-tagged token sequence laid out on a unit square plus
a grid of visual patches. A configurable fraction of tokens ("ambiguous"
ones) carry token ids that say nothing about their label; for those, the
label is written as a pattern into the signal dimensions of the patch whose
cell contains the token. The rest of the patch vector is i.i.d. noise.
Text-only models therefore hit a hard accuracy ceiling, and closing the gap
requires aligning each token with the right patch.

Tag marginals are kept near uniform so that, on the ambiguous subset, no
text-only classifier can beat chance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ot_align import PositionGrid

TAGS = ("O", "B-Q", "I-Q", "B-A", "I-A", "B-H", "I-H")
TAG_INDEX = {t: i for i, t in enumerate(TAGS)}
ENTITY_CLASSES = ("Q", "A", "H")
PATTERN_GAIN = 2.0
PATTERN_JITTER = 0.1

# One balanced round of segments: 7 tokens, each tag exactly once.
_SEGMENTS = (("O",), ("B-Q", "I-Q"), ("B-A", "I-A"), ("B-H", "I-H"))


class ConfigError(ValueError):
    """A configuration value violates its documented range or schema."""


@dataclass(frozen=True)
class Token:
    token_id: int
    bbox: tuple[float, float, float, float]  # (x0, y0, x1, y1), normalized
    label: str


@dataclass
class SynthDocument:
    doc_id: int
    tokens: list[Token]
    patches: np.ndarray  # (grid_size**2, patch_dim), row-major cells
    grid_size: int
    generator_seed: int

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SynthDocument)
            and self.doc_id == other.doc_id
            and self.tokens == other.tokens
            and self.grid_size == other.grid_size
            and self.generator_seed == other.generator_seed
            and self.patches.shape == other.patches.shape
            and np.array_equal(self.patches, other.patches)
        )


@dataclass
class GeneratorConfig:
    n_docs: int = 512
    tokens_per_doc: tuple[int, int] = (7, 14)
    grid_size: int = 4
    vocab_size: int = 64
    visual_cue_strength: float = 0.5  # fraction of tokens labeled only via their patch
    patch_dim: int = 16
    noise_dims: int = 8
    seed: int = 0

    def validate(self) -> "GeneratorConfig":
        if not (0.0 <= self.visual_cue_strength <= 1.0):
            raise ConfigError(f"visual_cue_strength out of range: {self.visual_cue_strength} not in [0, 1]")
        if self.grid_size < 2:
            raise ConfigError(f"grid_size must be at least 2, got {self.grid_size}")
        if self.n_docs < 1:
            raise ConfigError(f"n_docs must be positive, got {self.n_docs}")
        lo, hi = self.tokens_per_doc
        if not (1 <= lo <= hi):
            raise ConfigError(f"tokens_per_doc range invalid: {self.tokens_per_doc}")
        if hi > self.grid_size**2:
            raise ConfigError(
                f"tokens_per_doc max {hi} exceeds the {self.grid_size**2} grid cells "
                "(every token occupies its own cell)"
            )
        if not (0 <= self.noise_dims <= self.patch_dim - len(TAGS)):
            raise ConfigError(
                f"noise_dims must leave at least {len(TAGS)} signal dims of patch_dim={self.patch_dim}, "
                f"got {self.noise_dims}"
            )
        if self.vocab_size < ambiguous_id_count(self) + len(TAGS):
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small for the label markers: need at least "
                f"{ambiguous_id_count(self) + len(TAGS)}"
            )
        return self


def ambiguous_id_count(config: GeneratorConfig) -> int:
    """Ids below this cutoff are the label-free pool shared by all tags."""
    return max(1, config.vocab_size // 4)


def check_bio_valid(labels: list[str]) -> None:
    """Reject label sequences where I-X does not continue a B-X/I-X run."""
    prev = "O"
    for i, label in enumerate(labels):
        if label not in TAG_INDEX:
            raise ValueError(f"unknown tag {label!r} at position {i}")
        if label.startswith("I-") and prev not in (f"B-{label[2:]}", label):
            raise ValueError(f"BIO violation at position {i}: {label} after {prev}")
        prev = label


def _tag_sequence(rng: np.random.Generator, n_tokens: int) -> list[str]:
    """Balanced 7-token rounds plus a remainder, shuffled at segment level.

    The remainder takes floor(r/2) two-token entities sampled without
    replacement across classes plus one O when r is odd, which keeps the
    corpus tag marginal near uniform; that uniformity is what pins a
    text-only classifier to chance on label-free token ids.
    """
    segments: list[tuple[str, ...]] = []
    remaining = n_tokens
    while remaining >= len(TAGS):
        segments.extend(_SEGMENTS)
        remaining -= len(TAGS)
    extra_classes = [ENTITY_CLASSES[i] for i in rng.permutation(len(ENTITY_CLASSES))]
    for cls in extra_classes[: remaining // 2]:
        segments.append((f"B-{cls}", f"I-{cls}"))
    if remaining % 2 == 1:
        segments.append(("O",))
    tags: list[str] = []
    for seg_idx in rng.permutation(len(segments)):
        tags.extend(segments[seg_idx])
    return tags


def _cell_center(cell: int, grid_size: int) -> tuple[float, float]:
    row, col = divmod(cell, grid_size)
    return (col + 0.5) / grid_size, (row + 0.5) / grid_size


def _generate_one(config: GeneratorConfig, doc_id: int) -> SynthDocument:
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, doc_id)))
    lo, hi = config.tokens_per_doc
    n_tokens = int(rng.integers(lo, hi + 1))
    tags = _tag_sequence(rng, n_tokens)

    cells = rng.permutation(config.grid_size**2)[:n_tokens]
    ambiguous = rng.random(n_tokens) < config.visual_cue_strength

    n_amb = ambiguous_id_count(config)
    plain_ids = np.arange(n_amb, config.vocab_size)
    tag_pools = np.array_split(plain_ids, len(TAGS))

    tokens: list[Token] = []
    for i, tag in enumerate(tags):
        cx, cy = _cell_center(int(cells[i]), config.grid_size)
        jx, jy = rng.uniform(-0.15, 0.15, 2) / config.grid_size
        w, h = rng.uniform(0.3, 0.6, 2) / config.grid_size
        x0, y0 = float(cx + jx - w / 2), float(cy + jy - h / 2)
        w, h = float(w), float(h)
        if ambiguous[i]:
            token_id = int(rng.integers(0, n_amb))
        else:
            pool = tag_pools[TAG_INDEX[tag]]
            token_id = int(pool[rng.integers(0, len(pool))])
        tokens.append(Token(token_id=token_id, bbox=(x0, y0, x0 + w, y0 + h), label=tag))

    signal_dims = config.patch_dim - config.noise_dims
    patches = np.zeros((config.grid_size**2, config.patch_dim))
    patches[:, :signal_dims] = rng.normal(0.0, PATTERN_JITTER, (len(patches), signal_dims))
    patches[:, signal_dims:] = rng.normal(0.0, 1.0, (len(patches), config.noise_dims))
    for i, tag in enumerate(tags):
        if ambiguous[i]:
            patches[int(cells[i]), TAG_INDEX[tag]] += PATTERN_GAIN

    return SynthDocument(
        doc_id=doc_id,
        tokens=tokens,
        patches=patches,
        grid_size=config.grid_size,
        generator_seed=config.seed,
    )


def generate(config: GeneratorConfig) -> list[SynthDocument]:
    """Deterministic document list; each document draws from its own seed stream."""
    config.validate()
    return [_generate_one(config, doc_id) for doc_id in range(config.n_docs)]


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------


def _doc_to_obj(doc: SynthDocument) -> dict:
    return {
        "doc_id": doc.doc_id,
        "seed": doc.generator_seed,
        "tokens": [{"id": t.token_id, "bbox": list(t.bbox), "label": t.label} for t in doc.tokens],
        "patches": doc.patches.tolist(),
    }


def _doc_from_obj(obj: dict) -> SynthDocument:
    tokens = []
    for k, t in enumerate(obj["tokens"]):
        bbox = tuple(float(v) for v in t["bbox"])
        if len(bbox) != 4:
            raise ValueError(f"tokens[{k}].bbox must have 4 coordinates")
        x0, y0, x1, y1 = bbox
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"tokens[{k}].bbox invalid: {bbox}")
        tokens.append(Token(token_id=int(t["id"]), bbox=bbox, label=str(t["label"])))
    check_bio_valid([t.label for t in tokens])
    patches = np.asarray(obj["patches"], dtype=np.float64)
    if patches.ndim != 2:
        raise ValueError("patches must be a list of equal-length vectors")
    grid = math.isqrt(patches.shape[0])
    if grid * grid != patches.shape[0]:
        raise ValueError(f"patches count {patches.shape[0]} is not a square grid")
    return SynthDocument(
        doc_id=int(obj["doc_id"]),
        tokens=tokens,
        patches=patches,
        grid_size=grid,
        generator_seed=int(obj["seed"]),
    )


def save_jsonl(docs: list[SynthDocument], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(_doc_to_obj(doc)) + "\n")


def load_jsonl(path) -> list[SynthDocument]:
    docs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                docs.append(_doc_from_obj(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return docs


# ---------------------------------------------------------------------------
# Feature encoding
# ---------------------------------------------------------------------------


@dataclass
class EncoderParams:
    """Learnable toy encoder: id embedding plus linear maps to shared width."""

    embedding: Tensor  # (vocab, embed_dim)
    w_tokens: Tensor  # (embed_dim + 4 + pos_dims, d)
    b_tokens: Tensor  # (1, d)
    w_patches: Tensor  # (patch_dim + 2, d)
    b_patches: Tensor  # (1, d)
    pos_dims: int


@dataclass
class EncodedDocument:
    """Fixed-length view of one document: padded features, mask, targets."""

    tokens: Tensor  # (L, d); zero rows where mask is 0
    patches: Tensor  # (M, d)
    mask: np.ndarray  # (L,)
    targets: np.ndarray  # (L,), -1 on padding
    positions: PositionGrid  # real tokens only


def init_encoder_params(
    vocab_size: int,
    patch_dim: int,
    d: int,
    rng: np.random.Generator,
    embed_dim: int = 16,
    pos_dims: int = 8,
) -> EncoderParams:
    raw_t = embed_dim + 4 + pos_dims
    raw_v = patch_dim + 2
    return EncoderParams(
        embedding=Tensor(rng.normal(0.0, 1.0, (vocab_size, embed_dim)), requires_grad=True),
        w_tokens=Tensor(rng.normal(0.0, 1.0 / math.sqrt(raw_t), (raw_t, d)), requires_grad=True),
        b_tokens=Tensor(np.zeros((1, d)), requires_grad=True),
        w_patches=Tensor(rng.normal(0.0, 1.0 / math.sqrt(raw_v), (raw_v, d)), requires_grad=True),
        b_patches=Tensor(np.zeros((1, d)), requires_grad=True),
        pos_dims=pos_dims,
    )


def _sinusoid(n: int, dims: int) -> np.ndarray:
    out = np.zeros((n, dims))
    idx = np.arange(n)[:, None]
    for k in range(dims // 2):
        freq = 1.0 / (10000.0 ** (2.0 * k / dims))
        out[:, 2 * k] = np.sin(idx[:, 0] * freq)
        out[:, 2 * k + 1] = np.cos(idx[:, 0] * freq)
    return out


def doc_positions(doc: SynthDocument) -> PositionGrid:
    """Token box centers and patch cell centers, both in the unit square."""
    centers = np.array([[(t.bbox[0] + t.bbox[2]) / 2.0, (t.bbox[1] + t.bbox[3]) / 2.0] for t in doc.tokens])
    cells = np.array([_cell_center(c, doc.grid_size) for c in range(doc.grid_size**2)])
    return PositionGrid(centers.reshape(len(doc.tokens), 2), cells)


def encode_features(doc: SynthDocument, params: EncoderParams) -> tuple[Tensor, Tensor, PositionGrid, np.ndarray]:
    """Project one document to (token features, patch features) of shared width.

    Token rows combine the id embedding, the four box coordinates, and a
    sinusoidal sequence position; patch rows combine the raw patch vector and
    its cell center. Both pass through their learnable linear map.
    """
    n = len(doc.tokens)
    positions = doc_positions(doc)
    ids = np.array([t.token_id for t in doc.tokens], dtype=np.intp)
    if n and ids.max() >= params.embedding.values.shape[0]:
        raise ValueError(
            f"token id {ids.max()} outside embedding table of {params.embedding.values.shape[0]} ids"
        )
    boxes = np.array([t.bbox for t in doc.tokens]).reshape(n, 4)
    raw_extra = np.concatenate([boxes, _sinusoid(n, params.pos_dims)], axis=1)
    emb = ad.take_rows(params.embedding, ids)
    tokens = ad.add(ad.matmul(ad.concat([emb, Tensor(raw_extra)], axis=1), params.w_tokens), params.b_tokens)

    raw_patches = np.concatenate([doc.patches, positions.pos_patches], axis=1)
    patches = ad.add(ad.matmul(Tensor(raw_patches), params.w_patches), params.b_patches)

    targets = np.array([TAG_INDEX[t.label] for t in doc.tokens], dtype=np.intp)
    return tokens, patches, positions, targets


def encode(doc: SynthDocument, params: EncoderParams, max_len: int, allow_truncation: bool = True) -> EncodedDocument:
    """Fixed-length encoding: pad with zero rows (mask 0) or truncate to max_len."""
    if len(doc.tokens) > max_len:
        if not allow_truncation:
            raise ValueError(f"document has {len(doc.tokens)} tokens, limit is {max_len}")
        doc = replace(doc, tokens=doc.tokens[:max_len])
    n = len(doc.tokens)
    d = params.w_tokens.values.shape[1]
    if n == 0:
        m = doc.grid_size**2
        raw_patches = np.concatenate(
            [doc.patches, np.array([_cell_center(c, doc.grid_size) for c in range(m)])], axis=1
        )
        patches = ad.add(ad.matmul(Tensor(raw_patches), params.w_patches), params.b_patches)
        return EncodedDocument(
            tokens=Tensor(np.zeros((max_len, d))),
            patches=patches,
            mask=np.zeros(max_len),
            targets=np.full(max_len, -1, dtype=np.intp),
            positions=PositionGrid(np.zeros((0, 2)), np.array([_cell_center(c, doc.grid_size) for c in range(m)])),
        )
    tokens, patches, positions, targets = encode_features(doc, params)
    if n < max_len:
        tokens = ad.concat([tokens, Tensor(np.zeros((max_len - n, d)))], axis=0)
    mask = np.zeros(max_len)
    mask[:n] = 1.0
    padded_targets = np.full(max_len, -1, dtype=np.intp)
    padded_targets[:n] = targets
    return EncodedDocument(tokens=tokens, patches=patches, mask=mask, targets=padded_targets, positions=positions)
