"""Structured annotations, canonical text rendering, and the text encoder.

Annotations are rendered to a small closed language ("scene with 2
objects. car at 3.40 7.10 size 4.50 1.80 yaw 1.57. ...") whose
vocabulary ships with the package.  Digits are tokenized per character;
detokenization is exact on every rendered string.  A two-block
transformer encoder maps token sequences to 512-d semantic vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import nn
from .autodiff import Tensor, concat, index_select, mean, relu, reshape

CLASS_NAMES = ("barrier", "bus", "car", "cyclist", "pedestrian", "truck")
STRUCTURE_WORDS = ("scene", "with", "objects", "at", "size", "yaw")
PAD_TOKEN = "<pad>"
NUM_CAMERAS = 6

TEXT_WIDTH = 64
TEXT_BLOCKS = 2
TEXT_HEADS = 2
TEXT_FF = 128
EMBED_DIM = 512
MAX_TEXT_LEN = 112


class OutOfVocabularyError(ValueError):
    """Raised when text contains a token outside the closed vocabulary."""


def build_vocabulary() -> list:
    """Canonical token list; the shipped vocab file is this, one per line."""
    digits = tuple(str(d) for d in range(10))
    return [PAD_TOKEN, *STRUCTURE_WORDS, *CLASS_NAMES, *digits, ".", "-"]


def load_vocabulary() -> list:
    raw = resources.files("fmqs.data").joinpath("vocab.txt").read_text(encoding="utf-8")
    return raw.splitlines()


@dataclass
class SceneObject:
    class_name: str
    center: tuple
    size: tuple
    yaw: float | None = None


@dataclass
class GroundTruthRecord:
    """One annotation: scene-level (camera_id None, yaw set) or per-camera."""

    sample_id: int
    camera_id: int | None
    objects: list = field(default_factory=list)

    @staticmethod
    def from_dict(d: dict) -> "GroundTruthRecord":
        objs = [
            SceneObject(
                class_name=o["class"],
                center=tuple(o["center"]),
                size=tuple(o["size"]),
                yaw=o.get("yaw"),
            )
            for o in d.get("objects", [])
        ]
        return GroundTruthRecord(d["sample"], d.get("camera"), objs)

    def to_dict(self) -> dict:
        out = {"sample": self.sample_id, "objects": []}
        if self.camera_id is not None:
            out["camera"] = self.camera_id
        for o in self.objects:
            entry = {"class": o.class_name, "center": list(o.center), "size": list(o.size)}
            if o.yaw is not None:
                entry["yaw"] = o.yaw
            out["objects"].append(entry)
        return out


def render_template(rec: GroundTruthRecord) -> str:
    """Deterministic sentence for a record: fixed field order, two-decimal
    numbers, objects sorted by (class, center x, center y)."""
    for obj in rec.objects:
        if obj.class_name not in CLASS_NAMES:
            raise OutOfVocabularyError(f"unknown class name: {obj.class_name!r}")
    parts = [f"scene with {len(rec.objects)} objects."]
    ordered = sorted(rec.objects, key=lambda o: (o.class_name, o.center[0], o.center[1]))
    for obj in ordered:
        nums = " ".join(f"{v:.2f}" for v in obj.center)
        dims = " ".join(f"{v:.2f}" for v in obj.size)
        clause = f"{obj.class_name} at {nums} size {dims}"
        if obj.yaw is not None:
            clause += f" yaw {obj.yaw:.2f}"
        parts.append(clause + ".")
    return " ".join(parts)


@dataclass
class Vocabulary:
    tokens: list

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id = self.index[PAD_TOKEN]

    @property
    def size(self) -> int:
        return len(self.tokens)


_VOCAB = None


def default_vocabulary() -> Vocabulary:
    global _VOCAB
    if _VOCAB is None:
        _VOCAB = Vocabulary(load_vocabulary())
    return _VOCAB


@dataclass
class TokenizedText:
    ids: np.ndarray  # fixed length, pad-filled tail
    length: int
    vocab_size: int


def _lex(text: str, vocab: Vocabulary) -> list:
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == " ":
            i += 1
            continue
        if ch.isalpha():
            j = i
            while j < n and text[j].isalpha():
                j += 1
            word = text[i:j]
            if word not in vocab.index:
                raise OutOfVocabularyError(f"unknown word: {word!r}")
            tokens.append(word)
            i = j
        elif ch.isdigit() or ch in ".-":
            tokens.append(ch)
            i += 1
        else:
            raise OutOfVocabularyError(f"unknown character: {ch!r}")
    return tokens


def tokenize(text: str, max_len: int = MAX_TEXT_LEN,
             vocab: Vocabulary | None = None) -> TokenizedText:
    """Closed-vocabulary tokenization padded to a fixed length."""
    vocab = vocab or default_vocabulary()
    toks = _lex(text, vocab)
    if len(toks) > max_len:
        raise ValueError(f"text needs {len(toks)} tokens, max_len is {max_len}")
    ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    for i, t in enumerate(toks):
        ids[i] = vocab.index[t]
    return TokenizedText(ids=ids, length=len(toks), vocab_size=vocab.size)


def detokenize(tok: TokenizedText, vocab: Vocabulary | None = None) -> str:
    """Exact inverse of tokenize on the template language."""
    vocab = vocab or default_vocabulary()
    toks = [vocab.tokens[t] for t in tok.ids[: tok.length]]
    parts = []
    i = 0
    n = len(toks)
    while i < n:
        t = toks[i]
        if t == ".":
            # sentence punctuation attaches to the previous part
            if not parts:
                raise ValueError("dangling period")
            parts[-1] += "."
            i += 1
        elif t.isdigit() or t == "-":
            num = ""
            if t == "-":
                num = "-"
                i += 1
            while i < n and toks[i].isdigit():
                num += toks[i]
                i += 1
            # a period is a decimal point iff a digit follows (renderer
            # always emits exactly two decimals)
            if i + 1 < n and toks[i] == "." and toks[i + 1].isdigit():
                num += "."
                i += 1
                for _ in range(2):
                    num += toks[i]
                    i += 1
            parts.append(num)
        else:
            parts.append(t)
            i += 1
    return " ".join(parts)


class TextEncoder:
    """Token embedding + positions + transformer blocks + mean-pool + projection."""

    def __init__(self, vocab_size: int, max_len: int, seed: int = 0,
                 width: int = TEXT_WIDTH, blocks: int = TEXT_BLOCKS,
                 heads: int = TEXT_HEADS, ff_dim: int = TEXT_FF,
                 out_dim: int = EMBED_DIM):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E47]))
        self.width = width
        self.heads = heads
        self.max_len = max_len
        self.token_emb = nn.normal_init((vocab_size, width), 0.02, rng)
        self.pos_emb = nn.normal_init((max_len, width), 0.02, rng)
        self.blocks = []
        for _ in range(blocks):
            blk = {
                "ln1_g": Tensor(np.ones(width), requires_grad=True),
                "ln1_b": nn.zeros_init(width),
                "qkv_w": nn.kaiming_uniform((3 * width, width), width, rng),
                "qkv_b": nn.zeros_init(3 * width),
                "attn_w": nn.kaiming_uniform((width, width), width, rng),
                "attn_b": nn.zeros_init(width),
                "ln2_g": Tensor(np.ones(width), requires_grad=True),
                "ln2_b": nn.zeros_init(width),
                "ff1_w": nn.kaiming_uniform((ff_dim, width), width, rng),
                "ff1_b": nn.zeros_init(ff_dim),
                "ff2_w": nn.kaiming_uniform((width, ff_dim), ff_dim, rng),
                "ff2_b": nn.zeros_init(width),
            }
            self.blocks.append(blk)
        self.final_g = Tensor(np.ones(width), requires_grad=True)
        self.final_b = nn.zeros_init(width)
        self.proj_w = nn.kaiming_uniform((out_dim, width), width, rng)
        self.proj_b = nn.zeros_init(out_dim)

    def parameters(self) -> list:
        named = self.named_parameters()
        return [t for _, t in named]

    def named_parameters(self) -> list:
        named = [("token_emb", self.token_emb), ("pos_emb", self.pos_emb)]
        for i, blk in enumerate(self.blocks):
            for key in ("ln1_g", "ln1_b", "qkv_w", "qkv_b", "attn_w", "attn_b",
                        "ln2_g", "ln2_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b"):
                named.append((f"block{i}.{key}", blk[key]))
        named.extend([("final_g", self.final_g), ("final_b", self.final_b),
                      ("proj_w", self.proj_w), ("proj_b", self.proj_b)])
        return named

    def _encode_ids(self, ids: np.ndarray) -> Tensor:
        """ids: (B, L) without padding; returns (B, out_dim)."""
        B, L = ids.shape
        if ids.size and ids.max() >= self.token_emb.data.shape[0]:
            raise ValueError(f"token id {ids.max()} out of range")
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds positional table {self.max_len}")
        x = nn.embedding(self.token_emb, ids) + index_select(self.pos_emb, 0, np.arange(L))
        W = self.width
        for blk in self.blocks:
            h = nn.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            qkv = nn.linear(h, blk["qkv_w"], blk["qkv_b"])  # (B, L, 3W)
            q = index_select(qkv, 2, np.arange(0, W))
            k = index_select(qkv, 2, np.arange(W, 2 * W))
            v = index_select(qkv, 2, np.arange(2 * W, 3 * W))
            x = x + nn.attention_block(q, k, v, self.heads, blk["attn_w"], blk["attn_b"])
            h = nn.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
            h = nn.linear(relu(nn.linear(h, blk["ff1_w"], blk["ff1_b"])),
                          blk["ff2_w"], blk["ff2_b"])
            x = x + h
        pooled = mean(x, axis=1)
        pooled = nn.layer_norm(pooled, self.final_g, self.final_b)
        return nn.linear(pooled, self.proj_w, self.proj_b)

    def encode(self, tok: TokenizedText) -> Tensor:
        """Single sequence -> (out_dim,) vector."""
        return reshape(self.encode_batch([tok]), (-1,))

    def encode_batch(self, toks: list) -> Tensor:
        """Encode sequences of arbitrary lengths; returns (n, out_dim).

        Sequences are grouped by exact unpadded length so no padding ever
        enters attention; results are reassembled in input order.
        """
        if not toks:
            raise ValueError("empty batch")
        lengths = [max(t.length, 1) for t in toks]
        order = {}
        for i, L in enumerate(lengths):
            order.setdefault(L, []).append(i)
        chunks = []
        positions = []
        for L in sorted(order):
            idxs = order[L]
            ids = np.stack([toks[i].ids[:L] for i in idxs])
            chunks.append(self._encode_ids(ids))
            positions.extend(idxs)
        stacked = chunks[0] if len(chunks) == 1 else concat(chunks, axis=0)
        inverse = np.argsort(np.array(positions))
        if np.array_equal(inverse, np.arange(len(toks))):
            return stacked
        return index_select(stacked, 0, inverse)
