"""Model A (concatenation fusion) and Model B (cascaded attention fusion).

Both variants share the same pieces::

    image [512] --proj--> x [H]             (one query)
    question tokens [L, 512] --proj--> [L, H]  (keys/values)
    triples [T, 300] --proj--> [T, H]

    block(x, kv) = LN2(h + MLP(h)),  h = LN1(x + MHA(x, kv)),  MLP = Linear-ReLU-Linear

Model A runs one block (image over question), mean-pools the projected
triples and classifies ``[fused ; pooled]``. Model B runs a second block in
which the fused vector attends over the projected triples; a sample without
triples skips that block entirely.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

VARIANTS = ("A", "B")
MAGIC = b"KLITE1"


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    hidden_dim: int
    answer_vocab_size: int
    image_dim: int = 512
    question_dim: int = 512
    knowledge_dim: int = 300
    num_heads: int = 8
    ffn_dim: int | None = None
    max_triples: int = 5
    name: str = field(default="", compare=False)

    def __post_init__(self):
        v = str(self.variant).upper()
        if v not in VARIANTS:
            raise ValueError(f"variant must be A or B, got {self.variant!r}")
        object.__setattr__(self, "variant", v)
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", self.hidden_dim)
        for f in ("hidden_dim", "image_dim", "question_dim", "knowledge_dim", "num_heads",
                  "ffn_dim", "max_triples"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"num_heads={self.num_heads} does not divide hidden_dim={self.hidden_dim}")
        if self.answer_vocab_size < 2:
            raise ValueError("answer_vocab_size must be >= 2")

    @property
    def attention(self) -> tc.AttentionConfig:
        return tc.AttentionConfig(self.hidden_dim, self.num_heads)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known) - {"description"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)

    def with_vocab(self, n: int) -> "ModelConfig":
        return replace(self, answer_vocab_size=n)


PRESETS = ("model-a-vqa", "model-b-daquar", "model-a-synth", "model-b-synth")


def load_preset(name: str) -> ModelConfig:
    try:
        text = resources.files("krisplite.data.presets").joinpath(f"{name}.json").read_text("utf-8")
    except FileNotFoundError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    d = json.loads(text)
    d.setdefault("name", name)
    return ModelConfig.from_dict(d)


# ---------------------------------------------------------------- parameters

def _block_shapes(prefix: str, h: int, f: int) -> list[tuple[str, tuple]]:
    shapes = []
    for p in ("q", "k", "v", "o"):
        shapes += [(f"{prefix}.w{p}", (h, h)), (f"{prefix}.b{p}", (h,))]
    shapes += [(f"{prefix}.ln1.gain", (h,)), (f"{prefix}.ln1.bias", (h,)),
               (f"{prefix}.mlp.w1", (h, f)), (f"{prefix}.mlp.b1", (f,)),
               (f"{prefix}.mlp.w2", (f, h)), (f"{prefix}.mlp.b2", (h,)),
               (f"{prefix}.ln2.gain", (h,)), (f"{prefix}.ln2.bias", (h,))]
    return shapes


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Declared parameter order: projections, attention blocks, classifier head."""
    h, f = cfg.hidden_dim, cfg.ffn_dim
    shapes = [
        ("image_proj.w", (cfg.image_dim, h)), ("image_proj.b", (h,)),
        ("question_proj.w", (cfg.question_dim, h)), ("question_proj.b", (h,)),
        ("knowledge_proj.w", (cfg.knowledge_dim, h)), ("knowledge_proj.b", (h,)),
    ]
    shapes += _block_shapes("stage1", h, f)
    if cfg.variant == "B":
        shapes += _block_shapes("stage2", h, f)
    head_in = 2 * h if cfg.variant == "A" else h
    shapes += [("head.w", (head_in, cfg.answer_vocab_size)), ("head.b", (cfg.answer_vocab_size,))]
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Trainable scalars, counted analytically (see docs/parameter_budgets.md)."""
    h, f, v = cfg.hidden_dim, cfg.ffn_dim, cfg.answer_vocab_size
    projections = (cfg.image_dim + cfg.question_dim + cfg.knowledge_dim) * h + 3 * h
    attention = 4 * (h * h + h)
    mlp = h * f + f + f * h + h
    norms = 2 * 2 * h
    block = attention + mlp + norms
    if cfg.variant == "A":
        return projections + block + 2 * h * v + v
    return projections + 2 * block + h * v + v


class ModelParams:
    """Named parameter tensors in declared order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    @property
    def size(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({n: tc.parameter(t.data.astype(dtype), n) for n, t in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def prefixed(self, prefix: str) -> dict[str, Tensor]:
        cut = len(prefix) + 1
        return {n[cut:]: t for n, t in self.tensors.items() if n.startswith(prefix + ".")}


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gain":
            data = np.ones(shape)
        elif len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = tc.parameter(data.astype(dtype), name)
    return ModelParams(tensors)


# ---------------------------------------------------------------- forward

@dataclass
class ForwardOutput:
    logits: np.ndarray
    stage1_attention: np.ndarray
    stage2_attention: np.ndarray | None = None


@dataclass
class BatchOutput:
    logits: Tensor
    stage1_weights: Tensor
    stage2_weights: Tensor | None
    has_knowledge: np.ndarray


def _block(params: ModelParams, prefix: str, x: Tensor, kv: Tensor, mask, cfg: ModelConfig):
    p = params.prefixed(prefix)
    attended, weights = tc.multi_head_attention(x, kv, p, cfg.attention, mask)
    h = tc.layer_norm(tc.add(x, attended), p["ln1.gain"], p["ln1.bias"])
    m = tc.linear(tc.relu(tc.linear(h, p["mlp.w1"], p["mlp.b1"])), p["mlp.w2"], p["mlp.b2"])
    return tc.layer_norm(tc.add(h, m), p["ln2.gain"], p["ln2.bias"]), weights


def _check_dim(name: str, arr: np.ndarray, axis_len: int):
    if arr.shape[-1] != axis_len:
        raise tc.ShapeError(f"{name} has feature dim {arr.shape[-1]}, config expects {axis_len}")


def forward_batch(params: ModelParams, cfg: ModelConfig, images, question_tokens, question_mask,
                  knowledge, knowledge_mask) -> BatchOutput:
    """Batched forward pass.

    images [B, image_dim]; question_tokens [B, L, question_dim] with
    question_mask [B, L]; knowledge [B, T, knowledge_dim] with
    knowledge_mask [B, T]. Every question row needs one unmasked token.
    """
    dtype = params.dtype
    images = np.asarray(images, dtype=dtype)
    qtok = np.asarray(question_tokens, dtype=dtype)
    qmask = np.asarray(question_mask, dtype=bool)
    know = np.asarray(knowledge, dtype=dtype)
    kmask = np.asarray(knowledge_mask, dtype=bool)
    _check_dim("image", images, cfg.image_dim)
    _check_dim("question", qtok, cfg.question_dim)
    _check_dim("knowledge", know, cfg.knowledge_dim)
    b = images.shape[0]
    if qtok.shape[0] != b or know.shape[0] != b or qmask.shape != qtok.shape[:2] \
            or kmask.shape != know.shape[:2]:
        raise tc.ShapeError("batch inputs disagree on batch size or mask shape")
    if know.shape[1] == 0:
        know = np.zeros((b, 1, cfg.knowledge_dim), dtype=dtype)
        kmask = np.zeros((b, 1), dtype=bool)
    has_k = kmask.any(axis=1)
    h = cfg.hidden_dim

    x = tc.linear(Tensor(images[:, None, :]), params["image_proj.w"], params["image_proj.b"])
    q = tc.linear(Tensor(qtok), params["question_proj.w"], params["question_proj.b"])
    fused, w1 = _block(params, "stage1", x, q, qmask, cfg)

    w2 = None
    if cfg.variant == "A":
        kp = tc.linear(Tensor(know), params["knowledge_proj.w"], params["knowledge_proj.b"])
        pooled = tc.masked_mean(kp, kmask)
        z = tc.concat([tc.reshape(fused, (b, h)), pooled], axis=-1)
    else:
        if has_k.any():
            kp = tc.linear(Tensor(know), params["knowledge_proj.w"], params["knowledge_proj.b"])
            safe = kmask.copy()
            safe[~has_k, 0] = True  # result discarded below; keeps softmax defined
            refined, w2 = _block(params, "stage2", fused, kp, safe, cfg)
            fused = tc.where(has_k[:, None, None], refined, fused)
        z = tc.reshape(fused, (b, h))
    logits = tc.linear(z, params["head.w"], params["head.b"])
    return BatchOutput(logits, w1, w2, has_k)


def _single(params, cfg, image_vec, question, knowledge_vecs) -> ForwardOutput:
    question = np.asarray(question)
    if question.ndim == 1:
        question = question[None, :]
    if len(knowledge_vecs):
        kvecs = np.atleast_2d(np.asarray(knowledge_vecs, dtype=np.float64))
        _check_dim("knowledge", kvecs, cfg.knowledge_dim)
    else:
        kvecs = np.zeros((0, cfg.knowledge_dim))
    if kvecs.shape[0] > cfg.max_triples:
        raise ValueError(f"{kvecs.shape[0]} triples exceed max_triples={cfg.max_triples}")
    n = kvecs.shape[0]
    out = forward_batch(params, cfg, np.asarray(image_vec)[None], question[None],
                        np.ones((1, question.shape[0]), bool), kvecs[None], np.ones((1, n), bool))
    s1 = out.stage1_weights.data[0].mean(axis=0)  # [1, L] averaged over heads
    s2 = None
    if out.stage2_weights is not None and n:
        s2 = out.stage2_weights.data[0].mean(axis=0)[:, :n]
    return ForwardOutput(out.logits.data[0].copy(), s1, s2)


def forward_model_a(image_vec, question, knowledge_vecs: Sequence, params: ModelParams,
                    cfg: ModelConfig) -> ForwardOutput:
    """Single-sample Model A. ``question`` is a vector or a [L, dim] token matrix."""
    if cfg.variant != "A":
        raise ValueError("forward_model_a needs a variant A config")
    return _single(params, cfg, image_vec, question, knowledge_vecs)


def forward_model_b(image_vec, question, knowledge_vecs: Sequence, params: ModelParams,
                    cfg: ModelConfig) -> ForwardOutput:
    """Single-sample Model B; with no triples the second stage is an identity."""
    if cfg.variant != "B":
        raise ValueError("forward_model_b needs a variant B config")
    return _single(params, cfg, image_vec, question, knowledge_vecs)


def forward(image_vec, question, knowledge_vecs, params, cfg) -> ForwardOutput:
    return _single(params, cfg, image_vec, question, knowledge_vecs)


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointSizeError(CheckpointError):
    pass


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path) -> None:
    """``KLITE1`` | u32 LE config length | config JSON | float32 LE tensors in declared order."""
    shapes = param_shapes(cfg)
    if [n for n, _ in shapes] != list(params):
        raise CheckpointError("parameter names do not match the config layout")
    header = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name, shape in shapes:
            data = params[name].data
            if data.shape != shape:
                raise CheckpointError(f"{name}: shape {data.shape} != {shape}")
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise TruncatedCheckpointError(f"{path}: truncated before config length")
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + n:
        raise TruncatedCheckpointError(f"{path}: truncated inside config header")
    try:
        cfg = ModelConfig.from_dict(json.loads(raw[pos:pos + n].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable config header ({exc})") from None
    pos += n
    expected = param_count(cfg) * 4
    if len(raw) - pos != expected:
        raise CheckpointSizeError(
            f"{path}: {len(raw) - pos} parameter bytes, config needs {expected}")
    tensors = {}
    for name, shape in param_shapes(cfg):
        size = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).astype(np.float32).reshape(shape)
        tensors[name] = tc.parameter(arr, name)
        pos += size * 4
    return ModelParams(tensors), cfg
