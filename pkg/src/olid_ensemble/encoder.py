"""Transformer encoder (two toy-scale variants) with MLM, regression and classification heads.

Variant ``A`` mirrors BERT at desk scale: segment embeddings and static MLM
masking.  Variant ``B`` mirrors RoBERTa: no segment table, dynamic masking.
Residual blocks use post-layer-norm ordering.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tokenizer import PAD, EncodedSequence

HEAD_KINDS = ("none", "mlm", "regression", "classification")
INIT_STD = 0.02


class HeadError(RuntimeError):
    """Raised when an operation needs a head the model does not carry."""


@dataclass(frozen=True)
class EncoderConfig:
    variant: str = "A"
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 128
    vocab_size: int = 2000
    max_positions: int = 128
    dropout: float = 0.1
    use_segment_embeddings: bool = True
    masking_policy: str = "static"

    def __post_init__(self):
        if self.variant not in ("A", "B"):
            raise ValueError(f"variant must be 'A' or 'B', got {self.variant!r}")
        for name in ("hidden", "layers", "heads", "ffn", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.masking_policy not in ("static", "dynamic"):
            raise ValueError(f"unknown masking policy {self.masking_policy!r}")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> EncoderConfig:
        base = dict(variant=variant,
                    use_segment_embeddings=variant == "A",
                    masking_policy="static" if variant == "A" else "dynamic")
        base.update(overrides)
        return cls(**base)


def _head_shapes(config: EncoderConfig, kind: str) -> dict:
    h = config.hidden
    return {
        "none": {},
        "mlm": {"head.weight": (config.vocab_size, h), "head.bias": (config.vocab_size,)},
        "regression": {"head.weight": (1, h), "head.bias": (1,)},
        "classification": {"head.weight": (2, h), "head.bias": (2,)},
    }[kind]


def parameter_shapes(config: EncoderConfig, head: str = "none") -> dict:
    """Ordered name -> shape map; the order is the checkpoint order."""
    h, f = config.hidden, config.ffn
    shapes = {
        "embeddings.token": (config.vocab_size, h),
        "embeddings.position": (config.max_positions, h),
    }
    if config.use_segment_embeddings:
        shapes["embeddings.segment"] = (2, h)
    shapes["embeddings.ln.gain"] = (h,)
    shapes["embeddings.ln.bias"] = (h,)
    for i in range(config.layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn.qkv.weight": (3 * h, h), p + "attn.qkv.bias": (3 * h,),
            p + "attn.out.weight": (h, h), p + "attn.out.bias": (h,),
            p + "ln1.gain": (h,), p + "ln1.bias": (h,),
            p + "ffn.in.weight": (f, h), p + "ffn.in.bias": (f,),
            p + "ffn.out.weight": (h, f), p + "ffn.out.bias": (h,),
            p + "ln2.gain": (h,), p + "ln2.bias": (h,),
        })
    shapes.update(_head_shapes(config, head))
    return shapes


def parameter_count(config: EncoderConfig, head: str = "none") -> int:
    return sum(math.prod(s) for s in parameter_shapes(config, head).values())


def _init_param(name: str, shape, rng: RngStream) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    return rng.fork("init", name).truncated_normal(shape, INIT_STD)


class EncoderModel:
    def __init__(self, config: EncoderConfig, params: dict, head: str = "none"):
        if head not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {head!r}")
        self.config = config
        self.head = head
        self.params = params

    def parameters(self) -> list:
        return list(self.params.values())

    def encoder_parameters(self) -> dict:
        return {k: v for k, v in self.params.items() if not k.startswith("head.")}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def __getitem__(self, name) -> T.Tensor:
        return self.params[name]

    def forward(self, ids, mask, segments=None, mode: str = "eval", rng: RngStream | None = None,
                return_attention: bool = False):
        """Batched encoder pass: ids/mask [B, S] -> hidden [B, S, H].

        Query rows attend only to key columns with mask 1; PAD columns get
        weight exactly 0.
        """
        cfg, P = self.config, self.params
        ids = np.asarray(ids)
        mask = np.asarray(mask, dtype=bool)
        b, s = ids.shape
        if s > cfg.max_positions:
            raise ValueError(f"sequence length {s} exceeds max_positions {cfg.max_positions}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise IndexError(f"token id outside [0, {cfg.vocab_size})")
        p_drop = cfg.dropout
        drop = (lambda x: T.dropout(x, p_drop, mode, rng)) if mode == "train" else (lambda x: x)

        x = T.embedding(P["embeddings.token"], ids) + P["embeddings.position"][:s]
        if cfg.use_segment_embeddings:
            segs = np.zeros_like(ids) if segments is None else np.asarray(segments)
            x = x + T.embedding(P["embeddings.segment"], segs)
        x = drop(T.layer_norm(x, P["embeddings.ln.gain"], P["embeddings.ln.bias"]))

        nh = cfg.heads
        d = cfg.hidden // nh
        scale = 1.0 / math.sqrt(d)
        key_mask = mask[:, None, None, :]
        attention = []
        for i in range(cfg.layers):
            p = f"layers.{i}."
            qkv = T.linear(x, P[p + "attn.qkv.weight"], P[p + "attn.qkv.bias"])
            qkv = T.transpose(T.reshape(qkv, (b, s, 3, nh, d)), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]
            scores = T.matmul(q, T.swap_last(k)) * scale
            probs = T.softmax(scores, axis=-1, where=key_mask)
            if return_attention:
                attention.append(probs.data)
            ctx = T.matmul(drop(probs), v)
            ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, cfg.hidden))
            a = drop(T.linear(ctx, P[p + "attn.out.weight"], P[p + "attn.out.bias"]))
            x = T.layer_norm(x + a, P[p + "ln1.gain"], P[p + "ln1.bias"])
            f = T.gelu(T.linear(x, P[p + "ffn.in.weight"], P[p + "ffn.in.bias"]))
            f = drop(T.linear(f, P[p + "ffn.out.weight"], P[p + "ffn.out.bias"]))
            x = T.layer_norm(x + f, P[p + "ln2.gain"], P[p + "ln2.bias"])
        return (x, attention) if return_attention else x

    def checksum(self) -> str:
        return checkpoint_hash(checkpoint_files(self))


def init_model(config: EncoderConfig, rng: RngStream, head: str = "none") -> EncoderModel:
    params = {name: T.Tensor(_init_param(name, shape, rng), requires_grad=True)
              for name, shape in parameter_shapes(config, head).items()}
    return EncoderModel(config, params, head)


# ---------------------------------------------------------------- batching


def collate(seqs, trim: bool = True):
    """Stack encoded sequences into arrays, optionally trimming shared trailing padding."""
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    mask = np.array([s.attention_mask for s in seqs], dtype=np.int8)
    segs = np.array([s.segment_ids for s in seqs], dtype=np.int64)
    if trim and len(seqs):
        n = int(mask.sum(axis=1).max())
        ids, mask, segs = ids[:, :n], mask[:, :n], segs[:, :n]
    return ids, mask, segs


def encode_sequence(model: EncoderModel, seq: EncodedSequence, mode: str = "eval",
                    rng: RngStream | None = None) -> T.Tensor:
    """Hidden states [max_length, H] for one sequence."""
    ids, mask, segs = collate([seq], trim=False)
    return T.reshape(model.forward(ids, mask, segs, mode, rng), (len(seq), model.config.hidden))


def sentence_representation(hidden: T.Tensor) -> T.Tensor:
    """Final hidden state at the CLS position (row 0); batched input gives [B, H]."""
    return hidden[0] if hidden.ndim == 2 else hidden[:, 0]


def _require(model: EncoderModel, kind: str):
    if model.head != kind:
        raise HeadError(f"operation needs a {kind} head, model carries {model.head!r}")


def mlm_logits(model: EncoderModel, hidden: T.Tensor) -> T.Tensor:
    _require(model, "mlm")
    return T.linear(hidden, model["head.weight"], model["head.bias"])


def regress(model: EncoderModel, rep: T.Tensor) -> T.Tensor:
    """sigmoid(w . rep + b); shape [] for one representation, [B] for a batch."""
    _require(model, "regression")
    out = T.sigmoid(T.linear(rep, model["head.weight"], model["head.bias"]))
    return T.reshape(out, rep.shape[:-1])


def classify(model: EncoderModel, rep: T.Tensor) -> T.Tensor:
    """Two logits: index 0 = NOT, 1 = OFF."""
    _require(model, "classification")
    return T.linear(rep, model["head.weight"], model["head.bias"])


def predict_class(logits) -> np.ndarray:
    """Argmax with ties going to NOT (class 0)."""
    logits = np.asarray(getattr(logits, "data", logits))
    return (logits[..., 1] > logits[..., 0]).astype(np.int64)


def swap_head(model: EncoderModel, new_kind: str, rng: RngStream) -> EncoderModel:
    """Same encoder weights (shared arrays copied bit-exactly), fresh head for ``new_kind``.

    classification -> classification keeps the existing head.
    """
    if new_kind not in HEAD_KINDS:
        raise ValueError(f"unknown head kind {new_kind!r}")
    params = {k: T.Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype)
              for k, v in model.encoder_parameters().items()}
    if new_kind == model.head:
        for k, v in model.params.items():
            if k.startswith("head."):
                params[k] = T.Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype)
    else:
        dtype = model["embeddings.token"].dtype
        for name, shape in _head_shapes(model.config, new_kind).items():
            params[name] = T.Tensor(_init_param(name, shape, rng.fork("head", new_kind)),
                                    requires_grad=True, dtype=dtype)
    return EncoderModel(model.config, params, new_kind)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FILES = ("config.tsv", "manifest.tsv", "weights.bin")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(kind, text: str):
    if kind is bool:
        if text not in ("true", "false"):
            raise ValueError(f"bad boolean {text!r}")
        return text == "true"
    return kind(text)


def weight_files(params: dict) -> dict:
    """Standard weight format: manifest.tsv + little-endian float32 weights.bin."""
    rows, chunks, offset = [], [], 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        shape = "x".join(str(n) for n in t.shape)
        rows.append(f"{name}\t{shape}\t{offset}\n")
        chunks.append(raw)
        offset += len(raw)
    return {"manifest.tsv": "".join(rows).encode(), "weights.bin": b"".join(chunks)}


def read_weights(manifest: bytes, weights: bytes, dtype=None) -> dict:
    params = {}
    for lineno, line in enumerate(manifest.decode().splitlines(), 1):
        try:
            name, shape, offset = line.split("\t")
            shape = tuple(int(n) for n in shape.split("x")) if shape else ()
            offset = int(offset)
        except ValueError:
            raise ValueError(f"manifest.tsv:{lineno}: malformed row {line!r}") from None
        n = math.prod(shape)
        arr = np.frombuffer(weights, dtype="<f4", count=n, offset=offset).reshape(shape)
        params[name] = T.Tensor(arr.copy(), requires_grad=True, dtype=dtype or np.float32)
    return params


def checkpoint_files(model: EncoderModel) -> dict:
    cfg = asdict(model.config)
    cfg["head"] = model.head
    config = "".join(f"{k}\t{_fmt(v)}\n" for k, v in cfg.items()).encode()
    return {"config.tsv": config, **weight_files(model.params)}


def checkpoint_hash(files: dict) -> str:
    h = hashlib.sha256()
    for name in CHECKPOINT_FILES:
        h.update(name.encode() + b"\0" + files[name])
    return h.hexdigest()


def save_checkpoint(model: EncoderModel, directory) -> str:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = checkpoint_files(model)
    for name, data in files.items():
        (directory / name).write_bytes(data)
    return checkpoint_hash(files)


def parse_config(text: str):
    kinds = {f.name: f.type for f in fields(EncoderConfig)}
    types = {"str": str, "int": int, "float": float, "bool": bool}
    values, head = {}, "none"
    for lineno, line in enumerate(text.splitlines(), 1):
        key, sep, val = line.partition("\t")
        if not sep:
            raise ValueError(f"config.tsv:{lineno}: expected key<TAB>value")
        if key == "head":
            head = val
        elif key in kinds:
            values[key] = _parse(types[kinds[key]], val)
        else:
            raise ValueError(f"config.tsv:{lineno}: unknown key {key!r}")
    return EncoderConfig(**values), head


def load_checkpoint(directory, dtype=None) -> EncoderModel:
    directory = Path(directory)
    missing = [n for n in CHECKPOINT_FILES if not (directory / n).is_file()]
    if missing:
        raise FileNotFoundError(f"checkpoint {directory} is missing {', '.join(missing)}")
    config, head = parse_config((directory / "config.tsv").read_text())
    params = read_weights((directory / "manifest.tsv").read_bytes(),
                          (directory / "weights.bin").read_bytes(), dtype)
    expected = parameter_shapes(config, head)
    if list(expected) != list(params) or any(params[k].shape != s for k, s in expected.items()):
        raise ValueError(f"checkpoint {directory}: tensors do not match config")
    return EncoderModel(config, params, head)


def with_dropout(config: EncoderConfig, p: float) -> EncoderConfig:
    return replace(config, dropout=p)


def gradient_check_model(model: EncoderModel, loss_fn, h: float = 1e-4, per_tensor: int | None = 8,
                         rng: RngStream | None = None) -> dict:
    """Worst relative error per parameter between tape and central-difference gradients.

    ``loss_fn(model)`` must return a deterministic scalar Tensor.  At most
    ``per_tensor`` randomly chosen entries of each parameter are perturbed
    (all of them when None).  Meant for 64-bit models built under check_mode.
    """
    rng = rng or RngStream(0)
    model.zero_grad()
    loss_fn(model).backward()
    worst = {}
    for name, p in model.params.items():
        n = p.data.size
        if per_tensor is None or per_tensor >= n:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.fork("gradcheck", name).permutation(n)[:per_tensor])
        numeric = T.numeric_grad(lambda: loss_fn(model), p, h, index=idx).reshape(-1)[idx]
        analytic = np.asarray(p.grad, dtype=np.float64).reshape(-1)[idx]
        worst[name] = float(T.relative_error(analytic, numeric).max())
    return worst
