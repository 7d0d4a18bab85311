"""The full ranking model: parameters, forward pass, scorer and checkpoints."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import CODE_FIELDS, PAD, LengthConfig
from .encoder import encode_code, encode_description
from .matching import POOL_AXES, relevance_match, semantic_match

HEADS = ("rm", "sm")
WIDTHS = (1, 2, 3)


@dataclass(frozen=True)
class ModelConfig:
    code_vocab_size: int
    desc_vocab_size: int
    dim: int = 100
    hidden: int = 256
    lengths: LengthConfig = field(default_factory=LengthConfig)
    fields: tuple = CODE_FIELDS
    widths: tuple = WIDTHS
    heads: tuple = HEADS
    relevance_pool_axis: str = "code_column"
    dropout: float = 0.25
    embed_init: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if not self.fields or any(f not in CODE_FIELDS for f in self.fields):
            raise ValueError(f"fields must be a non-empty subset of {CODE_FIELDS}, got {self.fields}")
        if not self.widths or any(h not in WIDTHS for h in self.widths):
            raise ValueError(f"widths must be a non-empty subset of {WIDTHS}, got {self.widths}")
        if not self.heads or any(h not in HEADS for h in self.heads):
            raise ValueError(f"heads must be a non-empty subset of {HEADS}, got {self.heads}")
        if self.relevance_pool_axis not in POOL_AXES:
            raise ValueError(f"relevance_pool_axis must be one of {POOL_AXES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.dim < 1 or self.hidden < 1:
            raise ValueError("dim and hidden must be positive")

    @property
    def desc_length(self):
        """m: rows of the description feature matrix."""
        return len(self.widths) * self.lengths.description

    @property
    def code_length(self):
        """n: rows of the code feature matrix."""
        return len(self.widths) * sum(self.lengths.of(f) for f in self.fields)

    @property
    def scorer_input(self):
        width = 0
        if "rm" in self.heads:
            rm = self.code_length if self.relevance_pool_axis == "code_column" else self.desc_length
            width += 2 * rm
        if "sm" in self.heads:
            width += 2 * self.dim
        return width

    def parameter_shapes(self):
        """Ordered name -> shape for every learnable tensor."""
        d = self.dim
        shapes = {"emb_code": (self.code_vocab_size, d), "emb_desc": (self.desc_vocab_size, d)}
        for f in ("description",) + tuple(self.fields):
            for h in self.widths:
                shapes[f"conv_{f}_{h}_w"] = (h, d, d)
                shapes[f"conv_{f}_{h}_b"] = (d,)
        if "sm" in self.heads:
            shapes["coattn_W"] = (d, d)
        shapes["mlp_w1"] = (self.scorer_input, self.hidden)
        shapes["mlp_b1"] = (self.hidden,)
        shapes["mlp_w2"] = (self.hidden, 2)
        shapes["mlp_b2"] = (2,)
        return shapes

    def to_manifest(self):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "lengths":
                for k, v in asdict(value).items():
                    out[f"length_{k}"] = str(v)
            elif isinstance(value, tuple):
                out[f.name] = ",".join(str(v) for v in value)
            else:
                out[f.name] = str(value)
        return out

    @classmethod
    def from_manifest(cls, entries):
        lengths = LengthConfig(**{k: int(entries[f"length_{k}"])
                                  for k in ("description", "name", "api", "tokens")})
        return cls(
            code_vocab_size=int(entries["code_vocab_size"]),
            desc_vocab_size=int(entries["desc_vocab_size"]),
            dim=int(entries["dim"]),
            hidden=int(entries["hidden"]),
            lengths=lengths,
            fields=tuple(entries["fields"].split(",")),
            widths=tuple(int(h) for h in entries["widths"].split(",")),
            heads=tuple(entries["heads"].split(",")),
            relevance_pool_axis=entries["relevance_pool_axis"],
            dropout=float(entries["dropout"]),
            embed_init=float(entries.get("embed_init", 1.0)),
            dtype=entries["dtype"],
        )


def init_parameters(config, seed=0):
    """Seeded initialisation, in the fixed order of ``parameter_shapes``.

    Embeddings are normal with standard deviation ``embed_init``; weight matrices and filters are
    Glorot uniform; biases start at zero.
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in config.parameter_shapes().items():
        if name.startswith("emb_"):
            data = rng.normal(0.0, config.embed_init, size=shape)
        elif name.endswith("_b") or name.startswith("mlp_b"):
            data = np.zeros(shape)
        else:
            # Glorot uniform; a conv filter's receptive field scales both fans
            field_size = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
            fan_in, fan_out = field_size * shape[-2], field_size * shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = T.Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


@dataclass
class Batch:
    """Id matrices for a batch of (description, code) pairs."""
    desc: np.ndarray
    name: np.ndarray
    api: np.ndarray
    tokens: np.ndarray
    labels: np.ndarray = None

    def __len__(self):
        return self.desc.shape[0]

    def code(self, f):
        return getattr(self, f)

    @classmethod
    def from_corpus(cls, corpus, desc_rows, code_rows, labels=None):
        return cls(corpus.desc[desc_rows], corpus.name[code_rows], corpus.api[code_rows],
                   corpus.tokens[code_rows], None if labels is None else np.asarray(labels))

    @classmethod
    def from_pairs(cls, pairs):
        return cls(np.stack([p.desc_ids for p in pairs]), np.stack([p.name_ids for p in pairs]),
                   np.stack([p.api_ids for p in pairs]), np.stack([p.tok_ids for p in pairs]),
                   np.array([p.label for p in pairs]))


class CsrsModel:
    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = init_parameters(config, seed) if params is None else dict(params)
        self._check_shapes()

    def _check_shapes(self):
        expected = self.config.parameter_shapes()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != tuple(shape):
                raise ValueError(f"parameter {name!r} has shape {self.params[name].shape}, "
                                 f"config expects {shape}")

    @property
    def parameter_count(self):
        return sum(p.data.size for p in self.params.values())

    # -- forward pieces ----------------------------------------------------
    def encode_description(self, desc_ids, mask=None):
        return encode_description(self.params, desc_ids, self.config.widths, mask)

    def encode_code(self, code_ids, masks=None):
        for f in self.config.fields:
            m = np.asarray(code_ids[f]) != PAD if masks is None else np.asarray(masks[f], dtype=bool)
            if not np.all(m.any(axis=-1)):
                raise ValueError(f"code field {f!r} consists only of padding")
        return encode_code(self.params, code_ids, self.config.fields, self.config.widths, masks)

    def features(self, D, mask_D, C, mask_C):
        """The concatenated matching feature vector o, (..., scorer_input)."""
        parts = []
        if "rm" in self.config.heads:
            rm = relevance_match(D, mask_D, C, mask_C, self.config.relevance_pool_axis)
            parts += [rm.o_max, rm.o_mean]
        if "sm" in self.config.heads:
            sm = semantic_match(D, mask_D, C, mask_C, self.params["coattn_W"])
            parts += [sm.o_desc, sm.o_code]
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)

    def scorer(self, o, train=False, rng=None):
        p = self.params
        o = T.dropout(o, self.config.dropout, train, rng)
        hidden = T.relu(T.add(T.matmul(o, p["mlp_w1"]), p["mlp_b1"]))
        return T.add(T.matmul(hidden, p["mlp_w2"]), p["mlp_b2"])

    def forward(self, batch, train=False, rng=None, masks=None):
        """Two-class logits (B, 2) for a :class:`Batch`.

        ``masks`` optionally overrides the id-derived masks (field -> bool array).
        """
        code_ids = {f: batch.code(f) for f in self.config.fields}
        D, mask_D = self.encode_description(batch.desc, None if masks is None else masks["description"])
        C, mask_C = self.encode_code(code_ids, None if masks is None else masks)
        o = self.features(D, mask_D, C, mask_C)
        return self.scorer(o, train, rng)

    def loss(self, batch, train=True, rng=None):
        return T.cross_entropy(self.forward(batch, train, rng), batch.labels)

    def score(self, batch):
        """Match probabilities and logits without recording a graph."""
        with T.no_grad():
            logits = self.forward(batch, train=False).data
        return T.softmax_probs(logits.astype(np.float64))[:, 1], logits

    def score_pair(self, pair, train=False, rng=None):
        """Score one :class:`~csrs.corpus.EncodedPair`; returns (p_match, logits)."""
        batch = Batch.from_pairs([pair])
        if train:
            logits = self.forward(batch, train=True, rng=rng).data
        else:
            with T.no_grad():
                logits = self.forward(batch).data
        return float(T.softmax_probs(logits.astype(np.float64))[0, 1]), logits[0]

    def score_matrix(self, corpus, desc_rows, code_rows, chunk=256):
        """Probabilities for aligned row pairs, evaluated in fixed-size chunks.

        Description and code matrices are encoded once per distinct row, then
        only the matching heads and scorer run per pair.
        """
        desc_rows = np.asarray(desc_rows, dtype=np.int64)
        code_rows = np.asarray(code_rows, dtype=np.int64)
        out = np.empty(len(desc_rows), dtype=np.float64)
        with T.no_grad():
            uniq_d, inv_d = np.unique(desc_rows, return_inverse=True)
            uniq_c, inv_c = np.unique(code_rows, return_inverse=True)
            D_all, mD_all = self._encode_rows_desc(corpus, uniq_d, chunk)
            C_all, mC_all = self._encode_rows_code(corpus, uniq_c, chunk)
            for lo in range(0, len(desc_rows), chunk):
                sl = slice(lo, lo + chunk)
                D = T.Tensor(D_all[inv_d[sl]])
                C = T.Tensor(C_all[inv_c[sl]])
                o = self.features(D, mD_all[inv_d[sl]], C, mC_all[inv_c[sl]])
                logits = self.scorer(o).data
                out[sl] = T.softmax_probs(logits.astype(np.float64))[:, 1]
        return out

    def _encode_rows_desc(self, corpus, rows, chunk):
        mats, masks = [], []
        for lo in range(0, len(rows), chunk):
            D, m = self.encode_description(corpus.desc[rows[lo:lo + chunk]])
            mats.append(D.data)
            masks.append(m)
        return np.concatenate(mats), np.concatenate(masks)

    def _encode_rows_code(self, corpus, rows, chunk):
        mats, masks = [], []
        for lo in range(0, len(rows), chunk):
            r = rows[lo:lo + chunk]
            C, m = self.encode_code({f: corpus.code(f)[r] for f in self.config.fields})
            mats.append(C.data)
            masks.append(m)
        return np.concatenate(mats), np.concatenate(masks)

    # -- persistence ---------------------------------------------------------
    def state(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            self.params[k].data[...] = v

    def save(self, path, extra=None):
        save_checkpoint(path, self, extra)

    @classmethod
    def load(cls, path, expect=None):
        return load_checkpoint(path, expect)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
# <path>          binary: b"CSRSCKPT", u32 version, u32 count, then per tensor
#                 u32 name_len, name (utf-8), u32 ndim, u32 dims..., float32 LE data
# <path>.manifest key=value text: hyperparameters and one "param.<name>=<shape>" per tensor

MAGIC = b"CSRSCKPT"
VERSION = 1


def manifest_path(path):
    return Path(str(path) + ".manifest")


def save_checkpoint(path, model, extra=None):
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(model.params)))
        for name, p in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    lines = [f"{k}={v}" for k, v in model.config.to_manifest().items()]
    lines += [f"param.{name}={'x'.join(map(str, p.shape))}" for name, p in model.params.items()]
    for k, v in (extra or {}).items():
        lines.append(f"extra.{k}={v}")
    manifest_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    entries = {}
    for line in manifest_path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    return entries


def read_tensors(path):
    tensors = {}
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape)
            tensors[name] = data
    return tensors


def load_checkpoint(path, expect=None):
    """Load a checkpoint; shapes are validated against its manifest config.

    ``expect`` optionally names a :class:`ModelConfig` the checkpoint must match.
    """
    config = ModelConfig.from_manifest(read_manifest(path))
    if expect is not None and expect != config:
        diffs = [f.name for f in fields(config) if getattr(config, f.name) != getattr(expect, f.name)]
        raise ValueError(f"checkpoint config differs from expected in: {', '.join(diffs)}")
    raw = read_tensors(path)
    dtype = np.dtype(config.dtype)
    params = {name: T.Tensor(np.array(v, dtype=dtype), requires_grad=True, name=name)
              for name, v in raw.items()}
    return CsrsModel(config, params)


def variant_config(base, variant):
    """Config for one of the ablation variants of ``base``."""
    changes = VARIANTS.get(variant)
    if changes is None:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    return replace(base, **changes)


VARIANTS = {
    "full": {},
    "RM": {"heads": ("rm",)},
    "SM": {"heads": ("sm",)},
    "M": {"fields": ("name",)},
    "A": {"fields": ("api",)},
    "T": {"fields": ("tokens",)},
    "Conv1": {"widths": (1,)},
    "Conv2": {"widths": (2,)},
    "Conv3": {"widths": (3,)},
}


def config_for_vocabs(code_vocab, desc_vocab, **kw):
    return ModelConfig(code_vocab_size=len(code_vocab), desc_vocab_size=len(desc_vocab), **kw)
