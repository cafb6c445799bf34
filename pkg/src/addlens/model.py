"""One-layer decoder-only transformer with hook sites and ablation support."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .datagen import VOCAB_SIZE, seq_len
from .numerics import Tensor

SITES = ("resid_post", "head_out", "pattern", "mlp_post")
ABLATABLE_SITES = ("resid_post", "head_out")
MIN_MEAN_QUESTIONS = 64


@dataclass(frozen=True)
class ModelConfig:
    n_digits: int = 5
    n_heads: int = 3
    d_model: int = 192
    d_mlp: int = 768
    vocab_size: int = VOCAB_SIZE
    plus_prefix: bool = False
    layer_norm: bool = True
    seed: int = 0
    init_scale: float = 0.02

    def __post_init__(self):
        if self.n_digits < 1:
            raise ValueError("n_digits must be >= 1")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_ctx(self) -> int:
        return seq_len(self.n_digits, self.plus_prefix)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ActivationCache:
    resid_pre: np.ndarray
    pattern: np.ndarray
    head_out: np.ndarray
    resid_mid: np.ndarray
    mlp_post: np.ndarray
    resid_post: np.ndarray
    logits: np.ndarray

    def __getitem__(self, site: str) -> np.ndarray:
        return getattr(self, site)

    def squeeze(self) -> "ActivationCache":
        return ActivationCache(**{k: v[0] for k, v in asdict(self).items()})


@dataclass
class MeanStats:
    """Per-position means of ablatable activations over a question set."""

    resid_post: np.ndarray  # [L, d_model]
    head_out: np.ndarray  # [L, n_heads, d_head]
    count: int

    def __getitem__(self, site: str) -> np.ndarray:
        return getattr(self, site)


@dataclass(frozen=True)
class InterventionSpec:
    site: str
    positions: frozenset[int] = field(default_factory=frozenset)
    heads: frozenset[int] | None = None
    mode: str = "zero"
    mean_source: MeanStats | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "positions", frozenset(int(p) for p in self.positions))
        if self.heads is not None:
            object.__setattr__(self, "heads", frozenset(int(h) for h in self.heads))
        if self.site not in ABLATABLE_SITES:
            raise ValueError(f"cannot intervene on site {self.site!r}; choose from {ABLATABLE_SITES}")
        if self.mode not in ("zero", "mean"):
            raise ValueError(f"unknown ablation mode {self.mode!r}")
        if self.site == "resid_post" and self.heads is not None:
            raise ValueError("a head set only applies to the head_out site")
        if self.mode == "mean" and self.mean_source is None:
            raise ValueError("mean ablation needs mean_source (see collect_mean_activations)")

    def validate(self, cfg: ModelConfig, length: int) -> None:
        bad = [p for p in self.positions if not 0 <= p < cfg.n_ctx]
        if bad:
            raise ValueError(f"positions {sorted(bad)} outside [0, {cfg.n_ctx})")
        if self.heads is not None:
            bad = [h for h in self.heads if not 0 <= h < cfg.n_heads]
            if bad:
                raise ValueError(f"heads {sorted(bad)} outside [0, {cfg.n_heads})")
        if self.mode == "mean":
            src = self.mean_source[self.site]
            if src.shape[0] < length:
                raise ValueError(f"mean_source covers {src.shape[0]} positions, need {length}")

    def mask_and_values(self, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        """Boolean mask and replacement values broadcastable to ``shape`` ([B, L, ...])."""
        length = shape[1]
        pos = np.zeros(length, dtype=bool)
        pos[[p for p in self.positions if p < length]] = True
        if self.site == "head_out":
            heads = np.ones(shape[2], dtype=bool)
            if self.heads is not None:
                heads[:] = False
                heads[list(self.heads)] = True
            mask = (pos[:, None] & heads[None, :])[None, :, :, None]
        else:
            mask = pos[None, :, None]
        if self.mode == "zero":
            values = np.zeros((1,) + tuple(shape[1:]))
        else:
            values = self.mean_source[self.site][None, :length]
        return mask, values


def _interventions(specs) -> list[InterventionSpec]:
    if specs is None:
        return []
    if isinstance(specs, InterventionSpec):
        return [specs]
    return list(specs)


PARAM_ORDER = (
    "W_E", "W_pos",
    "ln1_w", "ln1_b", "W_Q", "b_Q", "W_K", "b_K", "W_V", "b_V", "W_O", "b_O",
    "ln2_w", "ln2_b", "W_in", "b_in", "W_out", "b_out",
    "lnf_w", "lnf_b", "W_U", "b_U",
)
NO_DECAY = {"ln1_w", "ln1_b", "ln2_w", "ln2_b", "lnf_w", "lnf_b",
            "b_Q", "b_K", "b_V", "b_O", "b_in", "b_out", "b_U"}


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Seeded normal init; std is ``init_scale * sqrt(d_model / fan_in)``, biases zero."""
    rng = np.random.default_rng(cfg.seed)
    d, hd, m, v = cfg.d_model, cfg.n_heads * cfg.d_head, cfg.d_mlp, cfg.vocab_size

    def w(rows, cols, fan_in):
        return rng.normal(0.0, cfg.init_scale * np.sqrt(d / fan_in), size=(rows, cols))

    shapes = {
        "W_E": w(v, d, d), "W_pos": w(cfg.n_ctx, d, d),
        "ln1_w": np.ones(d), "ln1_b": np.zeros(d),
        "W_Q": w(d, hd, d), "b_Q": np.zeros(hd),
        "W_K": w(d, hd, d), "b_K": np.zeros(hd),
        "W_V": w(d, hd, d), "b_V": np.zeros(hd),
        "W_O": w(hd, d, hd), "b_O": np.zeros(d),
        "ln2_w": np.ones(d), "ln2_b": np.zeros(d),
        "W_in": w(d, m, d), "b_in": np.zeros(m),
        "W_out": w(m, d, m), "b_out": np.zeros(d),
        "lnf_w": np.ones(d), "lnf_b": np.zeros(d),
        "W_U": w(d, v, d), "b_U": np.zeros(v),
    }
    return {k: Tensor(shapes[k], requires_grad=True, name=k) for k in PARAM_ORDER}


class TransformerModel:
    """Embed, one attention block, one ReLU MLP, unembed; residual around both."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, step: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        self.step = step
        self._mask = nx.causal_mask(cfg.n_ctx)

    def __repr__(self) -> str:
        return f"TransformerModel({self.cfg}, step={self.step})"

    # -------------------------------------------------------------- forward

    def _ln(self, x: Tensor, which: str) -> Tensor:
        if not self.cfg.layer_norm:
            return x
        p = self.params
        return nx.layer_norm(x, p[f"{which}_w"], p[f"{which}_b"])

    def run(self, tokens, interventions=None, cache: bool = False):
        """Differentiable forward pass on ``tokens`` ``[B, L]`` (or ``[L]``).

        Returns ``(logits Tensor, cache or None)``. The cache holds plain arrays.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        cfg, p = self.cfg, self.params
        B, L = tokens.shape
        if L > cfg.n_ctx:
            raise ValueError(f"sequence length {L} exceeds n_ctx={cfg.n_ctx}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
        specs = _interventions(interventions)
        for s in specs:
            s.validate(cfg, L)
        H, dh = cfg.n_heads, cfg.d_head

        resid_pre = nx.embedding(p["W_E"], tokens) + p["W_pos"][:L]
        h = self._ln(resid_pre, "ln1")

        def heads(W, b):
            return nx.transpose((h @ p[W] + p[b]).reshape(B, L, H, dh), (0, 2, 1, 3))

        q, k, v = heads("W_Q", "b_Q"), heads("W_K", "b_K"), heads("W_V", "b_V")
        scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        pattern = nx.softmax_masked(scores, self._mask[:L, :L])
        z = nx.transpose(nx.matmul(pattern, v), (0, 2, 1, 3))  # [B, L, H, dh]
        for s in specs:
            if s.site == "head_out":
                z = nx.replace(z, *s.mask_and_values(z.shape))
        attn_out = z.reshape(B, L, H * dh) @ p["W_O"] + p["b_O"]
        resid_mid = resid_pre + attn_out

        mlp_post = nx.relu(self._ln(resid_mid, "ln2") @ p["W_in"] + p["b_in"])
        resid_post = resid_mid + (mlp_post @ p["W_out"] + p["b_out"])
        for s in specs:
            if s.site == "resid_post":
                resid_post = nx.replace(resid_post, *s.mask_and_values(resid_post.shape))
        logits = self.unembed(resid_post)

        act = None
        if cache:
            act = ActivationCache(resid_pre.data, pattern.data, z.data, resid_mid.data,
                                  mlp_post.data, resid_post.data, logits.data)
            if single:
                act = act.squeeze()
        if single:
            logits = logits[0]
        return logits, act

    def unembed(self, resid_post: Tensor) -> Tensor:
        p = self.params
        return self._ln(nx.as_tensor(resid_post), "lnf") @ p["W_U"] + p["b_U"]

    def forward(self, tokens, with_cache: bool = False):
        with nx.no_grad():
            logits, act = self.run(tokens, cache=with_cache)
        return (logits.data, act) if with_cache else logits.data

    def forward_with_intervention(self, tokens, spec) -> np.ndarray:
        with nx.no_grad():
            logits, _ = self.run(tokens, interventions=spec)
        return logits.data

    def attention_patterns(self, tokens) -> np.ndarray:
        return self.forward(tokens, with_cache=True)[1].pattern

    def collect_mean_activations(self, tokens) -> MeanStats:
        """Per-position means of resid_post and head_out over a token batch."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ValueError("need a non-empty [N, L] batch of equal-length sequences")
        _, act = self.forward(tokens, with_cache=True)
        return MeanStats(act.resid_post.mean(axis=0), act.head_out.mean(axis=0), tokens.shape[0])

    # -------------------------------------------------------------- io

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "TransformerModel":
        return load_checkpoint(path)


def collect_mean_activations(model: TransformerModel, questions: Sequence) -> MeanStats:
    """Means over a list of :class:`~addlens.datagen.Question` (all the same length)."""
    from .datagen import tokenize_batch

    if not questions:
        raise ValueError("need at least one question")
    return model.collect_mean_activations(tokenize_batch(questions, model.cfg.plus_prefix))


def mean_stats_over(model: TransformerModel, token_batches: Iterable[np.ndarray]) -> MeanStats:
    sums, count = None, 0
    for batch in token_batches:
        m = model.collect_mean_activations(batch)
        w = m.count
        sums = ((m.resid_post * w, m.head_out * w) if sums is None
                else (sums[0] + m.resid_post * w, sums[1] + m.head_out * w))
        count += w
    if not count:
        raise ValueError("no batches")
    return MeanStats(sums[0] / count, sums[1] / count, count)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ADDLENS1"


def save_checkpoint(model: TransformerModel, path, extra: dict | None = None) -> None:
    """JSON header followed by named little-endian float64 blobs.

    Layout: 8-byte magic, uint64 LE header length, UTF-8 JSON header, blobs.
    """
    tensors, offset = [], 0
    for name in PARAM_ORDER:
        arr = model.params[name].data
        nbytes = arr.size * 8
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format": "addlens-checkpoint",
        "version": 1,
        "dtype": "<f8",
        "config": asdict(model.cfg),
        "seed": model.cfg.seed,
        "step": model.step,
        "tensors": tensors,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for name in PARAM_ORDER:
            fh.write(np.ascontiguousarray(model.params[name].data, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path} is not an addlens checkpoint")
        (size,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(size))


def load_checkpoint(path) -> TransformerModel:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path} is not an addlens checkpoint")
    (size,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + size])
    base = 16 + size
    cfg = ModelConfig.from_dict(header["config"])
    params = {}
    for t in header["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=t["nbytes"] // 8, offset=base + t["offset"])
        params[t["name"]] = Tensor(arr.reshape(t["shape"]).astype(np.float64), requires_grad=True,
                                   name=t["name"])
    missing = set(PARAM_ORDER) - set(params)
    if missing:
        raise ValueError(f"checkpoint lacks tensors {sorted(missing)}")
    return TransformerModel(cfg, params, step=header["step"])
