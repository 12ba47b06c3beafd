"""Model backends producing gamma+1 logit vectors per forward position.

Two backends share one forward contract:

* :class:`TinyTransformer` - a small rotary-attention transformer (MHA or
  GQA) with weight-shared input/output embeddings and gamma residual draft
  heads: h_i = f_i(h_{i-1}) + h_{i-1}, l_i = g(h_i). Weights come from a
  named deterministic PRNG stream; there is no training.
* :class:`TableLM` - an exact oracle mapping a context suffix to a full
  next-token distribution, with programmable draft-head output. It drives
  engine tests where every distribution must be known in closed form.

A forward processes rows strictly one at a time, and every row's attention
reduces over one contiguous (visible_len, kv_heads, head_dim) operand. That
makes the logits of a token bit-identical whether it was reached by plain
autoregressive decoding, batched prefill, or a masked tree-verification
forward, which the engine's losslessness guarantee rests on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .kvcache import CacheBuffer, FullCache


class PositionOverflow(ValueError):
    """A requested position is at or beyond max_positions."""


class MaskShapeMismatch(ValueError):
    """Attention mask dimensions disagree with inputs plus cache length."""


class DimensionMismatch(ValueError):
    """Draft head weight shapes are incompatible with the hidden size."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    num_kv_heads: int = 4
    gamma: int = 3
    max_positions: int = 65536
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_size <= 0 or self.num_layers <= 0 or self.hidden_dim <= 0:
            raise ValueError("vocab_size, num_layers and hidden_dim must be positive")
        if self.num_heads <= 0 or self.num_kv_heads <= 0 or self.max_positions <= 0:
            raise ValueError("head counts and max_positions must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.num_heads % self.num_kv_heads != 0:
            raise ValueError("num_heads must be a multiple of num_kv_heads")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be a multiple of num_heads")
        if (self.hidden_dim // self.num_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary encoding")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def group_size(self) -> int:
        return self.num_heads // self.num_kv_heads


@dataclass
class LogitBundle:
    """gamma+1 logit vectors, index 0 for the next position, i for +i ahead."""

    logits: np.ndarray  # (gamma + 1, vocab)

    def __post_init__(self) -> None:
        if self.logits.ndim != 2:
            raise ValueError("logits must be (gamma + 1, vocab)")


@dataclass
class ForwardRequest:
    tokens: list[int]
    positions: list[int]
    cache: FullCache | CacheBuffer
    attention_mask: np.ndarray | None = None  # (T, cache_len + T) bool
    heads_needed: int | None = None  # compute only the first h head logits


@dataclass
class ForwardResult:
    bundles: np.ndarray  # (T, gamma + 1, vocab)
    queries: np.ndarray  # (T, num_layers, num_heads, head_dim), pre-rotation


def chained_draft_logits(
    h0: np.ndarray, head_mats: Sequence[np.ndarray], lm_head: np.ndarray,
) -> np.ndarray:
    """Residually chained draft-head logits.

    h_i = f_i(h_{i-1}) + h_{i-1} for i in 1..gamma, l_i = g(h_i) with the
    shared lm_head g; l_0 = g(h_0). The heads are chained, not independent.
    """
    d = h0.shape[-1]
    if lm_head.ndim != 2 or lm_head.shape[1] != d:
        raise DimensionMismatch(f"lm_head must be (vocab, {d}), got {lm_head.shape}")
    hs = [h0]
    for i, f in enumerate(head_mats):
        if f.shape != (d, d):
            raise DimensionMismatch(f"head {i + 1} must be ({d}, {d}), got {f.shape}")
        hs.append(hs[-1] @ f + hs[-1])
    return np.stack([np.einsum("vd,d->v", lm_head, h) for h in hs])


def _validate_request(req: ForwardRequest, max_positions: int) -> int:
    if not req.tokens:
        raise ValueError("forward request must contain at least one token")
    if len(req.tokens) != len(req.positions):
        raise ValueError("tokens and positions must have equal length")
    for p in req.positions:
        if p >= max_positions:
            raise PositionOverflow(f"position {p} >= max_positions {max_positions}")
    ctx = len(req.cache)
    if req.attention_mask is not None:
        want = (len(req.tokens), ctx + len(req.tokens))
        if req.attention_mask.shape != want:
            raise MaskShapeMismatch(
                f"mask shape {req.attention_mask.shape}, expected {want}"
            )
        if not req.attention_mask[:, :ctx].all():
            raise ValueError("cache entries must be visible to every row")
        for r in range(len(req.tokens)):
            if not req.attention_mask[r, ctx + r]:
                raise ValueError("every row must attend to itself")
    return ctx


def _row_ancestors(mask: np.ndarray, ctx: int, row: int) -> list[int]:
    return [j for j in range(row) if mask[row, ctx + j]]


class TinyTransformer:
    """Pre-norm rotary transformer over float64 numpy, decode-oriented.

    The LM head is weight-shared with the input embedding. Keys enter the
    cache pre-rotation; rotation angles are the visible-rank positions
    supplied with the request, so evicted caches can reassign positions.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        c = config
        self.inv_freq = 10000.0 ** (-np.arange(0, c.head_dim, 2) / c.head_dim)
        self.params = params if params is not None else self._init_params()
        self._scale = 1.0 / np.sqrt(c.head_dim)
        p = self.params
        self._layer_p = [
            tuple(p[f"l{i}.{name}"] for name in ("ln1", "wq", "wk", "wv", "wo", "ln2", "w1", "w2"))
            for i in range(c.num_layers)
        ]
        self._head_mats = [p[f"head{i + 1}"] for i in range(c.gamma)]

    # -- parameters -------------------------------------------------------

    def _param_specs(self) -> list[tuple[str, tuple[int, ...], float]]:
        c = self.config
        d, H, Hk, dh = c.hidden_dim, c.num_heads, c.num_kv_heads, c.head_dim
        specs: list[tuple[str, tuple[int, ...], float]] = [
            ("embed", (c.vocab_size, d), 0.3),
        ]
        for i in range(c.num_layers):
            specs += [
                (f"l{i}.ln1", (d,), 0.0),
                (f"l{i}.wq", (d, H * dh), d ** -0.5),
                (f"l{i}.wk", (d, Hk * dh), d ** -0.5),
                (f"l{i}.wv", (d, Hk * dh), d ** -0.5),
                (f"l{i}.wo", (H * dh, d), (H * dh) ** -0.5),
                (f"l{i}.ln2", (d,), 0.0),
                (f"l{i}.w1", (d, 4 * d), d ** -0.5),
                (f"l{i}.w2", (4 * d, d), (4 * d) ** -0.5),
            ]
        specs.append(("ln_f", (d,), 0.0))
        for i in range(c.gamma):
            specs.append((f"head{i + 1}", (d, d), 0.3 * d ** -0.5))
        return specs

    def _init_params(self) -> dict[str, np.ndarray]:
        params = {}
        for idx, (name, shape, scale) in enumerate(self._param_specs()):
            if scale == 0.0:  # norm gains
                params[name] = np.ones(shape)
            else:
                rng = np.random.default_rng(
                    np.random.SeedSequence(entropy=self.config.init_seed, spawn_key=(idx,))
                )
                params[name] = rng.normal(0.0, scale, size=shape)
        return params

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(name, self.params[name]) for name, _, _ in self._param_specs()]

    # -- building blocks --------------------------------------------------

    def new_cache(self) -> FullCache:
        c = self.config
        return FullCache(c.num_layers, c.num_kv_heads, c.head_dim)

    def rope_rows(self, rows: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Rotate (n, heads, head_dim) rows by per-row positions."""
        ang = np.asarray(positions, dtype=float)[:, None] * self.inv_freq[None, :]
        cos, sin = np.cos(ang)[:, None, :], np.sin(ang)[:, None, :]
        x1, x2 = rows[..., 0::2], rows[..., 1::2]
        out = np.empty_like(rows)
        out[..., 0::2] = x1 * cos - x2 * sin
        out[..., 1::2] = x1 * sin + x2 * cos
        return out

    @staticmethod
    def _rope_one(heads: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
        x1, x2 = heads[..., 0::2], heads[..., 1::2]
        out = np.empty_like(heads)
        out[..., 0::2] = x1 * cos - x2 * sin
        out[..., 1::2] = x1 * sin + x2 * cos
        return out

    @staticmethod
    def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
        return x * (gain / np.sqrt(x.dot(x) / x.shape[0] + 1e-6))

    def _attend(self, q_scaled: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
        """One row's attention over a contiguous (L, kv_heads, head_dim) view."""
        c = self.config
        qr = q_scaled.reshape(c.num_kv_heads, c.group_size, c.head_dim)
        scores = np.einsum("kgd,nkd->kgn", qr, keys)
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
        w = e / e.sum(axis=-1, keepdims=True)
        out = np.einsum("kgn,nkd->kgd", w, values)
        return out.reshape(c.num_heads * c.head_dim)

    # -- forward ----------------------------------------------------------

    def forward(self, req: ForwardRequest) -> ForwardResult:
        c = self.config
        ctx = _validate_request(req, c.max_positions)
        T = len(req.tokens)
        cache = req.cache
        cache.ensure_rotated(self.rope_rows)
        cache.reserve(T)
        masked = req.attention_mask is not None
        p = self.params

        if masked:
            # per-layer scratch: cache block copied once, tail rewritten per row
            scratch_k = [np.empty((ctx + T, c.num_kv_heads, c.head_dim)) for _ in range(c.num_layers)]
            scratch_v = [np.empty((ctx + T, c.num_kv_heads, c.head_dim)) for _ in range(c.num_layers)]
            for layer in range(c.num_layers):
                scratch_k[layer][:ctx] = cache.rotated_keys(layer, ctx)
                scratch_v[layer][:ctx] = cache.values(layer, ctx)

        heads = c.gamma + 1 if req.heads_needed is None else min(req.heads_needed, c.gamma + 1)
        bundles = np.full((T, c.gamma + 1, c.vocab_size), -np.inf)
        queries = np.empty((T, c.num_layers, c.num_heads, c.head_dim))
        embed, ln_f = p["embed"], p["ln_f"]

        for r in range(T):
            pos = req.positions[r]
            ang = pos * self.inv_freq
            cos, sin = np.cos(ang), np.sin(ang)
            h = embed[req.tokens[r]].copy()
            ancestors = _row_ancestors(req.attention_mask, ctx, r) if masked else None
            for layer in range(c.num_layers):
                ln1, wq, wk, wv, wo, ln2, w1, w2 = self._layer_p[layer]
                x = self._rmsnorm(h, ln1)
                q = (x @ wq).reshape(c.num_heads, c.head_dim)
                k = (x @ wk).reshape(c.num_kv_heads, c.head_dim)
                v = (x @ wv).reshape(c.num_kv_heads, c.head_dim)
                queries[r, layer] = q
                k_rot = self._rope_one(k, cos, sin)
                q_rot = self._rope_one(q, cos, sin) * self._scale
                cache.stage(layer, r, k, k_rot, v)
                if masked:
                    sk, sv = scratch_k[layer], scratch_v[layer]
                    all_rot = cache.rotated_keys(layer, ctx + T)
                    all_val = cache.values(layer, ctx + T)
                    for j, anc in enumerate(ancestors):
                        sk[ctx + j] = all_rot[ctx + anc]
                        sv[ctx + j] = all_val[ctx + anc]
                    vis = ctx + len(ancestors) + 1
                    sk[vis - 1] = k_rot
                    sv[vis - 1] = v
                    attn = self._attend(q_rot, sk[:vis], sv[:vis])
                else:
                    vis = ctx + r + 1
                    attn = self._attend(
                        q_rot, cache.rotated_keys(layer, vis), cache.values(layer, vis)
                    )
                h = h + attn @ wo
                x2 = self._rmsnorm(h, ln2)
                a = x2 @ w1
                h = h + (a / (1.0 + np.exp(-a))) @ w2
            h0 = self._rmsnorm(h, ln_f)
            bundles[r, :heads] = chained_draft_logits(h0, self._head_mats[: heads - 1], embed)
        cache.commit_rows(list(req.positions))
        return ForwardResult(bundles=bundles, queries=queries)


Distribution = np.ndarray
DraftOverride = Callable[[tuple[int, ...]], Sequence[int] | np.ndarray]


class TableLM:
    """Exact table-driven oracle: context suffix -> next-token distribution.

    The table is keyed by the last ``order`` context tokens (shorter at the
    start of a sequence). Draft heads default to chaining the table greedily,
    so with point-mass rows the drafts echo the oracle exactly; pass
    ``draft_override`` to script disagreement scenarios. Cache entries carry
    the token id in the value slot, making cache recomputation trivial.
    """

    def __init__(
        self,
        vocab_size: int,
        table: dict[tuple[int, ...], np.ndarray] | None = None,
        default: np.ndarray | None = None,
        gamma: int = 3,
        order: int = 1,
        draft_override: DraftOverride | None = None,
        seed: int = 0,
        sharpness: float | None = None,
    ):
        self.config = ModelConfig(
            vocab_size=vocab_size, num_layers=1, hidden_dim=2, num_heads=1,
            num_kv_heads=1, gamma=gamma, max_positions=1 << 40, init_seed=seed,
        )
        self.order = order
        self.table = dict(table) if table else {}
        self.default = default
        self.draft_override = draft_override
        self.seed = seed
        self.sharpness = sharpness  # not None: missing rows are seeded random

    @classmethod
    def random(cls, vocab_size: int, seed: int, gamma: int = 3, order: int = 1,
               sharpness: float = 3.0) -> "TableLM":
        """Oracle whose rows are reproducible random distributions."""
        return cls(vocab_size, gamma=gamma, order=order, seed=seed, sharpness=sharpness)

    @classmethod
    def cycle(cls, phrase: Sequence[int], vocab_size: int, gamma: int = 3,
              **kwargs) -> "TableLM":
        """Point-mass chain that loops through ``phrase`` forever."""
        table = {}
        for i, tok in enumerate(phrase):
            row = np.zeros(vocab_size)
            row[phrase[(i + 1) % len(phrase)]] = 1.0
            table[(tok,)] = row
        return cls(vocab_size, table=table, gamma=gamma, order=1, **kwargs)

    def dist(self, context: Sequence[int]) -> np.ndarray:
        tail = tuple(context[-self.order:]) if self.order else ()
        row = self.table.get(tail)
        if row is None and self.sharpness is not None:
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(tail) + (len(tail),))
            )
            row = np.exp(self.sharpness * rng.standard_normal(self.config.vocab_size))
            row /= row.sum()
            self.table[tail] = row
        if row is None:
            row = self.default
        if row is None:
            row = np.full(self.config.vocab_size, 1.0 / self.config.vocab_size)
        return row

    def new_cache(self) -> FullCache:
        return FullCache(1, 1, 2)

    def _bundle(self, context: list[int], heads: int) -> np.ndarray:
        vocab, gamma = self.config.vocab_size, self.config.gamma
        out = np.full((gamma + 1, vocab), -np.inf)
        if self.draft_override is not None and heads == gamma + 1:
            # overrides script the drafting side only; single-head requests
            # (verification, plain decoding) always see honest table logits
            picks = self.draft_override(tuple(context))
            if isinstance(picks, np.ndarray) and picks.ndim == 2:
                return picks
            for i, tok in enumerate(picks[:heads]):
                row = np.full(vocab, -np.inf)
                row[int(tok)] = 0.0
                out[i] = row
            return out
        ctx = list(context)
        with np.errstate(divide="ignore"):
            for i in range(heads):
                d = self.dist(ctx)
                out[i] = np.log(d)
                ctx.append(int(np.argmax(d)))
        return out

    def forward(self, req: ForwardRequest) -> ForwardResult:
        ctx = _validate_request(req, self.config.max_positions)
        T = len(req.tokens)
        cache = req.cache
        cache.reserve(T)
        cache_tokens = [int(t) for t in cache.values(0, ctx)[:, 0, 0]] if ctx else []
        masked = req.attention_mask is not None
        gamma = self.config.gamma
        heads = gamma + 1 if req.heads_needed is None else min(req.heads_needed, gamma + 1)
        bundles = np.empty((T, gamma + 1, self.config.vocab_size))
        for r in range(T):
            if masked:
                anc = _row_ancestors(req.attention_mask, ctx, r)
                context = cache_tokens + [req.tokens[j] for j in anc] + [req.tokens[r]]
            else:
                context = cache_tokens + req.tokens[: r + 1]
            bundles[r] = self._bundle(context, heads)
            entry = np.array([[1.0, 0.0]])
            value = np.array([[float(req.tokens[r]), 0.0]])
            cache.stage(0, r, entry, entry, value)
        cache.commit_rows(list(req.positions))
        return ForwardResult(
            bundles=bundles, queries=np.ones((T, 1, 1, 2)),
        )


ModelBackend = TinyTransformer | TableLM


# -- serialization ---------------------------------------------------------

WEIGHTS_MAGIC = b"SWIFTDEC-WGT\x00\x00\x00\x00"

_CONFIG_KEYS = (
    "backend", "vocab_size", "num_layers", "hidden_dim", "num_heads",
    "num_kv_heads", "gamma", "max_positions", "init_seed", "order", "sharpness",
)


def save_weights(model: TinyTransformer, path: str | Path) -> None:
    """Little-endian blob: magic, count, then shape-prefixed float32 arrays."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        params = model.parameters()
        fh.write(struct.pack("<I", len(params)))
        for _, arr in params:
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(config: ModelConfig, path: str | Path) -> TinyTransformer:
    data = Path(path).read_bytes()
    if data[:16] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: bad magic, not a weights blob")
    off = 16
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    skeleton = TinyTransformer(config)
    specs = skeleton._param_specs()
    if count != len(specs):
        raise ValueError(f"{path}: {count} arrays, config expects {len(specs)}")
    params = {}
    for name, shape, _ in specs:
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        got = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        if got != shape:
            raise ValueError(f"{path}: array {name} has shape {got}, expected {shape}")
        n = int(np.prod(got)) if got else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(float)
        off += 4 * n
        params[name] = arr.reshape(got)
    return TinyTransformer(config, params=params)


def write_model_config(values: dict, path: str | Path) -> None:
    """Flat ``key = value`` UTF-8 text file."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, val in values.items():
            fh.write(f"{key} = {val}\n")


def read_model_config(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed line {line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise ValueError(f"{path}: unknown key {key!r}")
        values[key] = val.strip()
    return values


def build_model(values: dict[str, str]) -> ModelBackend:
    """Instantiate a backend from parsed config text."""
    backend = values.get("backend", "tiny")
    get = lambda k, d: int(values.get(k, d))
    if backend == "tiny":
        config = ModelConfig(
            vocab_size=get("vocab_size", 256),
            num_layers=get("num_layers", 2),
            hidden_dim=get("hidden_dim", 64),
            num_heads=get("num_heads", 4),
            num_kv_heads=get("num_kv_heads", int(values.get("num_heads", 4))),
            gamma=get("gamma", 3),
            max_positions=get("max_positions", 65536),
            init_seed=get("init_seed", 0),
        )
        return TinyTransformer(config)
    if backend == "table":
        return TableLM.random(
            vocab_size=get("vocab_size", 256),
            seed=get("init_seed", 0),
            gamma=get("gamma", 3),
            order=get("order", 1),
            sharpness=float(values.get("sharpness", 3.0)),
        )
    raise ValueError(f"unknown backend {backend!r}")
