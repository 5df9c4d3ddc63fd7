"""MA-BERT encoder, the multi-head BERT baseline, and the query decoder head.

The encoder maps a batch of scenes ``(B, N, T, F)`` to a tensor of the same
shape. Internally every agent-step is one attention slot; slots are flattened
time-major (``slot = t * N + n``).

The baseline variant swaps agent-aware attention for multi-head attention and
blocks attention across agents, so it processes each trajectory on its own.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nn
from .scene import Normalizer, positional_encoding, slot_agent

VARIANTS = ("agent_aware", "multi_head")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    d_ff: int = 64
    n_layers: int = 2
    h: int = 4
    F: int = 3
    T_max: int = 60
    dropout_pretrain: float = 0.1
    dropout_finetune: float = 0.0
    variant: str = "agent_aware"
    decoder_outputs: int = 0  # 0 = no decoder head

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for name in ("d", "d_ff", "n_layers", "h", "F", "T_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % self.h:
            raise ValueError("d must be divisible by h")
        if self.d % 2:
            raise ValueError("d must be even for the positional encoding")
        if self.decoder_outputs < 0:
            raise ValueError("decoder_outputs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def encoder_signature(self) -> dict:
        """Fields that must agree for encoder weights to be interchangeable."""
        keys = ("d", "d_ff", "n_layers", "h", "F", "T_max", "variant")
        return {k: getattr(self, k) for k in keys}


def _attention_shapes(prefix: str, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = cfg.d
    if cfg.variant == "agent_aware":
        names = ("wq_self", "wk_self", "wq_other", "wk_other")
    else:
        names = ("wq", "wk", "wv", "wo")
    return [(f"{prefix}.{n}", (d, d)) for n in names]


def _block_shapes(prefix: str, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d, cfg.d_ff
    return _attention_shapes(f"{prefix}.attn", cfg) + [
        (f"{prefix}.ln1.g", (d,)),
        (f"{prefix}.ln1.b", (d,)),
        (f"{prefix}.ffn.w1", (d, f)),
        (f"{prefix}.ffn.b1", (f,)),
        (f"{prefix}.ffn.w2", (f, d)),
        (f"{prefix}.ffn.b2", (d,)),
        (f"{prefix}.ln2.g", (d,)),
        (f"{prefix}.ln2.b", (d,)),
    ]


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter registry in canonical order."""
    shapes = [("in.w", (cfg.F, cfg.d)), ("in.b", (cfg.d,)), ("mask_emb", (cfg.d,))]
    for i in range(cfg.n_layers):
        shapes += _block_shapes(f"layer{i}", cfg)
    shapes += [("out.w", (cfg.d, cfg.F)), ("out.b", (cfg.F,))]
    if cfg.decoder_outputs:
        shapes += [("dec.q.w", (cfg.F, cfg.d)), ("dec.q.b", (cfg.d,))]
        shapes += _block_shapes("dec", cfg)
        shapes += [("dec.out.w", (cfg.d, 1)), ("dec.out.b", (1,))]
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for _, s in parameter_shapes(cfg)))


def _fan_in(name: str, shapes: dict[str, tuple[int, ...]]) -> int:
    if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
        w = name[: name.rfind(".")] + (".w" if name.endswith(".b") else ".w" + name[-1])
        return shapes[w][0]
    return shapes[name][0]


def init_parameter(name: str, shape: tuple[int, ...], shapes: dict, rng: np.random.Generator) -> np.ndarray:
    if name == "mask_emb":
        return np.zeros(shape)
    if ".ln" in name:
        return np.ones(shape) if name.endswith(".g") else np.zeros(shape)
    bound = 1.0 / np.sqrt(_fan_in(name, shapes))
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------------------
# attention


def agent_aware_attention(q_in, kv_in, w: dict, same_agent, key_keep=None):
    """Single-head attention whose logits switch between self and other projections.

    ``q_in`` (B, Lq, d) provides queries; ``kv_in`` (B, Lk, d) provides keys
    and values with no value projection. ``same_agent`` (Lq, Lk) is the binary
    agent mask; ``key_keep`` (B, Lk) marks non-padded keys.
    """
    d = q_in.shape[-1]
    same = np.asarray(same_agent, dtype=bool)
    if same.shape != (q_in.shape[-2], kv_in.shape[-2]):
        raise ValueError(f"agent mask shape {same.shape} does not match slots {(q_in.shape[-2], kv_in.shape[-2])}")
    qs, ks = q_in @ w["wq_self"], kv_in @ w["wk_self"]
    qo, ko = q_in @ w["wq_other"], kv_in @ w["wk_other"]
    a = qs @ np.swapaxes(ks, -1, -2)
    np.copyto(a, qo @ np.swapaxes(ko, -1, -2), where=~same)
    a *= 1.0 / np.sqrt(d)
    p = _softmax_inplace(a, key_keep)
    out = p @ kv_in
    return out, (q_in, kv_in, w, same, qs, ks, qo, ko, p)


def agent_aware_attention_backward(dout, cache):
    q_in, kv_in, w, same, qs, ks, qo, ko, p = cache
    d = q_in.shape[-1]
    dp = dout @ np.swapaxes(kv_in, -1, -2)
    dkv = np.swapaxes(p, -1, -2) @ dout
    da = _softmax_backward_inplace(dp, p, 1.0 / np.sqrt(d))
    dself = da * same
    dother = np.subtract(da, dself, out=da)
    dqs = dself @ ks
    dks = np.swapaxes(dself, -1, -2) @ qs
    dqo = dother @ ko
    dko = np.swapaxes(dother, -1, -2) @ qo
    grads = {
        "wq_self": _wgrad(q_in, dqs),
        "wk_self": _wgrad(kv_in, dks),
        "wq_other": _wgrad(q_in, dqo),
        "wk_other": _wgrad(kv_in, dko),
    }
    dq = dqs @ w["wq_self"].T + dqo @ w["wq_other"].T
    dkv = dkv + dks @ w["wk_self"].T + dko @ w["wk_other"].T
    return dq, dkv, grads


def _softmax_inplace(z, key_keep=None, allowed=None):
    """Row softmax of ``z`` over keys, overwriting ``z``; blocked slots get exactly 0.

    ``key_keep`` (B, Lk) blocks padded keys, ``allowed`` (Lq, Lk) blocks
    query/key pairs. ``z`` may carry extra axes between batch and query.
    """
    if key_keep is not None:
        kk = np.asarray(key_keep, dtype=bool)
        if kk.shape != (z.shape[0], z.shape[-1]):
            raise ValueError(f"padding mask shape {kk.shape} does not match {(z.shape[0], z.shape[-1])}")
        bias = np.where(kk, 0.0, -np.inf).reshape(kk.shape[0], *([1] * (z.ndim - 2)), kk.shape[1])
        z += bias
    if allowed is not None:
        np.copyto(z, -np.inf, where=~np.asarray(allowed, dtype=bool))
    m = z.max(axis=-1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    z -= m
    np.exp(z, out=z)
    s = z.sum(axis=-1, keepdims=True)
    s[s == 0.0] = 1.0
    z /= s
    return z


def _softmax_backward_inplace(dp, p, scale=1.0):
    r = np.einsum("...k,...k->...", dp, p)[..., None]
    dp -= r
    dp *= p
    if scale != 1.0:
        dp *= scale
    return dp


def multi_head_attention(q_in, kv_in, w: dict, h: int, key_keep=None, allowed=None):
    """Standard scaled dot-product attention over ``h`` heads with output projection.

    ``allowed`` (Lq, Lk), when given, restricts which keys each query may see.
    Heads are scaled by the square root of the per-head dimension.
    """
    d = q_in.shape[-1]
    if d % h:
        raise ValueError("model dimension must be divisible by the head count")
    dh = d // h
    q = _split(q_in @ w["wq"], h)
    k = _split(kv_in @ w["wk"], h)
    v = _split(kv_in @ w["wv"], h)
    s = q @ np.swapaxes(k, -1, -2)
    s *= 1.0 / np.sqrt(dh)
    p = _softmax_inplace(s, key_keep, allowed)
    heads = _merge(p @ v)
    out = heads @ w["wo"]
    return out, (q_in, kv_in, w, h, q, k, v, p, heads)


def multi_head_attention_backward(dout, cache):
    q_in, kv_in, w, h, q, k, v, p, heads = cache
    dh = q_in.shape[-1] // h
    grads = {"wo": _wgrad(heads, dout)}
    dheads = _split(dout @ w["wo"].T, h)
    dp = dheads @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(p, -1, -2) @ dheads
    ds = _softmax_backward_inplace(dp, p, 1.0 / np.sqrt(dh))
    dq = _merge(ds @ k)
    dk = _merge(np.swapaxes(ds, -1, -2) @ q)
    dv = _merge(dv)
    grads["wq"] = _wgrad(q_in, dq)
    grads["wk"] = _wgrad(kv_in, dk)
    grads["wv"] = _wgrad(kv_in, dv)
    dq_in = dq @ w["wq"].T
    dkv = dk @ w["wk"].T + dv @ w["wv"].T
    return dq_in, dkv, grads


def _split(x, h):
    b, l, d = x.shape
    return x.reshape(b, l, h, d // h).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def _agent_major(x, n, t):
    """(B, T*N, d) time-major slots -> (B*N, T, d) one sequence per agent."""
    b, _, d = x.shape
    return x.reshape(b, t, n, d).transpose(0, 2, 1, 3).reshape(b * n, t, d)


def _time_major(x, n, t):
    bn, _, d = x.shape
    return x.reshape(bn // n, n, t, d).transpose(0, 2, 1, 3).reshape(bn // n, t * n, d)


def _wgrad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


# --------------------------------------------------------------------------
# model


class Model:
    """Parameters plus forward/backward for the encoder and optional decoder.

    ``params`` is an insertion-ordered dict following ``parameter_shapes``.
    ``normalizer`` and ``eta_scale`` (mean, std of ETA labels in seconds) travel
    with the weights in checkpoints.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict | None = None):
        self.config = config
        self.normalizer: Normalizer | None = None
        self.eta_scale: tuple[float, float] | None = None
        self.pe = positional_encoding(config.T_max, config.d)
        self.fast_paths = True  # False forces the generic full-mask attention
        if params is None:
            rng = np.random.default_rng(seed)
            shapes = parameter_shapes(config)
            lookup = dict(shapes)
            params = {name: init_parameter(name, shape, lookup, rng) for name, shape in shapes}
        self.params = params
        self._check_shapes()

    def _check_shapes(self) -> None:
        expected = parameter_shapes(self.config)
        if [n for n, _ in expected] != list(self.params):
            raise ValueError("parameter registry does not match the model config")
        for name, shape in expected:
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    def copy(self) -> "Model":
        other = Model(self.config, params={k: v.copy() for k, v in self.params.items()})
        other.normalizer = self.normalizer
        other.eta_scale = self.eta_scale
        return other

    def add_decoder(self, outputs: int = 1, seed: int = 0) -> None:
        """Attach a freshly initialized decoder head (no-op if one exists)."""
        if self.config.decoder_outputs:
            return
        cfg = replace(self.config, decoder_outputs=outputs)
        rng = np.random.default_rng(seed)
        shapes = parameter_shapes(cfg)
        lookup = dict(shapes)
        params = {}
        for name, shape in shapes:
            params[name] = self.params[name] if name in self.params else init_parameter(name, shape, lookup, rng)
        self.config = cfg
        self.params = params

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _sub(self, prefix: str) -> dict:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    # -- blocks ---------------------------------------------------------

    def _attend(self, prefix, q_in, kv_in, same, key_keep, groups=None):
        w = self._sub(prefix)
        if self.config.variant == "agent_aware":
            out, c = agent_aware_attention(q_in, kv_in, w, same, key_keep)
        elif groups is not None and self.fast_paths:
            # self-attention restricted to each agent: run agents as separate sequences
            n, t = groups
            b, _, d = q_in.shape
            xa = _agent_major(q_in, n, t)
            keep = key_keep.reshape(b, t, n).transpose(0, 2, 1).reshape(b * n, t)
            out, c = multi_head_attention(xa, xa, w, self.config.h, keep)
            out = _time_major(out, n, t)
            c = ("grouped", groups, c)
        else:
            out, c = multi_head_attention(q_in, kv_in, w, self.config.h, key_keep, allowed=same.astype(bool))
        return out, c

    def _attend_backward(self, prefix, dout, cache, grads):
        if self.config.variant == "agent_aware":
            dq, dkv, g = agent_aware_attention_backward(dout, cache)
        elif isinstance(cache[0], str):
            (n, t), c = cache[1], cache[2]
            dq, dkv, g = multi_head_attention_backward(_agent_major(dout, n, t), c)
            dq, dkv = _time_major(dq, n, t), _time_major(dkv, n, t)
        else:
            dq, dkv, g = multi_head_attention_backward(dout, cache)
        for k, v in g.items():
            _acc(grads, f"{prefix}.{k}", v)
        return dq, dkv

    def _block(self, prefix, q_in, kv_in, same, key_keep, p, train, rng, self_attn, groups=None):
        """attention -> dropout -> add & norm -> ffn -> dropout -> add & norm."""
        P = self.params
        a, c_att = self._attend(f"{prefix}.attn", q_in, kv_in, same, key_keep, groups)
        a, s1 = nn.dropout(a, p, train, rng)
        x1, c_ln1 = nn.layer_norm(q_in + a, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
        f1, _ = nn.linear(x1, P[f"{prefix}.ffn.w1"], P[f"{prefix}.ffn.b1"])
        r, pos = nn.relu(f1)
        f2, _ = nn.linear(r, P[f"{prefix}.ffn.w2"], P[f"{prefix}.ffn.b2"])
        f2, s2 = nn.dropout(f2, p, train, rng)
        x2, c_ln2 = nn.layer_norm(x1 + f2, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
        return x2, (c_att, s1, c_ln1, x1, pos, r, s2, c_ln2, self_attn)

    def _block_backward(self, prefix, dx2, cache, grads):
        P = self.params
        c_att, s1, c_ln1, x1, pos, r, s2, c_ln2, self_attn = cache
        dy2, dg, db = nn.layer_norm_backward(dx2, c_ln2)
        _acc(grads, f"{prefix}.ln2.g", dg)
        _acc(grads, f"{prefix}.ln2.b", db)
        df2 = nn.dropout_backward(dy2, s2)
        dr, dw, dbias = nn.linear_backward(df2, r, P[f"{prefix}.ffn.w2"])
        _acc(grads, f"{prefix}.ffn.w2", dw)
        _acc(grads, f"{prefix}.ffn.b2", dbias)
        df1 = nn.relu_backward(dr, pos)
        dx1, dw, dbias = nn.linear_backward(df1, x1, P[f"{prefix}.ffn.w1"])
        _acc(grads, f"{prefix}.ffn.w1", dw)
        _acc(grads, f"{prefix}.ffn.b1", dbias)
        dx1 = dx1 + dy2
        dy1, dg, db = nn.layer_norm_backward(dx1, c_ln1)
        _acc(grads, f"{prefix}.ln1.g", dg)
        _acc(grads, f"{prefix}.ln1.b", db)
        da = nn.dropout_backward(dy1, s1)
        dq, dkv = self._attend_backward(f"{prefix}.attn", da, c_att, grads)
        dq = dq + dy1
        if self_attn:
            return dq + dkv, None
        return dq, dkv

    # -- encoder --------------------------------------------------------

    def encode(self, x, valid, start_step=None, masked=None, train=False, dropout=0.0, rng=None):
        """Encoder forward pass.

        ``x`` (B, N, T, F) normalized scenes, ``valid`` (B, N, T) bool,
        ``start_step`` (B, N) positional offsets, ``masked`` (B, N, T) bool
        slots whose embedding is replaced by the learned mask embedding.
        Returns ``(out, hidden, cache)`` with ``out`` shaped like ``x`` and
        ``hidden`` (B, N*T, d).
        """
        P, cfg = self.params, self.config
        b, n, t, f = x.shape
        if f != cfg.F:
            raise ValueError(f"expected {cfg.F} features, got {f}")
        if start_step is None:
            start_step = np.zeros((b, n), dtype=np.int64)
        steps = start_step[:, :, None] + np.arange(t)[None, None, :]
        if np.any(steps[valid] >= cfg.T_max):
            raise ValueError(f"scene steps exceed T_max={cfg.T_max}")
        e, _ = nn.linear(x, P["in.w"], P["in.b"])
        if masked is not None:
            e = np.where(masked[..., None], P["mask_emb"], e)
        e = e + self.pe[np.clip(steps, 0, cfg.T_max - 1)]
        h = e.transpose(0, 2, 1, 3).reshape(b, t * n, cfg.d)
        key_keep = valid.transpose(0, 2, 1).reshape(b, t * n)
        agents = slot_agent(n, t)
        same = agents[:, None] == agents[None, :]
        caches = []
        for i in range(cfg.n_layers):
            h, c = self._block(f"layer{i}", h, h, same, key_keep, dropout, train, rng, True, (n, t))
            nn.check_finite(h, f"encoder layer {i}")
            caches.append(c)
        y, _ = nn.linear(h, P["out.w"], P["out.b"])
        out = y.reshape(b, t, n, f).transpose(0, 2, 1, 3)
        cache = (x, masked, h, caches, (b, n, t, f))
        return out, h, cache

    def encode_backward(self, cache, d_out, d_hidden=None, grads=None):
        """Backward through ``encode``; returns (grads, d_x)."""
        P, cfg = self.params, self.config
        x, masked, h, caches, (b, n, t, f) = cache
        grads = {} if grads is None else grads
        dy = d_out.transpose(0, 2, 1, 3).reshape(b, t * n, f)
        dh, dw, db = nn.linear_backward(dy, h, P["out.w"])
        _acc(grads, "out.w", dw)
        _acc(grads, "out.b", db)
        if d_hidden is not None:
            dh = dh + d_hidden
        for i in reversed(range(cfg.n_layers)):
            dh, _ = self._block_backward(f"layer{i}", dh, caches[i], grads)
        de = dh.reshape(b, t, n, cfg.d).transpose(0, 2, 1, 3)
        if masked is not None:
            _acc(grads, "mask_emb", de[masked].sum(axis=0))
            de = np.where(masked[..., None], 0.0, de)
        else:
            _acc(grads, "mask_emb", np.zeros(cfg.d))
        dx, dw, db = nn.linear_backward(de, x, P["in.w"])
        _acc(grads, "in.w", dw)
        _acc(grads, "in.b", db)
        return grads, dx

    # -- decoder --------------------------------------------------------

    def decode(self, hidden, queries, valid):
        """Decoder head forward.

        ``hidden`` (B, N*T, d) from ``encode``; ``queries`` (B, N*O, F) binary,
        rows grouped by agent; ``valid`` (B, N, T). Returns ``(y, cache)``
        with ``y`` (B, N, O).
        """
        P, cfg = self.params, self.config
        o = cfg.decoder_outputs
        if not o:
            raise ValueError("model has no decoder head")
        b, n, t = valid.shape
        if queries.shape != (b, n * o, cfg.F):
            raise ValueError(f"query matrix shape {queries.shape} != {(b, n * o, cfg.F)}")
        qe, _ = nn.linear(queries, P["dec.q.w"], P["dec.q.b"])
        qe = qe + np.tile(self.pe[:o], (n, 1))[None]
        q_agent = np.repeat(np.arange(n), o)
        same = q_agent[:, None] == slot_agent(n, t)[None, :]
        key_keep = valid.transpose(0, 2, 1).reshape(b, t * n)
        z, c_blk = self._block("dec", qe, hidden, same, key_keep, 0.0, False, None, False)
        nn.check_finite(z, "decoder")
        y, _ = nn.linear(z, P["dec.out.w"], P["dec.out.b"])
        return y.reshape(b, n, o), (queries, z, c_blk)

    def decode_queried(self, hidden, queried, valid) -> list[np.ndarray]:
        """Outputs for queried agents only: one (k, O) array per batch row.

        ``queried`` (B, N) bool. A row with nothing queried gives an empty array.
        """
        q = query_matrix(queried, self.config.decoder_outputs, self.config.F)
        y, _ = self.decode(hidden, q, valid)
        return [y[i][np.asarray(queried[i], dtype=bool)] for i in range(y.shape[0])]

    def decode_backward(self, cache, dy, grads=None):
        """Returns (grads, d_hidden)."""
        P = self.params
        queries, z, c_blk = cache
        grads = {} if grads is None else grads
        dy = dy.reshape(z.shape[0], z.shape[1], 1)
        dz, dw, db = nn.linear_backward(dy, z, P["dec.out.w"])
        _acc(grads, "dec.out.w", dw)
        _acc(grads, "dec.out.b", db)
        dqe, dhidden = self._block_backward("dec", dz, c_blk, grads)
        _, dw, db = nn.linear_backward(dqe, queries, P["dec.q.w"])
        _acc(grads, "dec.q.w", dw)
        _acc(grads, "dec.q.b", db)
        return grads, dhidden


def _acc(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def query_matrix(airborne: np.ndarray, outputs: int, n_features: int) -> np.ndarray:
    """Binary decoder queries (B, N*O, F): ones for agents that need outputs."""
    b, n = airborne.shape
    rows = np.repeat(airborne.astype(float), outputs, axis=1)
    return np.repeat(rows[:, :, None], n_features, axis=2)
