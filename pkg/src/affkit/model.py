"""Retrieval-augmented cross-image alignment model for action direction.

Query and reference images are encoded by a shared trainable
patchify-and-project encoder. Reference tokens are FiLM-modulated by
their action vectors and tagged with per-slot ID embeddings; a gated
cross-attention layer fuses them into the query tokens, weighted by the
dual (similarity x learned-gate) scheme; a pre-norm transformer encoder
with a CLS token regresses the raw 2D direction.
"""

import base64
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (ContractError, DimensionError, NumericError, ParseError,
                     ConfigError)

CHECKPOINT_FORMAT = "affkit-checkpoint"
WEIGHTING_RULES = ("full", "no_gating", "no_similarity", "uniform")
DEGENERATE_NORM = 1e-12


@dataclass
class ModelConfig:
    d: int = 64
    patch_size: int = 4
    image_h: int = 48
    image_w: int = 48
    channels: int = 4
    n_layers: int = 6
    n_heads: int = 4
    d_ff: int = 256
    k_max: int = 4
    eps: float = 1e-8
    film_hidden: int = 32
    gate_hidden: int = 32
    attn_mode: str = "logit_bias"  # or "output_mix"

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by "
                f"patch size {self.patch_size}")
        if self.attn_mode not in ("logit_bias", "output_mix"):
            raise ConfigError(f"unknown attn_mode {self.attn_mode!r}")

    @property
    def n_patches(self):
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels


def init_model(cfg, seed=0):
    """Freshly initialized parameter dict (name -> requires_grad Tensor)."""
    rng = np.random.default_rng(seed)

    def w(fan_in, *shape):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape),
                      requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def small(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    d, dff = cfg.d, cfg.d_ff
    params = {
        "enc.w": w(cfg.patch_dim, cfg.patch_dim, d),
        "enc.b": zeros(d),
        "enc.pos": small(cfg.n_patches, d),
        "film.w1": w(2, 2, cfg.film_hidden),
        "film.b1": zeros(cfg.film_hidden),
        # Zero-init so modulation starts at identity (gamma=1, beta=0).
        "film.w2": zeros(cfg.film_hidden, 2 * d),
        "film.b2": zeros(2 * d),
        "eref": small(cfg.k_max, d),
        "gate.w1": w(2 * d, 2 * d, cfg.gate_hidden),
        "gate.b1": zeros(cfg.gate_hidden),
        "gate.w2": w(cfg.gate_hidden, cfg.gate_hidden, 1),
        "gate.b2": zeros(1),
        "cls": small(1, 1, d),
        "head.w1": w(d, d, d),
        "head.b1": zeros(d),
        "head.w2": w(d, d, 2),
        "head.b2": zeros(2),
        "final_ln.g": Tensor(np.ones(d), requires_grad=True),
        "final_ln.b": zeros(d),
    }
    for name in ("xattn.wq", "xattn.wk", "xattn.wv", "xattn.wo"):
        params[name] = w(d, d, d)
    params["xattn.bo"] = zeros(d)
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        params[p + "ln1.g"] = Tensor(np.ones(d), requires_grad=True)
        params[p + "ln1.b"] = zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            params[p + name] = w(d, d, d)
        params[p + "bo"] = zeros(d)
        params[p + "ln2.g"] = Tensor(np.ones(d), requires_grad=True)
        params[p + "ln2.b"] = zeros(d)
        params[p + "ff.w1"] = w(d, d, dff)
        params[p + "ff.b1"] = zeros(dff)
        params[p + "ff.w2"] = w(dff, dff, d)
        params[p + "ff.b2"] = zeros(d)
    return params


# ---------------------------------------------------------------------------
# building blocks


def patchify(images, patch_size):
    """Non-overlapping patches, row-major over the patch grid.

    images: (..., H, W, C) -> (..., N, patch_size^2 * C)
    """
    *lead, h, wd, c = images.shape
    p = patch_size
    if h % p or wd % p:
        raise ContractError(f"image {h}x{wd} not divisible by patch size {p}")
    x = images.reshape(*lead, h // p, p, wd // p, p, c)
    x = np.moveaxis(x, -4, -3)
    return np.ascontiguousarray(x).reshape(*lead, (h // p) * (wd // p), p * p * c)


def encode_patches(params, cfg, images):
    """Shared patch encoder: project patches to d and add positions."""
    patches = patchify(np.asarray(images, dtype=np.float64), cfg.patch_size)
    tokens = ad.add(ad.matmul(Tensor(patches), params["enc.w"]), params["enc.b"])
    return ad.add(tokens, params["enc.pos"])


def film_params(params, directions):
    """Map unit action vectors (..., 2) to FiLM (gamma, beta), each (..., d)."""
    a = directions if isinstance(directions, Tensor) else Tensor(directions)
    hidden = ad.gelu(ad.add(ad.matmul(a, params["film.w1"]), params["film.b1"]))
    out = ad.add(ad.matmul(hidden, params["film.w2"]), params["film.b2"])
    d = out.shape[-1] // 2
    gamma = ad.add(ad.narrow(out, out.data.ndim - 1, 0, d), 1.0)
    beta = ad.narrow(out, out.data.ndim - 1, d, d)
    return gamma, beta


def film_modulate(feats, gamma, beta):
    """Per-token affine modulation: gamma * F[i] + beta for every token i."""
    nd = feats.data.ndim
    gamma = ad.reshape(gamma, gamma.shape[:-1] + (1, gamma.shape[-1]))
    beta = ad.reshape(beta, beta.shape[:-1] + (1, beta.shape[-1]))
    if gamma.data.ndim != nd:
        raise DimensionError("film_modulate: rank mismatch between feats and params")
    return ad.add(ad.mul(feats, gamma), beta)


def add_ref_id(params, feats, slots):
    """Add the per-slot reference ID embedding to (..., K, N, d) tokens."""
    k_max = params["eref"].shape[0]
    for s in slots:
        if not 0 <= s < k_max:
            raise ContractError(f"reference slot {s} outside [0, {k_max})")
    rows = ad.concat([ad.narrow(params["eref"], 0, s, 1) for s in slots], axis=0)
    rows = ad.reshape(rows, (1, len(slots), 1, feats.shape[-1]))
    return ad.add(feats, rows)


def global_pool(feats, keepdims=False):
    """Mean over the token axis (second to last)."""
    return ad.mean(feats, axis=feats.data.ndim - 2, keepdims=keepdims)


def gate(params, z_q, z_r):
    """Sigmoid 2-layer MLP on [z_q; z_r] (query first) -> (...,) in (0, 1)."""
    x = ad.concat([z_q, z_r], axis=z_q.data.ndim - 1)
    hidden = ad.gelu(ad.add(ad.matmul(x, params["gate.w1"]), params["gate.b1"]))
    out = ad.add(ad.matmul(hidden, params["gate.w2"]), params["gate.b2"])
    return ad.reshape(ad.sigmoid(out), out.shape[:-1])


def dual_weights(sims, gates, eps=1e-8, rule="full"):
    """Combine similarity softmax with gate values along the last axis.

    full:           softmax(s)_k * w_k / (sum_j softmax(s)_j * w_j + eps)
    no_gating:      same with all w_k := 1
    no_similarity:  same with softmax(s) := 1/K
    uniform:        exactly 1/K
    """
    if rule not in WEIGHTING_RULES:
        raise ConfigError(f"unknown weighting rule {rule!r}")
    s = np.asarray(sims, dtype=np.float64)
    if not np.isfinite(s).all():
        raise NumericError("dual_weights: non-finite similarity scores")
    k = s.shape[-1]
    if rule == "uniform":
        out = np.full(s.shape, 1.0 / k)
        return Tensor(out) if isinstance(gates, Tensor) else out

    if rule == "no_similarity":
        coef = np.full(s.shape, 1.0 / k)
    else:
        shifted = s - s.max(axis=-1, keepdims=True)
        ex = np.exp(shifted)
        coef = ex / ex.sum(axis=-1, keepdims=True)

    if rule == "no_gating":
        gates = np.ones(s.shape) if not isinstance(gates, Tensor) else Tensor(
            np.ones(s.shape))
    if isinstance(gates, Tensor):
        numer = ad.mul(gates, Tensor(coef))
        denom = ad.add(ad.sum_(numer, axis=-1, keepdims=True), eps)
        return ad.div(numer, denom)
    numer = coef * np.asarray(gates, dtype=np.float64)
    return numer / (numer.sum(axis=-1, keepdims=True) + eps)


def _multi_head_attention(q_in, kv_in, cfg, wq, wk, wv, wo, bo, logit_bias=None):
    """Standard multi-head attention; optional additive per-key logit bias."""
    b, n_q, d = q_in.shape
    m = kv_in.shape[-2]
    h, dh = cfg.n_heads, cfg.d // cfg.n_heads

    def split_heads(x, n):
        return ad.transpose(ad.reshape(x, (b, n, h, dh)), (0, 2, 1, 3))

    # 1/sqrt(dh) is folded into Q so the scale touches (b, n, d) rather
    # than the much larger (b, h, n, m) logit array.
    q = split_heads(ad.scale(ad.matmul(q_in, wq), 1.0 / np.sqrt(dh)), n_q)
    k = split_heads(ad.matmul(kv_in, wk), m)
    v = split_heads(ad.matmul(kv_in, wv), m)
    logits = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    if logit_bias is not None:
        logits = ad.add(logits, logit_bias)
    attn = ad.softmax(logits, axis=-1)
    out = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
    out = ad.reshape(out, (b, n_q, d))
    return ad.add(ad.matmul(out, wo), bo)


def gated_cross_attention(params, cfg, f_q, ref_tokens, w_final):
    """Fuse reference tokens into the query tokens, residually.

    ref_tokens: Tensor (B, K, N, d); w_final: Tensor (B, K).
    In "logit_bias" mode every key inherits log(w_k + 1e-12) as an additive
    attention-logit bias; in "output_mix" mode each reference is attended
    separately and the outputs are combined with w_final.
    """
    b, k, n, d = ref_tokens.shape
    args = (cfg, params["xattn.wq"], params["xattn.wk"], params["xattn.wv"],
            params["xattn.wo"], params["xattn.bo"])
    if cfg.attn_mode == "logit_bias":
        f_mem = ad.reshape(ref_tokens, (b, k * n, d))
        bias = ad.log(ad.add(w_final, 1e-12))
        bias = ad.mul(ad.reshape(bias, (b, k, 1)), Tensor(np.ones((1, 1, n))))
        bias = ad.reshape(bias, (b, 1, 1, k * n))
        fused = _multi_head_attention(f_q, f_mem, *args, logit_bias=bias)
    else:
        pieces = []
        for j in range(k):
            mem_j = ad.reshape(ad.narrow(ref_tokens, 1, j, 1), (b, n, d))
            out_j = _multi_head_attention(f_q, mem_j, *args)
            wj = ad.reshape(ad.narrow(w_final, 1, j, 1), (b, 1, 1))
            pieces.append(ad.mul(out_j, wj))
        fused = pieces[0]
        for piece in pieces[1:]:
            fused = ad.add(fused, piece)
    return ad.add(f_q, fused)


def _encoder_block(params, prefix, cfg, x):
    normed = ad.layer_norm(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    attn = _multi_head_attention(
        normed, normed, cfg, params[prefix + "wq"], params[prefix + "wk"],
        params[prefix + "wv"], params[prefix + "wo"], params[prefix + "bo"])
    x = ad.add(x, attn)
    normed = ad.layer_norm(x, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    hidden = ad.gelu(ad.add(ad.matmul(normed, params[prefix + "ff.w1"]),
                            params[prefix + "ff.b1"]))
    ff = ad.add(ad.matmul(hidden, params[prefix + "ff.w2"]),
                params[prefix + "ff.b2"])
    return ad.add(x, ff)


def forward_direction(params, cfg, query_images, ref_images=None, ref_dirs=None,
                      sims=None, weighting="full", slots=None):
    """Raw (unnormalized) direction predictions, Tensor (B, 2).

    query_images: (B, H, W, C); ref_images: (B, K, H, W, C) or None for the
    no-retrieval path; ref_dirs: (B, K, 2) unit vectors; sims: (B, K).
    """
    query_images = np.asarray(query_images, dtype=np.float64)
    b = query_images.shape[0]
    f_q = encode_patches(params, cfg, query_images)

    if ref_images is not None and np.size(ref_images):
        ref_images = np.asarray(ref_images, dtype=np.float64)
        k = ref_images.shape[1]
        if k > cfg.k_max:
            raise ContractError(f"{k} references exceed k_max={cfg.k_max}")
        ref_dirs = np.asarray(ref_dirs, dtype=np.float64)
        norms = np.linalg.norm(ref_dirs, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ContractError("reference action vectors must be unit norm")
        if slots is None:
            slots = list(range(k))

        f_r = encode_patches(params, cfg, ref_images)
        gamma, beta = film_params(params, Tensor(ref_dirs))
        f_r = film_modulate(f_r, gamma, beta)
        f_r = add_ref_id(params, f_r, slots)

        z_q = global_pool(f_q)  # (B, d)
        z_r = global_pool(f_r)  # (B, K, d)
        z_q_rep = ad.add(ad.reshape(z_q, (b, 1, cfg.d)),
                         Tensor(np.zeros((b, k, cfg.d))))
        gates = gate(params, z_q_rep, z_r)  # (B, K)
        w_final = dual_weights(sims, gates, eps=cfg.eps, rule=weighting)
        fused = gated_cross_attention(params, cfg, f_q, f_r, w_final)
    else:
        fused = f_q

    cls = ad.add(params["cls"], Tensor(np.zeros((b, 1, cfg.d))))
    x = ad.concat([cls, fused], axis=1)
    for i in range(cfg.n_layers):
        x = _encoder_block(params, f"layer{i}.", cfg, x)
    x = ad.layer_norm(x, params["final_ln.g"], params["final_ln.b"])
    cls_out = ad.reshape(ad.narrow(x, 1, 0, 1), (b, cfg.d))
    hidden = ad.gelu(ad.add(ad.matmul(cls_out, params["head.w1"]),
                            params["head.b1"]))
    return ad.add(ad.matmul(hidden, params["head.w2"]), params["head.b2"])


def predict_direction(params, cfg, query_image, refs=(), weighting="full",
                      slots=None):
    """Single-query prediction.

    refs: sequence of (image, unit direction, similarity). Returns
    (raw (2,), unit (2,) or None); unit is None when the raw norm is
    degenerate (< 1e-12), which evaluation scores as a 180-degree error.
    """
    query = np.asarray(query_image, dtype=np.float64)[None]
    if refs:
        images = np.stack([np.asarray(r[0], dtype=np.float64) for r in refs])[None]
        dirs = np.asarray([r[1] for r in refs], dtype=np.float64)[None]
        sims = np.asarray([r[2] for r in refs], dtype=np.float64)[None]
        out = forward_direction(params, cfg, query, images, dirs, sims,
                                weighting=weighting, slots=slots)
    else:
        out = forward_direction(params, cfg, query)
    raw = out.data[0].copy()
    norm = np.linalg.norm(raw)
    unit = raw / norm if norm >= DEGENERATE_NORM else None
    return raw, unit


def direction_loss(pred, targets):
    """Mean over the batch of 0.5 * ||raw - gt||^2 (raw, unnormalized)."""
    diff = ad.sub(pred, Tensor(np.asarray(targets, dtype=np.float64)))
    return ad.scale(ad.sum_(ad.mul(diff, diff)), 0.5 / pred.shape[0])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, cfg, path):
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": CHECKPOINT_FORMAT, "version": 1,
                             "config": asdict(cfg)}) + "\n")
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f8")
            fh.write(json.dumps({
                "name": name, "shape": list(data.shape),
                "data": base64.b64encode(data.tobytes()).decode("ascii")}) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty checkpoint", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc}", line=1)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ParseError("not an affkit checkpoint", line=1)
    cfg = ModelConfig(**header["config"])
    params = {}
    for n, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), line=n)
        raw = base64.b64decode(rec["data"])
        data = np.frombuffer(raw, dtype="<f8").reshape(rec["shape"]).copy()
        params[rec["name"]] = Tensor(data, requires_grad=True)
    return params, cfg
