"""Decoder-only transformer over interleaved (x, y) token streams, in numpy.

A sequence of K data-target pairs becomes 2K tokens of width D+1: the x-token
carries the input vector (last slot zero), the y-token carries only the
target.  After a linear projection to the embedding width plus learned
positional embeddings, a stack of pre-norm causal self-attention blocks (GELU
MLP, hidden width 4x) feeds a scalar readout.  The prediction for pair k is
read at the k-th x-token position, so it can only see the k-1 preceding pairs
and its own input.

Forward and backward passes are written out explicitly against named
parameter arrays.  Gradients are exact (finite-difference checked in the test
suite) and both passes are bit-reproducible for fixed inputs.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .errors import NumericalError
from .rng import RngHandle
from .tasks import RegressionSequence

__all__ = [
    "ModelConfig",
    "ForwardTrace",
    "param_shapes",
    "param_count",
    "init_params",
    "embed_sequence",
    "embed_batch",
    "forward",
    "backward",
    "save_checkpoint",
    "load_checkpoint",
]

# Parameters live in a flat {name: array} dict; this is "ModelParams".
ModelParams = dict[str, np.ndarray]

_LN_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))
_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_embed: int
    n_heads: int
    d_task: int  # D: width of the regression inputs
    max_pairs: int  # K: sequence capacity is 2*max_pairs tokens
    precision: str = "fp32"

    def __post_init__(self):
        if min(self.n_layers, self.d_embed, self.n_heads, self.d_task, self.max_pairs) < 1:
            raise ValueError("all ModelConfig sizes must be positive")
        if self.d_embed % self.n_heads != 0:
            raise ValueError(
                f"d_embed={self.d_embed} must be divisible by n_heads={self.n_heads}"
            )
        if self.precision not in ("fp32", "fp64"):
            raise ValueError("precision must be 'fp32' or 'fp64'")

    @property
    def d_head(self) -> int:
        return self.d_embed // self.n_heads

    @property
    def max_tokens(self) -> int:
        return 2 * self.max_pairs

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.precision == "fp32" else np.float64)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map; also fixes initialization draw order."""
    d, h = cfg.d_embed, 4 * cfg.d_embed
    shapes: dict[str, tuple[int, ...]] = {
        "in_proj.w": (cfg.d_task + 1, d),
        "in_proj.b": (d,),
        "pos_emb": (cfg.max_tokens, d),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.attn.wq"] = (d, d)
        shapes[f"{p}.attn.bq"] = (d,)
        shapes[f"{p}.attn.wk"] = (d, d)
        shapes[f"{p}.attn.bk"] = (d,)
        shapes[f"{p}.attn.wv"] = (d, d)
        shapes[f"{p}.attn.bv"] = (d,)
        shapes[f"{p}.attn.wo"] = (d, d)
        shapes[f"{p}.attn.bo"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.mlp.w1"] = (d, h)
        shapes[f"{p}.mlp.b1"] = (h,)
        shapes[f"{p}.mlp.w2"] = (h, d)
        shapes[f"{p}.mlp.b2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["readout.w"] = (d, 1)
    shapes["readout.b"] = (1,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, rng: RngHandle) -> ModelParams:
    """GPT-2 style init: N(0, 0.02) weights, zero biases, unit norm gains.

    Residual-output projections (attention output, second MLP layer) are
    scaled down by 1/sqrt(2 * n_layers) so the residual stream stays O(1)
    at depth.
    """
    resid_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers)
    params: ModelParams = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            arr = np.zeros(shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        else:
            arr = _INIT_STD * rng.standard_normal(shape)
            if name.endswith((".attn.wo", ".mlp.w2")):
                arr *= resid_scale
        params[name] = arr.astype(cfg.dtype)
    return params


def embed_sequence(seq: RegressionSequence, cfg: ModelConfig) -> np.ndarray:
    """One sequence -> (2K, D+1) interleaved token array."""
    if seq.num_pairs > cfg.max_pairs:
        raise ValueError(
            f"sequence has {seq.num_pairs} pairs, capacity is {cfg.max_pairs}"
        )
    if seq.dim != cfg.d_task:
        raise ValueError(f"sequence dim {seq.dim} != model d_task {cfg.d_task}")
    return embed_batch(seq.xs[None], seq.ys[None], cfg)[0]


def embed_batch(xs: np.ndarray, ys: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, K, D), (B, K) -> (B, 2K, D+1) token arrays in model precision."""
    B, K, D = xs.shape
    if K > cfg.max_pairs:
        raise ValueError(f"K={K} exceeds capacity {cfg.max_pairs}")
    tokens = np.zeros((B, 2 * K, D + 1), dtype=cfg.dtype)
    tokens[:, 0::2, :D] = xs
    tokens[:, 1::2, D] = ys
    return tokens


@dataclass
class ForwardTrace:
    """Predictions plus the activations the backward pass needs."""

    predictions: np.ndarray  # (B, K)
    tokens: np.ndarray
    cfg: ModelConfig
    caches: list = field(repr=False, default_factory=list)
    final: dict = field(repr=False, default_factory=dict)


# The elementwise helpers below favor in-place updates over expression
# chains: at toy model sizes the training loop is bound by temporaries, not
# matmuls.  (Also: z*z*z, never z**3 - integer pow lowers to scalar libm
# calls and is ~100x slower on float32.)


def _layernorm_fwd(x, g, b):
    mean = x.mean(axis=-1, keepdims=True)
    xhat = x - mean
    sq = xhat * xhat
    var = sq.mean(axis=-1, keepdims=True)
    var += _LN_EPS
    np.sqrt(var, out=var)
    inv_std = np.divide(1.0, var, out=var)
    xhat *= inv_std
    out = xhat * g
    out += b
    return out, (xhat, inv_std)


def _layernorm_bwd(dy, g, cache):
    xhat, inv_std = cache
    tmp = dy * xhat
    dg = tmp.sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    np.multiply(dxhat, xhat, out=tmp)
    m2 = tmp.mean(axis=-1, keepdims=True)
    dxhat -= m1
    m2 *= -1.0
    np.multiply(xhat, m2, out=tmp)
    dxhat += tmp
    dxhat *= inv_std
    return dxhat, dg, db


def _gelu_fwd(z):
    inner = z * z
    inner *= z
    inner *= np.asarray(0.044715, dtype=z.dtype)
    inner += z
    inner *= np.asarray(_GELU_C, dtype=z.dtype)
    t = np.tanh(inner)
    out = t + 1.0
    out *= z
    out *= 0.5
    return out, t


def _gelu_bwd(dy, z, t):
    dz = z * z
    dz *= np.asarray(3 * 0.044715, dtype=z.dtype)
    dz += 1.0
    dz *= np.asarray(_GELU_C, dtype=z.dtype)
    tmp = t * t
    np.subtract(1.0, tmp, out=tmp)
    tmp *= z
    dz *= tmp
    dz += t
    dz += 1.0
    dz *= 0.5
    dz *= dy
    return dz


def _split_heads(x, n_heads):
    B, T, d = x.shape
    return np.ascontiguousarray(
        x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)
    )


def _merge_heads(x):
    B, H, T, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(B, T, H * dh)


_mask_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _upper_indices(T: int) -> tuple[np.ndarray, np.ndarray]:
    if T not in _mask_cache:
        _mask_cache[T] = np.triu_indices(T, k=1)
    return _mask_cache[T]


def forward(params: ModelParams, cfg: ModelConfig, tokens: np.ndarray) -> ForwardTrace:
    """Causal forward pass over a (B, T, D+1) token batch.

    Returns predictions read at x-token positions (0, 2, 4, ...); outputs at
    y-token positions are dropped.  Non-finite activations raise with the
    offending layer index.
    """
    tokens = np.ascontiguousarray(tokens, dtype=cfg.dtype)
    B, T, width = tokens.shape
    if T > cfg.max_tokens or T % 2 != 0:
        raise ValueError(f"token length {T} invalid for capacity {cfg.max_tokens}")
    if width != cfg.d_task + 1:
        raise ValueError(f"token width {width} != d_task+1 = {cfg.d_task + 1}")

    h = tokens @ params["in_proj.w"] + params["in_proj.b"] + params["pos_emb"][:T]
    iu = _upper_indices(T)
    scale = np.asarray(1.0 / np.sqrt(cfg.d_head), dtype=cfg.dtype)

    caches = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        a, ln1c = _layernorm_fwd(h, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        q = _split_heads(a @ params[f"{p}.attn.wq"] + params[f"{p}.attn.bq"], cfg.n_heads)
        k = _split_heads(a @ params[f"{p}.attn.wk"] + params[f"{p}.attn.bk"], cfg.n_heads)
        v = _split_heads(a @ params[f"{p}.attn.wv"] + params[f"{p}.attn.bv"], cfg.n_heads)
        scores = q @ k.transpose(0, 1, 3, 2)
        scores *= scale
        scores[..., iu[0], iu[1]] = -np.inf  # exact causality: exp(-inf) == 0
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores, out=scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(probs @ v)
        h += ctx @ params[f"{p}.attn.wo"] + params[f"{p}.attn.bo"]

        m, ln2c = _layernorm_fwd(h, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        z1 = m @ params[f"{p}.mlp.w1"] + params[f"{p}.mlp.b1"]
        gz, tanh_c = _gelu_fwd(z1)
        h += gz @ params[f"{p}.mlp.w2"] + params[f"{p}.mlp.b2"]

        if not np.all(np.isfinite(h)):
            raise NumericalError(f"non-finite activations after layer {i}")
        caches.append(
            {"a": a, "ln1": ln1c, "q": q, "k": k, "v": v, "probs": probs,
             "ctx": ctx, "m": m, "ln2": ln2c, "z1": z1, "tanh": tanh_c, "gelu": gz}
        )

    f, lnfc = _layernorm_fwd(h, params["ln_f.g"], params["ln_f.b"])
    out = f @ params["readout.w"] + params["readout.b"]
    preds = out[:, 0::2, 0]
    if not np.all(np.isfinite(preds)):
        raise NumericalError("non-finite activations in readout")
    return ForwardTrace(
        predictions=preds, tokens=tokens, cfg=cfg, caches=caches,
        final={"f": f, "lnf": lnfc},
    )


def _mm_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Weight gradient of y = x @ w over batch and time: (din, dout)."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def backward(
    trace: ForwardTrace, params: ModelParams, dpreds: np.ndarray
) -> ModelParams:
    """Exact gradients of every parameter given d(loss)/d(predictions).

    ``dpreds`` has shape (B, K), one entry per x-token prediction; gradients
    at the discarded y-token outputs are identically zero.
    """
    cfg = trace.cfg
    B, T, _ = trace.tokens.shape
    dtype = cfg.dtype
    grads: ModelParams = {}

    dout = np.zeros((B, T, 1), dtype=dtype)
    dout[:, 0::2, 0] = dpreds

    f = trace.final["f"]
    grads["readout.w"] = _mm_grad(f, dout)
    grads["readout.b"] = dout.sum(axis=(0, 1))
    df = dout @ params["readout.w"].T
    dh, dg, db = _layernorm_bwd(df, params["ln_f.g"], trace.final["lnf"])
    grads["ln_f.g"], grads["ln_f.b"] = dg, db

    scale = np.asarray(1.0 / np.sqrt(cfg.d_head), dtype=dtype)
    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}"
        c = trace.caches[i]

        # MLP branch: h = h_in + gelu(ln2(h_in) @ w1 + b1) @ w2 + b2
        dgz = dh @ params[f"{p}.mlp.w2"].T
        grads[f"{p}.mlp.w2"] = _mm_grad(c["gelu"], dh)
        grads[f"{p}.mlp.b2"] = dh.sum(axis=(0, 1))
        dz1 = _gelu_bwd(dgz, c["z1"], c["tanh"])
        grads[f"{p}.mlp.w1"] = _mm_grad(c["m"], dz1)
        grads[f"{p}.mlp.b1"] = dz1.sum(axis=(0, 1))
        dm = dz1 @ params[f"{p}.mlp.w1"].T
        dres, dg, db = _layernorm_bwd(dm, params[f"{p}.ln2.g"], c["ln2"])
        grads[f"{p}.ln2.g"], grads[f"{p}.ln2.b"] = dg, db
        dh = dh + dres

        # Attention branch: h = h_in + merge(probs @ v) @ wo + bo
        dctx = dh @ params[f"{p}.attn.wo"].T
        grads[f"{p}.attn.wo"] = _mm_grad(c["ctx"], dh)
        grads[f"{p}.attn.bo"] = dh.sum(axis=(0, 1))
        dctx_h = _split_heads(dctx, cfg.n_heads)
        probs = c["probs"]
        dscores = dctx_h @ c["v"].transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx_h
        # softmax rows: masked entries have probs == 0, so dscores stays 0 there
        rowsum = np.einsum("bhtq,bhtq->bht", dscores, probs)
        dscores -= rowsum[..., None]
        dscores *= probs
        dq = (dscores @ c["k"]) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ c["q"]) * scale
        a = c["a"]
        da = np.zeros_like(a)
        for name, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
            dflat = _merge_heads(dmat)
            grads[f"{p}.attn.{name}"] = _mm_grad(a, dflat)
            grads[f"{p}.attn.b{name[1]}"] = dflat.sum(axis=(0, 1))
            da += dflat @ params[f"{p}.attn.{name}"].T
        dres, dg, db = _layernorm_bwd(da, params[f"{p}.ln1.g"], c["ln1"])
        grads[f"{p}.ln1.g"], grads[f"{p}.ln1.b"] = dg, db
        dh += dres

    grads["pos_emb"] = np.zeros_like(params["pos_emb"])
    grads["pos_emb"][:T] = dh.sum(axis=0)
    grads["in_proj.w"] = _mm_grad(trace.tokens, dh)
    grads["in_proj.b"] = dh.sum(axis=(0, 1))
    return grads


# ---------------------------------------------------------------------------
# Checkpoints: a JSON manifest plus one raw little-endian blob per array set.
# ---------------------------------------------------------------------------

_MANIFEST_NAME = "manifest.json"
_PARAMS_BLOB = "params.bin"
_OPT_BLOB = "optimizer.bin"


def _write_blob(path: str, arrays: dict[str, np.ndarray]) -> list[dict]:
    entries = []
    offset = 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            raw = le.tobytes()
            entries.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "dtype": le.dtype.str,
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            fh.write(raw)
            offset += len(raw)
    return entries


def _read_blob(path: str, entries: list[dict]) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    out = {}
    for e in entries:
        arr = np.frombuffer(
            raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=int)),
            offset=e["offset"],
        ).reshape(e["shape"])
        out[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return out


def save_checkpoint(
    ckpt_dir: str,
    params: ModelParams,
    cfg: ModelConfig,
    step: int,
    master_seed: int,
    optimizer_arrays: dict[str, np.ndarray] | None = None,
    optimizer_step: int | None = None,
) -> str:
    """Write manifest + blobs; round-trips bit-exactly."""
    os.makedirs(ckpt_dir, exist_ok=True)
    manifest = {
        "model_config": asdict(cfg),
        "step": int(step),
        "master_seed": int(master_seed),
        "params_blob": _PARAMS_BLOB,
        "params": _write_blob(os.path.join(ckpt_dir, _PARAMS_BLOB), params),
        "optimizer": None,
    }
    if optimizer_arrays is not None:
        manifest["optimizer"] = {
            "blob": _OPT_BLOB,
            "step": int(optimizer_step if optimizer_step is not None else step),
            "entries": _write_blob(os.path.join(ckpt_dir, _OPT_BLOB), optimizer_arrays),
        }
    with open(os.path.join(ckpt_dir, _MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return ckpt_dir


def load_checkpoint(ckpt_dir: str):
    """Returns (params, cfg, step, master_seed, optimizer_arrays, optimizer_step)."""
    with open(os.path.join(ckpt_dir, _MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    cfg = ModelConfig(**manifest["model_config"])
    params = _read_blob(os.path.join(ckpt_dir, manifest["params_blob"]), manifest["params"])
    opt_arrays = None
    opt_step = None
    if manifest.get("optimizer"):
        opt = manifest["optimizer"]
        opt_arrays = _read_blob(os.path.join(ckpt_dir, opt["blob"]), opt["entries"])
        opt_step = opt["step"]
    return params, cfg, manifest["step"], manifest["master_seed"], opt_arrays, opt_step


def iter_checkpoints(run_dir: str) -> Iterator[tuple[int, str]]:
    """Yield (step, path) for checkpoints under run_dir, ascending by step."""
    if not os.path.isdir(run_dir):
        return
    found = []
    for name in os.listdir(run_dir):
        if name.startswith("ckpt-"):
            try:
                found.append((int(name.split("-", 1)[1]), os.path.join(run_dir, name)))
            except ValueError:
                continue
    yield from sorted(found)
