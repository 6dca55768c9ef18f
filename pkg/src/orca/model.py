"""Tiny decoder-only transformer with exact analytic gradients, in float64 numpy.

Architecture: pre-norm blocks (LN -> causal multi-head attention -> residual,
LN -> GELU MLP at 4x width -> residual), learned token and position embeddings,
final LayerNorm, untied output projection with bias.

The canonical parameter flattening order is the order returned by
``param_order``: token embedding, position embedding, then per layer
(ln1 gamma/beta, attention wq/bq/wk/bk/wv/bv/wo/bo, ln2 gamma/beta,
mlp w1/b1/w2/b2), final LN gamma/beta, output weight/bias. Each tensor is
raveled in C order. All training and gradient math runs in float64;
checkpoints store float32 (see ``save_checkpoint``).
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    NumericalError,
    PromptTooLongError,
    TrainingError,
    UsageError,
)
from .seeding import make_rng

_LN_EPS = 1e-5

CHECKPOINT_MAGIC = b"ORCM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Architecture descriptor; also the checkpoint header payload.

    With ``tied_output`` the unembedding matrix is the transpose of the token
    embedding (plus a separate output bias); without it the output projection
    is an independent tensor. Tying is what lets a model this small learn a
    token-universal copy operation.
    """

    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int
    window: int
    tied_output: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise UsageError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "window"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_mlp(self) -> int:
        return 4 * self.d_model


def param_order(arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list defining the flattening order."""
    d, v, w = arch.d_model, arch.vocab_size, arch.window
    m = arch.d_mlp
    order = [("tok_embed", (v, d)), ("pos_embed", (w, d))]
    for i in range(arch.n_layers):
        p = f"layer{i}."
        order += [
            (p + "ln1.g", (d,)),
            (p + "ln1.b", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)),
            (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)),
            (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)),
            (p + "attn.bo", (d,)),
            (p + "ln2.g", (d,)),
            (p + "ln2.b", (d,)),
            (p + "mlp.w1", (d, m)),
            (p + "mlp.b1", (m,)),
            (p + "mlp.w2", (m, d)),
            (p + "mlp.b2", (d,)),
        ]
    order += [
        ("ln_f.g", (d,)),
        ("ln_f.b", (d,)),
    ]
    if not arch.tied_output:
        order.append(("out.w", (d, v)))
    order.append(("out.b", (v,)))
    return order


@dataclass
class ModelParameters:
    """Full weight set with a canonical flattening order."""

    arch: ArchConfig
    tensors: dict[str, np.ndarray]

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.tensors[name].ravel() for name, _ in param_order(self.arch)]
        )

    @classmethod
    def from_flat(cls, arch: ArchConfig, flat: np.ndarray) -> "ModelParameters":
        tensors = {}
        pos = 0
        for name, shape in param_order(arch):
            n = int(np.prod(shape))
            tensors[name] = flat[pos : pos + n].reshape(shape).astype(np.float64)
            pos += n
        if pos != flat.size:
            raise UsageError(f"flat vector length {flat.size}, expected {pos}")
        return cls(arch=arch, tensors=tensors)

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            arch=self.arch, tensors={k: v.copy() for k, v in self.tensors.items()}
        )

    def check_finite(self):
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise NumericalError(f"non-finite values in parameter tensor {name}")


@dataclass
class GradientVector:
    """Flat gradient in canonical parameter order, plus provenance metadata."""

    values: np.ndarray
    kind: str  # "pt" or "icl"
    source: object = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise NumericalError(f"non-finite gradient ({self.kind}, {self.source})")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"  # "adam" | "sgd"
    lr: float = 1e-3
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise UsageError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise UsageError("learning rate must be > 0")
        if self.batch_size < 1:
            raise UsageError("batch size must be >= 1")


@dataclass
class OptimizerState:
    """Adam moment estimates; fresh state has step 0 and zero moments."""

    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass(frozen=True)
class TrainConfig:
    arch: ArchConfig
    steps: int
    batch_size: int
    optimizer: OptimizerConfig
    holdout_count: int = 16
    init_std: float = 0.02


def init_parameters(arch: ArchConfig, seed: int, init_std: float = 0.02) -> ModelParameters:
    """Gaussian init for weights/embeddings, zeros for biases, unit LN gains."""
    rng = make_rng(seed, "init")
    tensors = {}
    for name, shape in param_order(arch):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            tensors[name] = np.ones(shape)
        elif leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, init_std, size=shape)
    return ModelParameters(arch=arch, tensors=tensors)


# ----------------------------- forward / backward -----------------------------


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    cent = x - mu
    var = (cent * cent).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = cent * inv
    return xhat * g + b, xhat, inv


def _layer_norm_backward(dy, xhat, inv, g):
    dxhat = dy * g
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean1 - xhat * mean2)
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    return dx, dg, db


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_parts(u):
    """tanh-approximation GELU; returns (value, tanh term) for reuse in backward."""
    th = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + th), th


def _gelu_grad(u, th):
    sech2 = 1.0 - th * th
    inner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return 0.5 * (1.0 + th) + 0.5 * u * sech2 * inner


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _flat_outer(x, dy):
    """Weight gradient for y = x @ W: sum over batch and positions."""
    d = x.shape[-1]
    e = dy.shape[-1]
    return x.reshape(-1, d).T @ dy.reshape(-1, e)


def _forward(params: ModelParameters, ids: np.ndarray, need_cache: bool):
    """Run the stack on token ids (B, S); returns (logits, hidden, caches)."""
    arch = params.arch
    t = params.tensors
    B, S = ids.shape
    if S > arch.window:
        raise UsageError(f"sequence length {S} exceeds window {arch.window}")
    x = t["tok_embed"][ids] + t["pos_embed"][:S][None, :, :]
    mask = np.tril(np.ones((S, S), dtype=bool))
    scale = 1.0 / np.sqrt(arch.d_head)
    caches = []
    for i in range(arch.n_layers):
        p = f"layer{i}."
        a, xhat1, inv1 = _layer_norm(x, t[p + "ln1.g"], t[p + "ln1.b"])
        q = a @ t[p + "attn.wq"] + t[p + "attn.bq"]
        k = a @ t[p + "attn.wk"] + t[p + "attn.bk"]
        v = a @ t[p + "attn.wv"] + t[p + "attn.bv"]
        h, dh = arch.n_heads, arch.d_head
        qh = q.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        scores = np.where(mask[None, None, :, :], scores, -np.inf)
        att = _softmax(scores)
        ctx = att @ vh
        ctxm = ctx.transpose(0, 2, 1, 3).reshape(B, S, arch.d_model)
        o = ctxm @ t[p + "attn.wo"] + t[p + "attn.bo"]
        x_attn = x + o
        m, xhat2, inv2 = _layer_norm(x_attn, t[p + "ln2.g"], t[p + "ln2.b"])
        u = m @ t[p + "mlp.w1"] + t[p + "mlp.b1"]
        gact, th = _gelu_parts(u)
        y = gact @ t[p + "mlp.w2"] + t[p + "mlp.b2"]
        x_out = x_attn + y
        if need_cache:
            caches.append(
                dict(a=a, xhat1=xhat1, inv1=inv1, qh=qh, kh=kh, vh=vh, att=att,
                     ctxm=ctxm, m=m, xhat2=xhat2, inv2=inv2, u=u, th=th, gact=gact)
            )
        x = x_out
    hN, xhatf, invf = _layer_norm(x, t["ln_f.g"], t["ln_f.b"])
    out_w = t["tok_embed"].T if arch.tied_output else t["out.w"]
    logits = hN @ out_w + t["out.b"]
    final_cache = dict(hN=hN, xhatf=xhatf, invf=invf) if need_cache else None
    return logits, hN, (caches, final_cache, ids)


def _ce_from_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position cross entropy in nats, numerically via logsumexp."""
    zmax = logits.max(axis=-1)
    lse = zmax + np.log(np.exp(logits - zmax[..., None]).sum(axis=-1))
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    return lse - picked


def _backward(params: ModelParameters, dlogits: np.ndarray, fwd_state) -> dict[str, np.ndarray]:
    arch = params.arch
    t = params.tensors
    caches, final_cache, ids = fwd_state
    B, S, _ = dlogits.shape
    scale = 1.0 / np.sqrt(arch.d_head)
    grads = {name: np.zeros_like(t[name]) for name, _ in param_order(arch)}

    hN = final_cache["hN"]
    if arch.tied_output:
        grads["tok_embed"] += _flat_outer(hN, dlogits).T
        out_w = t["tok_embed"].T
    else:
        grads["out.w"] = _flat_outer(hN, dlogits)
        out_w = t["out.w"]
    grads["out.b"] = dlogits.sum(axis=(0, 1))
    dhN = dlogits @ out_w.T
    dx, dgf, dbf = _layer_norm_backward(dhN, final_cache["xhatf"], final_cache["invf"], t["ln_f.g"])
    grads["ln_f.g"] = dgf
    grads["ln_f.b"] = dbf

    for i in reversed(range(arch.n_layers)):
        p = f"layer{i}."
        c = caches[i]
        h, dh = arch.n_heads, arch.d_head
        # MLP branch
        dy = dx
        grads[p + "mlp.w2"] = _flat_outer(c["gact"], dy)
        grads[p + "mlp.b2"] = dy.sum(axis=(0, 1))
        dgact = dy @ t[p + "mlp.w2"].T
        du = dgact * _gelu_grad(c["u"], c["th"])
        grads[p + "mlp.w1"] = _flat_outer(c["m"], du)
        grads[p + "mlp.b1"] = du.sum(axis=(0, 1))
        dm = du @ t[p + "mlp.w1"].T
        dx_attn, dg2, db2 = _layer_norm_backward(dm, c["xhat2"], c["inv2"], t[p + "ln2.g"])
        grads[p + "ln2.g"] = dg2
        grads[p + "ln2.b"] = db2
        dx_attn = dx_attn + dx  # residual
        # attention branch
        do = dx_attn
        grads[p + "attn.wo"] = _flat_outer(c["ctxm"], do)
        grads[p + "attn.bo"] = do.sum(axis=(0, 1))
        dctxm = do @ t[p + "attn.wo"].T
        dctx = dctxm.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        datt = dctx @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["att"].transpose(0, 1, 3, 2) @ dctx
        att = c["att"]
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dqh = (dscores @ c["kh"]) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ c["qh"]) * scale
        dq = dqh.transpose(0, 2, 1, 3).reshape(B, S, arch.d_model)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, S, arch.d_model)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, S, arch.d_model)
        a = c["a"]
        grads[p + "attn.wq"] = _flat_outer(a, dq)
        grads[p + "attn.bq"] = dq.sum(axis=(0, 1))
        grads[p + "attn.wk"] = _flat_outer(a, dk)
        grads[p + "attn.bk"] = dk.sum(axis=(0, 1))
        grads[p + "attn.wv"] = _flat_outer(a, dv)
        grads[p + "attn.bv"] = dv.sum(axis=(0, 1))
        da = dq @ t[p + "attn.wq"].T + dk @ t[p + "attn.wk"].T + dv @ t[p + "attn.wv"].T
        dx_ln1, dg1, db1 = _layer_norm_backward(da, c["xhat1"], c["inv1"], t[p + "ln1.g"])
        grads[p + "ln1.g"] = dg1
        grads[p + "ln1.b"] = db1
        dx = dx_ln1 + dx_attn  # residual into the block input
    # embeddings
    np.add.at(grads["tok_embed"], ids, dx)
    grads["pos_embed"][:S] = dx.sum(axis=0)
    return grads


def forward_logits(params: ModelParameters, ids: np.ndarray) -> np.ndarray:
    """Logits (B, S, V) for token ids (B, S)."""
    logits, _, _ = _forward(params, np.asarray(ids, dtype=np.int64), need_cache=False)
    return logits


def final_hidden(params: ModelParameters, ids: np.ndarray) -> np.ndarray:
    """Post-final-LayerNorm hidden states (B, S, d); used for embeddings."""
    _, hidden, _ = _forward(params, np.asarray(ids, dtype=np.int64), need_cache=False)
    return hidden


def weighted_ce_and_grad(
    params: ModelParameters,
    inputs: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    want_grad: bool = True,
):
    """loss = sum over (batch, position) of weight * CE(target | prefix).

    Returns (loss, grads-dict or None). This single entry point backs both
    losses: the per-token-mean reconstruction loss and the summed prompt
    completion loss differ only in their weight patterns.
    """
    inputs = np.asarray(inputs, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    logits, _, fwd_state = _forward(params, inputs, need_cache=want_grad)
    zmax = logits.max(axis=-1, keepdims=True)
    expz = np.exp(logits - zmax)
    zsum = expz.sum(axis=-1, keepdims=True)
    lse = (zmax + np.log(zsum))[..., 0]
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    ce = lse - picked
    loss = float((weights * ce).sum())
    if not want_grad:
        return loss, None
    dlogits = expz / zsum * weights[..., None]
    bi = np.arange(inputs.shape[0])[:, None]
    si = np.arange(inputs.shape[1])[None, :]
    dlogits[bi, si, targets] -= weights
    return loss, _backward(params, dlogits, fwd_state)


def position_ces(params: ModelParameters, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position cross entropies (B, S), forward only."""
    logits, _, _ = _forward(params, np.asarray(inputs, dtype=np.int64), need_cache=False)
    return _ce_from_logits(logits, np.asarray(targets, dtype=np.int64))


# ----------------------------- public loss operations -----------------------------


def _bos_inputs(batch: np.ndarray, bos_id: int) -> np.ndarray:
    """Shift a (B, T) batch right by one, prefixing each row with bos."""
    bos_col = np.full((batch.shape[0], 1), bos_id, dtype=np.int64)
    return np.concatenate([bos_col, batch[:, :-1]], axis=1)


def pretrain_loss(params: ModelParameters, tokens: np.ndarray, bos_id: int = 1) -> float:
    """Mean nats per token to reconstruct the instance given its prefix.

    Every position t is scored given (bos, tokens[:t]); prefixing bos makes
    the first token well-defined and matches the prompt convention that
    sequences open with bos.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size < 1:
        raise UsageError("pretrain_loss needs a nonempty 1-d instance")
    if tokens.size > params.arch.window:
        raise UsageError(
            f"instance length {tokens.size} exceeds window {params.arch.window}"
        )
    batch = tokens[None, :]
    ce = position_ces(params, _bos_inputs(batch, bos_id), batch)
    return float(ce.mean())


def icl_loss(params: ModelParameters, prompt_tokens: np.ndarray, target_tokens: np.ndarray) -> float:
    """Total nats of the target continuation given the prompt (sum, not mean)."""
    prompt = np.asarray(prompt_tokens, dtype=np.int64)
    target = np.asarray(target_tokens, dtype=np.int64)
    if prompt.size < 1 or target.size < 1:
        raise UsageError("prompt and target must be nonempty")
    total = prompt.size + target.size
    if total > params.arch.window:
        raise PromptTooLongError(
            f"prompt+target length {total} exceeds window {params.arch.window}"
        )
    seq = np.concatenate([prompt, target])
    ce = position_ces(params, seq[None, :-1], seq[None, 1:])
    return float(ce[0, prompt.size - 1 :].sum())


def score_candidates(
    params: ModelParameters,
    prompt_tokens: np.ndarray,
    candidate_token_lists: list,
) -> tuple[int, np.ndarray]:
    """Argmax candidate under summed log-probability; ties -> lowest index."""
    if len(candidate_token_lists) == 0:
        raise UsageError("empty candidate list")
    prompt = np.asarray(prompt_tokens, dtype=np.int64)
    cands = [np.asarray(c, dtype=np.int64) for c in candidate_token_lists]
    if any(c.size == 0 for c in cands):
        raise UsageError("candidates must be nonempty token lists")
    longest = max(c.size for c in cands)
    if prompt.size + longest > params.arch.window:
        raise PromptTooLongError(
            f"prompt ({prompt.size}) + candidate ({longest}) exceeds window"
        )
    if all(c.size == 1 for c in cands):
        logits = forward_logits(params, prompt[None, :])[0, -1]
        zmax = logits.max()
        logz = zmax + np.log(np.exp(logits - zmax).sum())
        logprobs = np.array([logits[c[0]] - logz for c in cands])
    else:
        logprobs = np.array([-icl_loss(params, prompt, c) for c in cands])
    return int(np.argmax(logprobs)), logprobs


def _pt_weights(batch: np.ndarray) -> np.ndarray:
    """Per-position weights giving the batch mean of per-token-mean losses."""
    B, T = batch.shape
    return np.full((B, T), 1.0 / (B * T))


def batch_pretrain_loss_and_grad(
    params: ModelParameters, batch_tokens: np.ndarray, bos_id: int = 1
):
    """Mean pretraining loss and its flat gradient over a (B, T) batch."""
    batch = np.asarray(batch_tokens, dtype=np.int64)
    loss, grads = weighted_ce_and_grad(
        params, _bos_inputs(batch, bos_id), batch, _pt_weights(batch)
    )
    flat = np.concatenate([grads[name].ravel() for name, _ in param_order(params.arch)])
    return loss, flat


def loss_gradient(
    params: ModelParameters, loss_kind: str, datum, source=None, bos_id: int = 1
) -> GradientVector:
    """Exact analytic gradient of one scalar loss, flattened canonically.

    loss_kind "pt": datum is an instance token array (per-token mean loss).
    loss_kind "icl": datum is a (prompt, target) pair (summed target loss).
    """
    if loss_kind == "pt":
        tokens = np.asarray(datum, dtype=np.int64)[None, :]
        if tokens.shape[1] > params.arch.window:
            raise UsageError("instance exceeds window")
        _, grads = weighted_ce_and_grad(
            params, _bos_inputs(tokens, bos_id), tokens, _pt_weights(tokens)
        )
    elif loss_kind == "icl":
        prompt, target = datum
        prompt = np.asarray(prompt, dtype=np.int64)
        target = np.asarray(target, dtype=np.int64)
        if prompt.size + target.size > params.arch.window:
            raise PromptTooLongError("prompt+target exceeds window")
        seq = np.concatenate([prompt, target])[None, :]
        weights = np.zeros((1, seq.shape[1] - 1))
        weights[0, prompt.size - 1 :] = 1.0
        _, grads = weighted_ce_and_grad(params, seq[:, :-1], seq[:, 1:], weights)
    else:
        raise UsageError(f"unknown loss kind {loss_kind!r}")
    for name, _ in param_order(params.arch):
        if not np.all(np.isfinite(grads[name])):
            raise NumericalError(f"non-finite gradient in tensor {name}")
    flat = np.concatenate([grads[name].ravel() for name, _ in param_order(params.arch)])
    return GradientVector(values=flat, kind=loss_kind, source=source)


# ----------------------------- optimizer -----------------------------


def apply_update(
    params: ModelParameters,
    mean_gradient: np.ndarray,
    state: OptimizerState,
    config: OptimizerConfig,
) -> tuple[ModelParameters, OptimizerState]:
    """One optimizer step on the flat parameter vector; purely functional."""
    theta = params.flatten()
    g = np.asarray(mean_gradient, dtype=np.float64)
    if g.shape != theta.shape:
        raise UsageError(f"gradient shape {g.shape} != parameter shape {theta.shape}")
    if config.kind == "sgd":
        new_theta = theta - config.lr * g
        new_state = OptimizerState(step=state.step + 1, m=None, v=None)
    else:
        m = state.m if state.m is not None else np.zeros_like(theta)
        v = state.v if state.v is not None else np.zeros_like(theta)
        t = state.step + 1
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * g * g
        mhat = m / (1.0 - config.beta1**t)
        vhat = v / (1.0 - config.beta2**t)
        new_theta = theta - config.lr * mhat / (np.sqrt(vhat) + config.eps)
        new_state = OptimizerState(step=t, m=m, v=v)
    if not np.all(np.isfinite(new_theta)):
        raise NumericalError(f"non-finite parameters after update step {state.step + 1}")
    return ModelParameters.from_flat(params.arch, new_theta), new_state


# ----------------------------- base pretraining -----------------------------


def heldout_pretrain_loss(
    params: ModelParameters, token_matrix: np.ndarray, bos_id: int = 1
) -> float:
    """Mean of per-instance pretraining losses over a (N, T) token matrix."""
    batch = np.asarray(token_matrix, dtype=np.int64)
    ce = position_ces(params, _bos_inputs(batch, bos_id), batch)
    return float(ce.mean())


def init_and_pretrain_base(corpus, train_config: TrainConfig, seed: int) -> ModelParameters:
    """Initialize and train a base model on the corpus for a fixed step budget.

    The last ``holdout_count`` instances are held out; training samples batches
    uniformly from the rest, one Adam/SGD step per batch. Deterministic for
    (corpus, config, seed). Raises TrainingError on divergence or if the
    held-out loss fails to improve on the untrained model.
    """
    tokens = np.asarray(corpus.tokens, dtype=np.int64)
    n = tokens.shape[0]
    if n == 0:
        raise UsageError("corpus is empty")
    arch = train_config.arch
    if arch.vocab_size != corpus.vocab.size:
        raise UsageError(
            f"arch vocab {arch.vocab_size} != corpus vocab {corpus.vocab.size}"
        )
    holdout = min(train_config.holdout_count, max(1, n // 10))
    train_pool = np.arange(0, n - holdout) if n > holdout else np.arange(n)
    heldout_ids = np.arange(n - holdout, n) if n > holdout else np.arange(n)
    params = init_parameters(arch, seed, init_std=train_config.init_std)
    initial_heldout = heldout_pretrain_loss(params, tokens[heldout_ids])
    state = OptimizerState()
    bs = min(train_config.batch_size, train_pool.size)
    for step in range(train_config.steps):
        rng = make_rng(seed, "batch", step)
        batch_ids = rng.choice(train_pool, size=bs, replace=False)
        loss, grad = batch_pretrain_loss_and_grad(params, tokens[batch_ids])
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged (non-finite) at step {step}")
        params, state = apply_update(params, grad, state, train_config.optimizer)
    final_heldout = heldout_pretrain_loss(params, tokens[heldout_ids])
    if train_config.steps > 0 and not final_heldout < initial_heldout:
        raise TrainingError(
            f"held-out loss did not improve: {initial_heldout:.4f} -> {final_heldout:.4f}"
        )
    return params


# ----------------------------- checkpoint I/O -----------------------------


def serialize_checkpoint(params: ModelParameters) -> bytes:
    """Header (magic, version, arch) + float32 little-endian flat weights."""
    arch = params.arch
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(
        struct.pack(
            "<7I",
            CHECKPOINT_VERSION,
            arch.n_layers,
            arch.d_model,
            arch.n_heads,
            arch.vocab_size,
            arch.window,
            1 if arch.tied_output else 0,
        )
    )
    flat32 = params.flatten().astype("<f4")
    buf.write(flat32.tobytes())
    return buf.getvalue()


def deserialize_checkpoint(blob: bytes) -> ModelParameters:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise UsageError("bad checkpoint magic")
    version, n_layers, d_model, n_heads, vocab_size, window, flags = struct.unpack(
        "<7I", blob[4:32]
    )
    if version != CHECKPOINT_VERSION:
        raise UsageError(f"unsupported checkpoint version {version}")
    arch = ArchConfig(n_layers, d_model, n_heads, vocab_size, window,
                      tied_output=bool(flags & 1))
    flat = np.frombuffer(blob[32:], dtype="<f4").astype(np.float64)
    return ModelParameters.from_flat(arch, flat)


def save_checkpoint(params: ModelParameters, path):
    with open(path, "wb") as fh:
        fh.write(serialize_checkpoint(params))


def load_checkpoint(path) -> ModelParameters:
    with open(path, "rb") as fh:
        return deserialize_checkpoint(fh.read())


def fingerprint(params: ModelParameters) -> str:
    """Stable content hash of the serialized checkpoint bytes."""
    return hashlib.sha256(serialize_checkpoint(params)).hexdigest()
