"""Multi-layer self-attention gated by learned stochastic binary masks.

Attention weights are the renormalized masked softmax
``(M * exp(QK^T/sqrt(d_k))) / rowsum``, with mask logits produced by separate
mask embeddings from the *current* layer's token representations, so sparsity
in early layers also sparsifies the mask computation of later layers. A final
aggregation step attends from one learned query over the last layer's tokens
(with its own 1xn mask) to produce the feature vector for the heads.

Mask sampling uses the hard binary concrete / Gumbel-softmax construction:
logistic noise on the logits, a sigmoid relaxation, and a straight-through
hard threshold. Evaluation mode thresholds the noiseless sigmoid at 0.5
(strictly above), with no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .tokenizer import DEFAULT_STACK, TokenGrid, init_extractor, tokenize

LN_EPS = 1e-5


@dataclass(frozen=True)
class TrunkConfig:
    obs_channels: int = 4
    obs_size: int = 16
    n_actions: int = 5
    d_model: int = 32
    d_k: int = 32
    d_m: int = 16
    d_ff: int = 64
    n_layers: int = 2
    tau: float = 1.0
    beta_init: float = 2.0


@dataclass
class LayerMask:
    logits: Optional[Tensor]
    soft: Optional[Tensor]
    hard: Tensor


@dataclass
class MaskSet:
    layers: list[LayerMask]
    out: LayerMask
    tau: float
    mode: str

    def hard_arrays(self) -> tuple[list[np.ndarray], np.ndarray]:
        return [m.hard.data for m in self.layers], self.out.hard.data


@dataclass
class AttnRecord:
    layer: int                  # 0..L-1, or -1 for the aggregation step
    attn: np.ndarray
    mask: np.ndarray


@dataclass
class TrunkOutput:
    features: Tensor            # (B, d)
    masks: Optional[MaskSet]
    records: Optional[list[AttnRecord]]
    grid: TokenGrid


def ones_mask_set(batch: int, n: int, n_layers: int, dtype=None) -> MaskSet:
    """Fully open masks, used by the dense attention baseline."""
    dtype = dtype or ad.get_default_dtype()
    layers = [LayerMask(None, None, Tensor(np.ones((batch, n, n)), dtype=dtype))
              for _ in range(n_layers)]
    out = LayerMask(None, None, Tensor(np.ones((batch, 1, n)), dtype=dtype))
    return MaskSet(layers=layers, out=out, tau=1.0, mode="ones")


def init_trunk_params(rng: np.random.Generator, cfg: TrunkConfig,
                      with_masks: bool, scale: float = 1.0) -> dict[str, Tensor]:
    params = init_extractor(rng, cfg.obs_channels, DEFAULT_STACK, scale=scale)
    d, dk, dm, dff = cfg.d_model, cfg.d_k, cfg.d_m, cfg.d_ff
    if dk != d:
        raise ConfigError(f"value/residual dimensions require d_k == d_model, got {dk} vs {d}")

    def w(name, *shape, fan=None):
        fan = fan if fan is not None else shape[0]
        params[name] = ad.parameter(rng.standard_normal(shape) * scale / np.sqrt(fan), name)

    def zeros(name, *shape):
        params[name] = ad.parameter(np.zeros(shape), name)

    def ones(name, *shape):
        params[name] = ad.parameter(np.ones(shape), name)

    for l in range(cfg.n_layers):
        p = f"layer{l}."
        w(p + "wq", d, dk)
        w(p + "wk", d, dk)
        w(p + "wv", d, d)
        w(p + "ffn_w1", d, dff)
        zeros(p + "ffn_b1", dff)
        w(p + "ffn_w2", dff, d)
        zeros(p + "ffn_b2", d)
        ones(p + "ln1_g", d)
        zeros(p + "ln1_b", d)
        ones(p + "ln2_g", d)
        zeros(p + "ln2_b", d)
        if with_masks:
            w(p + "wqm", d, dm)
            w(p + "wkm", d, dm)
            params[p + "beta"] = ad.parameter(np.asarray(cfg.beta_init), p + "beta")
    w("agg.q", 1, dk, fan=dk)
    w("agg.wk", d, dk)
    w("agg.wv", d, d)
    if with_masks:
        w("agg.qm", 1, cfg.d_m, fan=cfg.d_m)
        w("agg.wkm", d, cfg.d_m)
        params["agg.beta"] = ad.parameter(np.asarray(cfg.beta_init), "agg.beta")
    return params


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.layer_norm(x, gain, bias, eps=LN_EPS)


def sample_mask_values(logits: Tensor, mode: str, tau: float,
                       rng: Optional[np.random.Generator]) -> tuple[Tensor, Tensor]:
    """Turn mask logits into (soft, hard) mask tensors.

    train: logistic noise, sigmoid relaxation, straight-through threshold.
    eval:  deterministic threshold sigmoid(logits) > 0.5, no noise, no grad.
    soft:  like train but without the hard threshold (verification mode).
    """
    if tau <= 0:
        raise ConfigError(f"mask temperature must be positive, got {tau}")
    if mode == "eval":
        hard_vals = (logits.data > 0).astype(logits.data.dtype)
        soft = Tensor(_sigmoid_np(logits.data), dtype=logits.data.dtype)
        return soft, Tensor(hard_vals, dtype=logits.data.dtype)
    if mode not in ("train", "soft"):
        raise ConfigError(f"unknown mask sampling mode {mode!r}")
    if rng is None:
        raise ConfigError("train-mode mask sampling requires an rng")
    u = np.clip(rng.random(logits.shape), 1e-12, 1.0 - 1e-12)
    noise = Tensor((np.log(u) - np.log1p(-u)).astype(logits.data.dtype),
                   dtype=logits.data.dtype)
    soft = ad.sigmoid(ad.scale(ad.add(logits, noise), 1.0 / tau))
    if mode == "soft":
        return soft, soft
    return soft, ad.st_round(soft)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _mask_logits(tokens: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    qm = ad.matmul(tokens, params[prefix + "wqm"])
    km = ad.matmul(tokens, params[prefix + "wkm"])
    return ad.add(ad.matmul(qm, ad.transpose(km)), params[prefix + "beta"])


def _agg_mask_logits(tokens: Tensor, params: dict[str, Tensor]) -> Tensor:
    km = ad.matmul(tokens, params["agg.wkm"])
    return ad.add(ad.matmul(params["agg.qm"], ad.transpose(km)), params["agg.beta"])


def masked_attention_layer(tokens: Tensor, params: dict[str, Tensor], prefix: str,
                           mask: Tensor, d_k: int) -> tuple[Tensor, Tensor]:
    """One attention layer; returns (new tokens, attention weights)."""
    q = ad.matmul(tokens, params[prefix + "wq"])
    k = ad.matmul(tokens, params[prefix + "wk"])
    v = ad.matmul(tokens, params[prefix + "wv"])
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_k))
    attn = ad.masked_softmax(scores, mask)
    mixed = ad.matmul(attn, v)
    x = layer_norm(ad.add(tokens, mixed), params[prefix + "ln1_g"], params[prefix + "ln1_b"])
    hidden = ad.relu(ad.add(ad.matmul(x, params[prefix + "ffn_w1"]), params[prefix + "ffn_b1"]))
    ff = ad.add(ad.matmul(hidden, params[prefix + "ffn_w2"]), params[prefix + "ffn_b2"])
    out = layer_norm(ad.add(x, ff), params[prefix + "ln2_g"], params[prefix + "ln2_b"])
    return out, attn


def aggregate(tokens: Tensor, params: dict[str, Tensor], mask_out: Tensor,
              d_k: int) -> tuple[Tensor, Tensor]:
    """Single-query masked attention over the final tokens -> (B, d) features."""
    k = ad.matmul(tokens, params["agg.wk"])
    v = ad.matmul(tokens, params["agg.wv"])
    scores = ad.scale(ad.matmul(params["agg.q"], ad.transpose(k)), 1.0 / np.sqrt(d_k))
    attn = ad.masked_softmax(scores, mask_out)
    feat = ad.matmul(attn, v)                       # (B, 1, d)
    return ad.reshape(feat, (feat.shape[0], feat.shape[2])), attn


def run_attention_stack(tokens: Tensor, params: dict[str, Tensor], cfg: TrunkConfig,
                        mode: str = "train",
                        noise_rng: Optional[np.random.Generator] = None,
                        masks_override: Optional[MaskSet] = None,
                        want_records: bool = False,
                        ) -> tuple[Tensor, Optional[MaskSet], Optional[list[AttnRecord]]]:
    """Layer stack plus aggregation, sampling masks from evolving tokens."""
    sampling = masks_override is None and "agg.qm" in params
    x = tokens
    layer_masks: list[LayerMask] = []
    records: list[AttnRecord] = [] if want_records else None
    for l in range(cfg.n_layers):
        if masks_override is not None:
            lm = masks_override.layers[l]
        elif sampling:
            logits = _mask_logits(x, params, f"layer{l}.")
            soft, hard = sample_mask_values(logits, mode, cfg.tau, noise_rng)
            lm = LayerMask(logits, soft, hard)
        else:
            b, n = x.shape[0], x.shape[1]
            lm = LayerMask(None, None, Tensor(np.ones((b, n, n)), dtype=x.data.dtype))
        layer_masks.append(lm)
        x, attn = masked_attention_layer(x, params, f"layer{l}.", lm.hard, cfg.d_k)
        if want_records:
            records.append(AttnRecord(l, attn.data.copy(), lm.hard.data.copy()))

    if masks_override is not None:
        om = masks_override.out
    elif sampling:
        logits = _agg_mask_logits(x, params)
        soft, hard = sample_mask_values(logits, mode, cfg.tau, noise_rng)
        om = LayerMask(logits, soft, hard)
    else:
        b, n = x.shape[0], x.shape[1]
        om = LayerMask(None, None, Tensor(np.ones((b, 1, n)), dtype=x.data.dtype))
    features, agg_attn = aggregate(x, params, om.hard, cfg.d_k)
    if want_records:
        records.append(AttnRecord(-1, agg_attn.data.copy(), om.hard.data.copy()))

    masks = MaskSet(layers=layer_masks, out=om, tau=cfg.tau, mode=mode) \
        if (sampling or masks_override is not None) else None
    if masks_override is not None:
        masks = masks_override
    return features, masks, records


def sample_masks(params: dict[str, Tensor], tokens: Tensor, mode: str,
                 rng: Optional[np.random.Generator], cfg: TrunkConfig) -> MaskSet:
    """Masks for the whole stack, starting from the given input tokens.

    Layer masks beyond the first depend on intermediate token representations,
    so this runs the attention stack and discards the features.
    """
    _, masks, _ = run_attention_stack(tokens, params, cfg, mode=mode, noise_rng=rng)
    return masks


def forward_trunk(obs: Tensor, params: dict[str, Tensor], cfg: TrunkConfig,
                  mode: str = "train",
                  noise_rng: Optional[np.random.Generator] = None,
                  masks_override: Optional[MaskSet] = None,
                  want_records: bool = False) -> TrunkOutput:
    """tokenize -> masked attention layers -> aggregation."""
    grid = tokenize(obs, params)
    features, masks, records = run_attention_stack(
        grid.tokens, params, cfg, mode=mode, noise_rng=noise_rng,
        masks_override=masks_override, want_records=want_records)
    return TrunkOutput(features=features, masks=masks, records=records, grid=grid)
