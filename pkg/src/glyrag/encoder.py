"""Multimodal encoder: CGM patches plus a context token, fused into one embedding ``z``.

Pipeline per window: patchify -> linear patch embedding -> sinusoidal positions
-> pre-norm transformer -> mean pool (``z_bgl``) -> two-token self-attention
with the projected summary embedding (``z_ctx``) -> mean of the two tokens
(``z``). A stacked LSTM over the patch states, joined with ``z``, gives the
pretraining forecast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from glyrag import autodiff as ad
from glyrag import nn
from glyrag.autodiff import Tensor
from glyrag.config import PatchConfig, TrainConfig


def n_patches(length: int, patch_len: int, stride: int) -> int:
    if not 1 <= stride <= patch_len <= length:
        raise ValueError(f"need 1 <= stride <= patch_len <= length, got {length}, {patch_len}, {stride}")
    return -(-(length - patch_len) // stride) + 1


def patch_starts(length: int, patch_len: int, stride: int) -> list[int]:
    """Start index of each patch; a final overrunning patch is shifted left to end at ``length``."""
    n = n_patches(length, patch_len, stride)
    return [min(i * stride, length - patch_len) for i in range(n)]


def patchify(x, cfg: PatchConfig) -> np.ndarray:
    """``(L,)`` or ``(B, L)`` -> ``(N, L_p)`` or ``(B, N, L_p)``."""
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[-1]
    starts = patch_starts(length, cfg.patch_len, cfg.stride)
    idx = np.asarray(starts)[:, None] + np.arange(cfg.patch_len)[None, :]
    return x[..., idx]


def embed_patches(patches, w_bgl: Tensor) -> Tensor:
    return ad.matmul(ad.as_tensor(patches), w_bgl)


def pool(states: Tensor) -> Tensor:
    """Mean over the token axis (second to last)."""
    return ad.mean(states, axis=-2)


def cross_translation_loss(e_bgl: Tensor, e_ctx: Tensor, t_bc, t_cb) -> Tensor:
    """Per-sample ``|T_bc(e_bgl) - e_ctx|^2 + |T_cb(e_ctx) - e_bgl|^2``, averaged over the batch.

    Targets are detached so each translator only pulls its own input toward a
    fixed point.
    """
    fwd = ad.sub(t_bc(e_bgl), e_ctx.detach())
    bwd = ad.sub(t_cb(e_ctx), e_bgl.detach())
    per = ad.add(ad.sum_squares(fwd, axis=-1), ad.sum_squares(bwd, axis=-1))
    return ad.mean(per) if per.ndim else per


def last_value_anchor(x, horizon: int) -> np.ndarray:
    """``(B, horizon)`` copies of each window's final input sample."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.repeat(x[:, -1:], horizon, axis=1)


class EncoderBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int, dropout: float, rng):
        super().__init__()
        self.ln1 = self.add_module("ln1", nn.LayerNorm(d))
        self.attn = self.add_module("attn", nn.MultiHeadAttention(d, n_heads, rng))
        self.ln2 = self.add_module("ln2", nn.LayerNorm(d))
        self.ff = self.add_module("ff", nn.MLP([d, d_ff, d], rng))
        self.p = dropout

    def __call__(self, x: Tensor, drop_rng) -> Tensor:
        h = self.attn(self.ln1(x))
        x = ad.add(x, ad.dropout(h, self.p, drop_rng, self.training))
        h = self.ff(self.ln2(x))
        return ad.add(x, ad.dropout(h, self.p, drop_rng, self.training))


class Identity(nn.Module):
    def __call__(self, x):
        return x


@dataclass
class EncoderOutput:
    yhat: Tensor  # (B, 12) pretraining forecast, normalised units
    z: Tensor  # (B, d) fused representation used for retrieval
    z_bgl: Tensor
    z_ctx: Tensor | None
    patch_states: Tensor  # (B, N, d)
    fused_tokens: Tensor | None  # (B, 2, d)


class GlyRAGEncoder(nn.Module):
    def __init__(self, cfg: TrainConfig, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        e, p = cfg.encoder, cfg.patch
        d = e.d_model
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.drop_rng = np.random.default_rng(rng.integers(2**63 - 1))
        self.n_patches = p.n_patches
        self.pe = nn.sinusoidal_pe(self.n_patches, d)
        self.w_bgl = self.add_param("w_bgl", nn.uniform_init(rng, (p.patch_len, d), p.patch_len))
        self.blocks = [
            self.add_module(f"block{i}", EncoderBlock(d, e.n_heads, e.d_ff, e.dropout, rng))
            for i in range(e.n_layers)
        ]
        if cfg.use_context:
            self.w_text = self.add_param("w_text", nn.uniform_init(rng, (e.text_dim, d), e.text_dim))
            if cfg.use_context_attention:
                self.fusion = self.add_module("fusion", nn.MultiHeadAttention(d, e.fusion_heads, rng))
            else:
                self.fusion = self.add_module("fusion_linear", nn.Linear(2 * d, d, rng))
            if e.translator == "mlp":
                th = e.translation_hidden
                self.t_bc = self.add_module("t_bc", nn.MLP([d, th, th, d], rng))
                self.t_cb = self.add_module("t_cb", nn.MLP([d, th, th, d], rng))
            else:
                self.t_bc = self.add_module("t_bc", nn.Linear(d, d, rng))
                self.t_cb = self.add_module("t_cb", nn.Linear(d, d, rng))
        self.lstm = self.add_module("head_lstm", nn.LSTM(d, e.lstm_hidden, e.lstm_layers, rng))
        self.head = self.add_module("head_out", nn.Linear(e.lstm_hidden + d, e.horizon, rng))

    # stages ------------------------------------------------------------------

    def embed(self, x) -> Tensor:
        patches = patchify(x, self.cfg.patch)
        return ad.add(embed_patches(patches, self.w_bgl), self.pe)

    def encode_sequence(self, tokens: Tensor) -> Tensor:
        for block in self.blocks:
            tokens = block(tokens, self.drop_rng)
        return tokens

    def project_context(self, ctx_raw) -> Tensor:
        from glyrag.context import project_context

        return project_context(ctx_raw, self.w_text)

    def fuse(self, z_bgl: Tensor, z_ctx: Tensor) -> tuple[Tensor, Tensor | None]:
        """Return ``(z, fused_tokens)``; tokens are ``None`` in the concat+linear variant."""
        if not self.cfg.use_context_attention:
            return self.fusion(ad.concat([z_bgl, z_ctx], axis=-1)), None
        tokens = ad.stack([z_bgl, z_ctx], axis=-2)
        fused = ad.add(tokens, self.fusion(tokens))
        return ad.mean(fused, axis=-2), fused

    def forecast(self, patch_states: Tensor, z: Tensor) -> Tensor:
        _, finals = self.lstm(patch_states)
        h_last = finals[-1][0]
        return self.head(ad.concat([h_last, z], axis=-1))

    def __call__(self, x, ctx_raw=None) -> EncoderOutput:
        """``x``: ``(B, 36)`` normalised glucose; ``ctx_raw``: ``(B, text_dim)`` summary embeddings."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        states = self.encode_sequence(self.embed(x))
        z_bgl = pool(states)
        z_ctx = fused = None
        if self.cfg.use_context:
            if ctx_raw is None:
                raise ValueError("this configuration needs summary embeddings")
            z_ctx = self.project_context(np.atleast_2d(np.asarray(ctx_raw, dtype=np.float64)))
            z, fused = self.fuse(z_bgl, z_ctx)
        else:
            z = z_bgl
        yhat = self.forecast(states, z)
        if self.cfg.encoder.anchor_last:
            yhat = ad.add(yhat, last_value_anchor(x, self.cfg.encoder.horizon))
        return EncoderOutput(yhat, z, z_bgl, z_ctx, states, fused)

    def translation_loss(self, out: EncoderOutput) -> Tensor:
        if out.z_ctx is None:
            return Tensor(np.asarray(0.0))
        return cross_translation_loss(out.z_bgl, out.z_ctx, self.t_bc, self.t_cb)

    def embed_windows(self, x, ctx_raw=None) -> np.ndarray:
        """Eval-mode ``z`` for a batch, without recording a graph."""
        was = self.training
        self.eval()
        try:
            with ad.no_grad():
                return self(x, ctx_raw).z.data.copy()
        finally:
            self.train(was)


@dataclass
class PretrainLoss:
    total: Tensor
    forecast: float
    trans: float


def forward_pretrain(model: GlyRAGEncoder, x, ctx_raw, y, lam: float | None = None,
                     delta: float | None = None) -> tuple[EncoderOutput, PretrainLoss]:
    """Forward pass plus ``L = huber(yhat, y) + lam * L_trans``.

    With ``lam == 0`` the translation term is evaluated for logging only and
    contributes nothing to the graph.
    """
    cfg = model.cfg
    lam = cfg.effective_lambda if lam is None else lam
    delta = cfg.huber_delta if delta is None else delta
    out = model(x, ctx_raw)
    l_fc = ad.huber_loss(out.yhat, np.atleast_2d(np.asarray(y, dtype=np.float64)), delta)
    if lam == 0.0:
        with ad.no_grad():
            l_tr = model.translation_loss(out)
        total = l_fc
    else:
        l_tr = model.translation_loss(out)
        total = ad.add(l_fc, ad.scale(l_tr, lam))
    return out, PretrainLoss(total, float(l_fc.data), float(l_tr.data))
