"""Trainable mask decoder: two-way attention between prompt tokens and image tokens.

Tokens are [score token, mask token, prompt tokens...].  Each of the two
blocks runs token self-attention, token-to-image cross-attention, a token
MLP and image-to-token cross-attention (post-norm residuals).  A final
token-to-image attention follows.  The image grid is upscaled ×4 by two
stride-2 transposed convs; an MLP on the mask token yields per-channel
weights whose dot product with the upscaled features gives low-res logits,
resized bilinearly to the full image.  The score token feeds linear +
sigmoid.

Every array carries a leading batch axis B; all samples of a batch must
share the prompt-token count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .lora import mha, mha_backward
from .numerics import (LayerNorm, Linear, Module, Param, bilinear_upsample, bilinear_upsample_backward,
                       conv_transpose2d, conv_transpose2d_backward, sigmoid)
from .prompt_encoder import dense_positional_encoding


@dataclass
class DecoderOutput:
    mask_logits: np.ndarray  # H × W
    score: float


class Attention(Module):
    def __init__(self, rng, d: int, heads: int):
        if d % heads:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        self.q_proj = Linear.init(rng, d, d)
        # no key bias: softmax is shift-invariant, so its gradient is identically zero
        self.k_proj = Linear.init(rng, d, d, bias=False)
        self.v_proj = Linear.init(rng, d, d)
        self.out_proj = Linear.init(rng, d, d)
        self._heads = heads

    def forward(self, q, k, v):
        qp, cq = self.q_proj.forward(q)
        kp, ck = self.k_proj.forward(k)
        vp, cv = self.v_proj.forward(v)
        o, core = mha(qp, kp, vp, self._heads)
        y, co = self.out_proj.forward(o)
        return y, (cq, ck, cv, core, co)

    def backward(self, cache, dy):
        cq, ck, cv, core, co = cache
        dq, dk, dv = mha_backward(core, self.out_proj.backward(co, dy))
        return self.q_proj.backward(cq, dq), self.k_proj.backward(ck, dk), self.v_proj.backward(cv, dv)


class TokenMLP(Module):
    def __init__(self, rng, d: int, hidden: int, d_out: int | None = None):
        self.fc1 = Linear.init(rng, d, hidden)
        self.fc2 = Linear.init(rng, hidden, d if d_out is None else d_out)

    def forward(self, x):
        h, c1 = self.fc1.forward(x)
        y, c2 = self.fc2.forward(np.maximum(h, 0.0))
        return y, (c1, h, c2)

    def backward(self, cache, dy):
        c1, h, c2 = cache
        return self.fc1.backward(c1, self.fc2.backward(c2, dy) * (h > 0))


class TwoWayBlock(Module):
    def __init__(self, rng, d: int, heads: int, mlp_ratio: int = 2):
        self.self_attn = Attention(rng, d, heads)
        self.norm1 = LayerNorm(d)
        self.cross_t2i = Attention(rng, d, heads)
        self.norm2 = LayerNorm(d)
        self.mlp = TokenMLP(rng, d, mlp_ratio * d)
        self.norm3 = LayerNorm(d)
        self.cross_i2t = Attention(rng, d, heads)
        self.norm4 = LayerNorm(d)

    def forward(self, queries, keys, query_pe, key_pe):
        q = queries + query_pe
        a, c_sa = self.self_attn.forward(q, q, queries)
        queries, c_n1 = self.norm1.forward(queries + a)

        q = queries + query_pe
        k = keys + key_pe
        a, c_t2i = self.cross_t2i.forward(q, k, keys)
        queries, c_n2 = self.norm2.forward(queries + a)

        m, c_mlp = self.mlp.forward(queries)
        queries, c_n3 = self.norm3.forward(queries + m)

        q = queries + query_pe
        a, c_i2t = self.cross_i2t.forward(k, q, queries)
        keys, c_n4 = self.norm4.forward(keys + a)
        return queries, keys, (c_sa, c_n1, c_t2i, c_n2, c_mlp, c_n3, c_i2t, c_n4)

    def backward(self, cache, dqueries, dkeys):
        """Returns (d queries_in, d keys_in, d query_pe); key_pe is constant."""
        c_sa, c_n1, c_t2i, c_n2, c_mlp, c_n3, c_i2t, c_n4 = cache
        ds = self.norm4.backward(c_n4, dkeys)
        dkeys_in = ds.copy()
        dk_a, dq_a, dv_a = self.cross_i2t.backward(c_i2t, ds)
        dkeys_in += dk_a          # k = keys_in + key_pe
        dqueries = dqueries + dq_a + dv_a
        dpe = dq_a.copy()

        ds = self.norm3.backward(c_n3, dqueries)
        dqueries = ds + self.mlp.backward(c_mlp, ds)

        ds = self.norm2.backward(c_n2, dqueries)
        dq_a, dk_a, dv_a = self.cross_t2i.backward(c_t2i, ds)
        dqueries = ds + dq_a
        dpe += dq_a
        dkeys_in += dk_a + dv_a

        ds = self.norm1.backward(c_n1, dqueries)
        dq_a, dk_a, dv_a = self.self_attn.backward(c_sa, ds)
        dqueries = ds + dq_a + dk_a + dv_a
        dpe += dq_a + dk_a
        return dqueries, dkeys_in, dpe


class MaskDecoder(Module):
    def __init__(self, rng: np.random.Generator, d: int = 64, heads: int = 4, grid: int = 8,
                 image_size: int = 64, depth: int = 2):
        if d % 8:
            raise ConfigError(f"decoder width must be divisible by 8, got {d}")
        if image_size % (4 * grid):
            raise ConfigError(f"image size {image_size} must be a multiple of 4·grid = {4 * grid}")
        self._d, self._grid, self._image_size = d, grid, image_size
        self._factor = image_size // (4 * grid)
        self._key_pe = dense_positional_encoding(grid, image_size, d)
        self.score_token = Param(rng.normal(0.0, 1.0, size=d))
        self.mask_token = Param(rng.normal(0.0, 1.0, size=d))
        self.blocks = [TwoWayBlock(rng, d, heads) for _ in range(depth)]
        self.final_attn = Attention(rng, d, heads)
        self.final_norm = LayerNorm(d)
        c1, c2 = d // 4, d // 8
        self.up1_kernel = Param(rng.normal(0.0, np.sqrt(2.0 / d), size=(d, c1, 2, 2)))
        self.up1_bias = Param(np.zeros(c1))
        self.up2_kernel = Param(rng.normal(0.0, np.sqrt(2.0 / c1), size=(c1, c2, 2, 2)))
        self.up2_bias = Param(np.zeros(c2))
        self.hyper = TokenMLP(rng, d, d, c2)
        self.score_head = Linear.init(rng, d, 1)

    @property
    def d(self) -> int:
        return self._d

    def forward(self, img, prm):
        """img B×d×g×g, prm B×n×d -> (B×H×W logits, B scores, cache)."""
        img = np.asarray(img, dtype=np.float64)
        prm = np.asarray(prm, dtype=np.float64)
        d, g = self._d, self._grid
        if img.ndim != 4 or img.shape[1:] != (d, g, g):
            raise DimensionError(f"image embedding must be B×{d}×{g}×{g}, got {img.shape}")
        if prm.ndim != 3 or prm.shape[-1] != d or prm.shape[0] != img.shape[0]:
            raise DimensionError(f"prompt tokens must be B×n×{d}, got {prm.shape}")
        b = img.shape[0]
        out_tok = np.broadcast_to(np.stack([self.score_token.value, self.mask_token.value]), (b, 2, d))
        tokens = np.concatenate([out_tok, prm], axis=1)
        keys = img.reshape(b, d, g * g).transpose(0, 2, 1)
        key_pe = self._key_pe

        queries = tokens
        c_blocks = []
        for blk in self.blocks:
            queries, keys, c = blk.forward(queries, keys, tokens, key_pe)
            c_blocks.append(c)
        a, c_fa = self.final_attn.forward(queries + tokens, keys + key_pe, keys)
        queries, c_fn = self.final_norm.forward(queries + a)

        src = keys.transpose(0, 2, 1).reshape(b, d, g, g)
        u1 = conv_transpose2d(src, self.up1_kernel.value, self.up1_bias.value)
        r1 = np.maximum(u1, 0.0)
        u2 = conv_transpose2d(r1, self.up2_kernel.value, self.up2_bias.value)
        r2 = np.maximum(u2, 0.0)

        w, c_hyp = self.hyper.forward(queries[:, 1])
        low = np.einsum("bc,bchw->bhw", w, r2)
        logits = bilinear_upsample(low, self._factor) if self._factor > 1 else low

        s_lin, c_sc = self.score_head.forward(queries[:, 0])
        score = sigmoid(s_lin[:, 0])
        cache = (c_blocks, c_fa, c_fn, src, u1, r1, u2, r2, w, c_hyp, c_sc, score, b)
        return logits, score, cache

    def backward(self, cache, dlogits, dscore):
        """Accumulates decoder grads; returns (d img B×d×g×g, d prompt tokens B×n×d)."""
        c_blocks, c_fa, c_fn, src, u1, r1, u2, r2, w, c_hyp, c_sc, score, b = cache
        d, g = self._d, self._grid
        dlow = bilinear_upsample_backward(dlogits, self._factor) if self._factor > 1 else dlogits

        dw = np.einsum("bhw,bchw->bc", dlow, r2)
        dr2 = np.einsum("bc,bhw->bchw", w, dlow)
        dq_mask = self.hyper.backward(c_hyp, dw)
        ds_lin = (dscore * score * (1.0 - score))[:, None]
        dq_score = self.score_head.backward(c_sc, ds_lin)

        du2 = dr2 * (u2 > 0)
        dr1, dk2, db2 = conv_transpose2d_backward(r1, self.up2_kernel.value, du2)
        self.up2_kernel.accumulate(dk2)
        self.up2_bias.accumulate(db2)
        du1 = dr1 * (u1 > 0)
        dsrc, dk1, db1 = conv_transpose2d_backward(src, self.up1_kernel.value, du1)
        self.up1_kernel.accumulate(dk1)
        self.up1_bias.accumulate(db1)
        dkeys = dsrc.reshape(b, d, g * g).transpose(0, 2, 1)

        n_tok = c_fn[0].shape[1]
        dqueries = np.zeros((b, n_tok, d))
        dqueries[:, 0] += dq_score
        dqueries[:, 1] += dq_mask
        ds = self.final_norm.backward(c_fn, dqueries)
        dq_a, dk_a, dv_a = self.final_attn.backward(c_fa, ds)
        dqueries = ds + dq_a
        dtokens = dq_a.copy()
        dkeys = dkeys + dk_a + dv_a

        for blk, c in zip(reversed(self.blocks), reversed(c_blocks)):
            dqueries, dkeys, dpe = blk.backward(c, dqueries, dkeys)
            dtokens += dpe
        dtokens += dqueries

        self.score_token.accumulate(dtokens[:, 0].sum(axis=0))
        self.mask_token.accumulate(dtokens[:, 1].sum(axis=0))
        dimg = dkeys.transpose(0, 2, 1).reshape(b, d, g, g)
        return dimg, dtokens[:, 2:]


def decode(img, prm, decoder: MaskDecoder) -> DecoderOutput:
    """Single image: ImageEmbedding + PromptEmbedding -> DecoderOutput."""
    grid = np.asarray(getattr(img, "grid", img))
    tokens = np.asarray(getattr(prm, "tokens", prm))
    if grid.shape[0] != decoder.d or tokens.ndim != 2 or tokens.shape[1] != decoder.d:
        raise DimensionError(
            f"embedding widths disagree: image {grid.shape}, prompts {tokens.shape}, decoder d={decoder.d}")
    logits, score, _ = decoder.forward(grid[None], tokens[None])
    return DecoderOutput(logits[0], float(score[0]))


def binarize(out: DecoderOutput, threshold: float = 0.0) -> np.ndarray:
    return (np.asarray(out.mask_logits) >= threshold).astype(np.uint8)
