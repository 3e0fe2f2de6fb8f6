"""Networks for the diffusion completion module.

Per-modality latent autoencoders, the variable-arity condition fusion
network, and the conditioned noise predictor (an MLP U-Net over flat
latents with a cross-attention block at each encoder level).
"""

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor


def init_linear(rng, n_in, n_out):
    std = np.sqrt(2.0 / (n_in + n_out))
    w = Tensor(rng.normal(scale=std, size=(n_in, n_out)), requires_grad=True)
    b = Tensor(np.zeros(n_out), requires_grad=True)
    return w, b


def linear(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def timestep_embedding(t, dim=64):
    """Sinusoidal embedding of integer steps, as a constant tensor."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return Tensor(emb)


def cross_attention(h, cond_tokens, w_q, w_k, w_v, return_weights=False):
    """Scaled dot-product attention from a hidden state onto condition tokens.

    Each token is a (batch, d_c) matrix; queries come from the hidden state.
    With a single token the softmax weight is exactly one and the output is
    that token's value projection.
    """
    q = ad.matmul(h, w_q)
    scale = 1.0 / np.sqrt(h.data.shape[1])
    scores = []
    for c in cond_tokens:
        k = ad.matmul(c, w_k)
        s = ad.sum_(ad.mul(q, k), axis=1, keepdims=True)
        scores.append(ad.mul(s, scale))
    attn = ad.softmax(ad.concat(scores, axis=1), axis=1)
    out = None
    for j, c in enumerate(cond_tokens):
        v = ad.matmul(c, w_v)
        term = ad.scale_rows(v, ad.reshape(attn[:, j:j + 1], (-1,)))
        out = term if out is None else ad.add(out, term)
    if return_weights:
        return out, attn
    return out


class ModalityAutoencoder:
    """Two-layer MLP encoder/decoder between feature space and the shared latent."""

    def __init__(self, rng, feature_dim, latent_dim, hidden):
        self.feature_dim = feature_dim
        self.latent_dim = latent_dim
        self.enc_w1, self.enc_b1 = init_linear(rng, feature_dim, hidden)
        self.enc_w2, self.enc_b2 = init_linear(rng, hidden, latent_dim)
        self.dec_w1, self.dec_b1 = init_linear(rng, latent_dim, hidden)
        self.dec_w2, self.dec_b2 = init_linear(rng, hidden, feature_dim)
        self.mu = np.zeros(feature_dim)
        self.sd = np.ones(feature_dim)

    def set_scaler(self, rows):
        """Freeze per-dimension standardization from observed rows."""
        self.mu = rows.mean(axis=0).astype(np.float64)
        sd = rows.std(axis=0).astype(np.float64)
        self.sd = np.where(sd > 1e-6, sd, 1.0)

    def encode(self, x):
        x = ad.as_tensor(x)
        x_std = ad.div(ad.sub(x, Tensor(self.mu)), Tensor(self.sd))
        h = ad.leaky_relu(linear(x_std, self.enc_w1, self.enc_b1))
        return linear(h, self.enc_w2, self.enc_b2)

    def decode(self, v):
        h = ad.leaky_relu(linear(v, self.dec_w1, self.dec_b1))
        out = linear(h, self.dec_w2, self.dec_b2)
        return ad.add(ad.mul(out, Tensor(self.sd)), Tensor(self.mu))

    def params(self, prefix):
        return {
            f"{prefix}.enc_w1": self.enc_w1, f"{prefix}.enc_b1": self.enc_b1,
            f"{prefix}.enc_w2": self.enc_w2, f"{prefix}.enc_b2": self.enc_b2,
            f"{prefix}.dec_w1": self.dec_w1, f"{prefix}.dec_b1": self.dec_b1,
            f"{prefix}.dec_w2": self.dec_w2, f"{prefix}.dec_b2": self.dec_b2,
        }

    def scaler_state(self):
        return {"mu": self.mu.copy(), "sd": self.sd.copy()}

    def restore_scaler(self, state):
        self.mu = np.array(state["mu"])
        self.sd = np.array(state["sd"])


class ConditionFusionNet:
    """Project each available modality latent, average, and project again."""

    def __init__(self, rng, n_modalities, latent_dim, cond_dim):
        self.n_modalities = n_modalities
        self.cond_dim = cond_dim
        self.proj = [init_linear(rng, latent_dim, cond_dim) for _ in range(n_modalities)]
        self.out_w, self.out_b = init_linear(rng, cond_dim, cond_dim)

    def fuse_batch(self, latents_by_mod, avail):
        """Fused condition per row.

        latents_by_mod: per-modality (batch, latent_dim) tensors; avail: a
        (batch, n_modalities) 0/1 array marking which entries participate.
        Rows with no available modality come out as exact zero vectors.
        """
        avail = np.asarray(avail, dtype=np.float64)
        total = None
        for m, latents in enumerate(latents_by_mod):
            if latents is None or avail[:, m].sum() == 0:
                continue
            w, b = self.proj[m]
            term = ad.scale_rows(linear(latents, w, b), Tensor(avail[:, m]))
            total = term if total is None else ad.add(total, term)
        counts = avail.sum(axis=1)
        has_any = (counts > 0).astype(np.float64)
        if total is None:
            batch = avail.shape[0]
            return Tensor(np.zeros((batch, self.cond_dim)))
        mean = ad.scale_rows(total, Tensor(1.0 / np.maximum(counts, 1.0)))
        fused = linear(mean, self.out_w, self.out_b)
        return ad.scale_rows(fused, Tensor(has_any))

    def params(self, prefix):
        out = {}
        for m, (w, b) in enumerate(self.proj):
            out[f"{prefix}.proj{m}_w"] = w
            out[f"{prefix}.proj{m}_b"] = b
        out[f"{prefix}.out_w"] = self.out_w
        out[f"{prefix}.out_b"] = self.out_b
        return out


class DenoiserNetwork:
    """Conditioned noise predictor: MLP U-Net with per-level cross-attention.

    Encoder widths are [d, d/2, d/4] with a bottleneck and a mirrored decoder
    joined by skip concatenation; a sinusoidal timestep embedding is projected
    and added at each encoder level, and each level fuses the condition with
    one attention block.
    """

    TIME_DIM = 64

    def __init__(self, rng, latent_dim, cond_dim):
        if latent_dim % 4 != 0:
            raise ValueError("latent dim must be divisible by 4")
        d = latent_dim
        self.latent_dim = d
        self.cond_dim = cond_dim
        widths = [d, d // 2, d // 4]
        self.widths = widths

        self.time_proj = [init_linear(rng, self.TIME_DIM, w) for w in widths]
        self.attn = []
        for w in widths:
            wq = Tensor(rng.normal(scale=np.sqrt(1.0 / w), size=(w, w)), requires_grad=True)
            wk = Tensor(rng.normal(scale=np.sqrt(1.0 / cond_dim), size=(cond_dim, w)), requires_grad=True)
            wv = Tensor(rng.normal(scale=np.sqrt(1.0 / cond_dim), size=(cond_dim, w)), requires_grad=True)
            self.attn.append((wq, wk, wv))
        self.down1 = init_linear(rng, d, d // 2)
        self.down2 = init_linear(rng, d // 2, d // 4)
        self.mid = init_linear(rng, d // 4, d // 4)
        self.up2 = init_linear(rng, d // 4 + d // 4, d // 2)
        self.up1 = init_linear(rng, d // 2 + d // 2, d)
        self.out = init_linear(rng, d + d, d)

    def forward(self, v_t, cond, t):
        v_t = ad.as_tensor(v_t)
        cond = ad.as_tensor(cond)
        temb = timestep_embedding(t, self.TIME_DIM)

        def level(h, idx):
            w, b = self.time_proj[idx]
            h = ad.add(h, linear(temb, w, b))
            wq, wk, wv = self.attn[idx]
            return ad.add(h, cross_attention(h, [cond], wq, wk, wv))

        h0 = level(v_t, 0)
        h1 = level(ad.leaky_relu(linear(h0, *self.down1)), 1)
        h2 = level(ad.leaky_relu(linear(h1, *self.down2)), 2)
        hb = ad.leaky_relu(linear(h2, *self.mid))
        u2 = ad.leaky_relu(linear(ad.concat([hb, h2], axis=1), *self.up2))
        u1 = ad.leaky_relu(linear(ad.concat([u2, h1], axis=1), *self.up1))
        return linear(ad.concat([u1, h0], axis=1), *self.out)

    def params(self, prefix):
        out = {}
        for i, (w, b) in enumerate(self.time_proj):
            out[f"{prefix}.time{i}_w"] = w
            out[f"{prefix}.time{i}_b"] = b
        for i, (wq, wk, wv) in enumerate(self.attn):
            out[f"{prefix}.attn{i}_q"] = wq
            out[f"{prefix}.attn{i}_k"] = wk
            out[f"{prefix}.attn{i}_v"] = wv
        for name, (w, b) in [("down1", self.down1), ("down2", self.down2),
                             ("mid", self.mid), ("up2", self.up2),
                             ("up1", self.up1), ("out", self.out)]:
            out[f"{prefix}.{name}_w"] = w
            out[f"{prefix}.{name}_b"] = b
        return out
