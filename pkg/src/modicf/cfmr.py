"""Counterfactual multimodal recommendation.

A graph recommender over ID embeddings and completed modality features,
an item-only predictor that captures the content-driven direct effect on
ranking, and the counterfactual score adjustment that removes it.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mddc.networks import init_linear, linear


class FeatureEncoder:
    """Two-layer MLP from completed feature space to the shared latent."""

    def __init__(self, rng, feature_dim, latent_dim, hidden):
        self.w1, self.b1 = init_linear(rng, feature_dim, hidden)
        self.w2, self.b2 = init_linear(rng, hidden, latent_dim)
        self.mu = np.zeros(feature_dim)
        self.sd = np.ones(feature_dim)

    def set_scaler(self, rows):
        self.mu = rows.mean(axis=0).astype(np.float64)
        sd = rows.std(axis=0).astype(np.float64)
        self.sd = np.where(sd > 1e-6, sd, 1.0)

    def encode(self, x):
        x = ad.as_tensor(x)
        x_std = ad.div(ad.sub(x, Tensor(self.mu)), Tensor(self.sd))
        h = ad.leaky_relu(linear(x_std, self.w1, self.b1))
        return linear(h, self.w2, self.b2)

    def params(self, prefix):
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


class ItemPredictor:
    """Content-only score: concatenated modality latents through a small MLP."""

    def __init__(self, rng, n_modalities, latent_dim):
        self.w1, self.b1 = init_linear(rng, n_modalities * latent_dim, latent_dim)
        self.w2, self.b2 = init_linear(rng, latent_dim, 1)

    def score(self, latents):
        x = ad.concat(latents, axis=1)
        h = ad.leaky_relu(linear(x, self.w1, self.b1))
        return ad.reshape(linear(h, self.w2, self.b2), (-1,))

    def params(self, prefix):
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


class RecommenderState:
    """Learnable tables and networks of the multimodal recommender."""

    def __init__(self, rng, n_users, n_items, feature_dims, d, heads, enc_hidden):
        if d % heads != 0:
            raise ValueError(f"head count {heads} must divide embedding dim {d}")
        self.n_users = n_users
        self.n_items = n_items
        self.d = d
        self.heads = heads
        self.E_U = Tensor(rng.normal(scale=0.1, size=(n_users, d)), requires_grad=True)
        self.E_I = Tensor(rng.normal(scale=0.1, size=(n_items, d)), requires_grad=True)
        self.encoders = [FeatureEncoder(rng, dm, d, enc_hidden) for dm in feature_dims]
        dh = d // heads
        scale = np.sqrt(1.0 / d)
        self.W_Q = [Tensor(rng.normal(scale=scale, size=(d, dh)), requires_grad=True)
                    for _ in range(heads)]
        self.W_K = [Tensor(rng.normal(scale=scale, size=(d, dh)), requires_grad=True)
                    for _ in range(heads)]
        self.predictor = ItemPredictor(rng, len(feature_dims), d)

    def params(self):
        out = {"cfmr.E_U": self.E_U, "cfmr.E_I": self.E_I}
        for m, enc in enumerate(self.encoders):
            out.update(enc.params(f"cfmr.enc{m}"))
        for h in range(self.heads):
            out[f"cfmr.attn_q{h}"] = self.W_Q[h]
            out[f"cfmr.attn_k{h}"] = self.W_K[h]
        out.update(self.predictor.params("cfmr.item"))
        return out


@dataclass
class ModalityGraph:
    """Top-k content neighborhoods: items per user and users per item."""

    user_neighbors: np.ndarray  # (n_users, k) item ids
    user_sims: np.ndarray
    item_neighbors: np.ndarray  # (n_items, k) user ids
    item_sims: np.ndarray


def normalized_train_adjacency(bundle):
    """Train interactions with the square-root degree normalizations used below."""
    y = bundle.train_matrix().astype(np.float64)
    deg_u = y.sum(axis=1)
    deg_i = y.sum(axis=0)
    inv_su = np.where(deg_u > 0, 1.0 / np.sqrt(deg_u), 0.0)
    inv_si = np.where(deg_i > 0, 1.0 / np.sqrt(deg_i), 0.0)
    user_norm = y * inv_su[:, None]           # rows scaled by 1/sqrt(|N_u|)
    item_norm = y.T * inv_si[:, None]         # rows scaled by 1/sqrt(|N_i|)
    sym = user_norm * inv_si[None, :]         # symmetric normalization
    return user_norm, item_norm, sym


def modality_aware_features(user_norm, item_norm, latents):
    """User profiles from interacted items' latents; item side aggregates those."""
    v_u = ad.matmul(Tensor(user_norm), latents)
    v_i = ad.matmul(Tensor(item_norm), v_u)
    return v_u, v_i


def _cosine_matrix(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    sa = np.where(na > 0, 1.0 / na, 0.0)   # zero rows get similarity 0
    sb = np.where(nb > 0, 1.0 / nb, 0.0)
    return (a * sa[:, None]) @ (b * sb[:, None]).T


def _topk_rows(sims, k):
    k = min(k, sims.shape[1])
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    taken = np.take_along_axis(sims, order, axis=1)
    return order, taken


def build_modality_graph(v_u, v_i, k):
    """Highest-cosine neighborhoods from the modality-aware interaction scores."""
    if k < 1:
        raise ValueError("k must be at least 1")
    a = v_u.data if isinstance(v_u, Tensor) else np.asarray(v_u)
    b = v_i.data if isinstance(v_i, Tensor) else np.asarray(v_i)
    sims = _cosine_matrix(a, b)
    un, us = _topk_rows(sims, k)
    in_, is_ = _topk_rows(sims.T, k)
    return ModalityGraph(user_neighbors=un, user_sims=us,
                         item_neighbors=in_, item_sims=is_)


def _neighbor_adjacency(neighbors, n_cols):
    n_rows, k = neighbors.shape
    adj = np.zeros((n_rows, n_cols))
    rows = np.repeat(np.arange(n_rows), k)
    adj[rows, neighbors.reshape(-1)] = 1.0
    counts = adj.sum(axis=1)
    inv = np.where(counts > 0, 1.0 / np.sqrt(counts), 0.0)
    return adj * inv[:, None]


def aggregate_id_embeddings(graph, e_users, e_items):
    """Pool ID embeddings across the modality graph (items into users and back)."""
    a_u = _neighbor_adjacency(graph.user_neighbors, e_items.data.shape[0])
    a_i = _neighbor_adjacency(graph.item_neighbors, e_users.data.shape[0])
    e_m_u = ad.matmul(Tensor(a_u), e_items)
    e_m_i = ad.matmul(Tensor(a_i), e_users)
    return e_m_u, e_m_i


def cross_modal_attention(per_modality, w_q, w_k, heads):
    """Multi-head attention across modalities, per row.

    For each target modality the scores against every modality are
    softmax-normalized per head; values are the head slices of the raw
    modality embeddings, concatenated back to full width and summed over
    the source modalities. Returns the per-modality results and their mean.
    """
    m_count = len(per_modality)
    d = per_modality[0].data.shape[1]
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    outputs = []
    for m in range(m_count):
        head_outs = []
        for h in range(heads):
            q = ad.matmul(per_modality[m], w_q[h])
            scores = []
            for n in range(m_count):
                k = ad.matmul(per_modality[n], w_k[h])
                s = ad.sum_(ad.mul(q, k), axis=1, keepdims=True)
                scores.append(ad.mul(s, scale))
            attn = ad.softmax(ad.concat(scores, axis=1), axis=1)
            acc = None
            for n in range(m_count):
                val = per_modality[n][:, h * dh:(h + 1) * dh]
                term = ad.scale_rows(val, ad.reshape(attn[:, n:n + 1], (-1,)))
                acc = term if acc is None else ad.add(acc, term)
            head_outs.append(acc)
        outputs.append(ad.concat(head_outs, axis=1))
    mean = ad.mul(_sum_tensors(outputs), 1.0 / m_count)
    return outputs, mean


def _sum_tensors(ts):
    total = ts[0]
    for t in ts[1:]:
        total = ad.add(total, t)
    return total


def _rows_divided_by_sq_norm(x):
    ss = ad.sum_(ad.mul(x, x), axis=1)
    return ad.scale_rows(x, ad.div(1.0, ad.add(ss, 1e-12)))


def high_order_propagation(sym_adj, e0_users, e0_items, depth):
    """Alternating message passing over the normalized train graph.

    Layer read-out is the mean of layers 1..depth (the inputs do not count).
    """
    if depth < 1:
        raise ValueError("depth must be at least 1")
    y = Tensor(sym_adj)
    yt = Tensor(sym_adj.T.copy())
    layers_u, layers_i = [], []
    cur_u, cur_i = e0_users, e0_items
    for _ in range(depth):
        nxt_u = ad.matmul(y, cur_i)
        nxt_i = ad.matmul(yt, cur_u)
        layers_u.append(nxt_u)
        layers_i.append(nxt_i)
        cur_u, cur_i = nxt_u, nxt_i
    out_u = ad.mul(_sum_tensors(layers_u), 1.0 / depth)
    out_i = ad.mul(_sum_tensors(layers_i), 1.0 / depth)
    return out_u, out_i


def _safe_unit_rows(x):
    norms = np.linalg.norm(x.data, axis=1)
    inv = np.where(norms > 0, 1.0, 0.0)
    denom = ad.add(ad.l2norm(x, axis=1), Tensor(np.where(norms > 0, 0.0, 1.0)))
    return ad.scale_rows(ad.scale_rows(x, ad.div(1.0, denom)), Tensor(inv))


def fuse_final(propagated, modality_features, delta):
    """Propagated ID embeddings plus the unit-normalized modality profiles."""
    total = None
    for v in modality_features:
        term = _safe_unit_rows(v)
        total = term if total is None else ad.add(total, term)
    if total is None or delta == 0:
        return propagated
    return ad.add(propagated, ad.mul(total, delta))


def predict_matching(f_u, f_i):
    """Inner-product matching score(s)."""
    if f_u.data.ndim == 1:
        return ad.matmul(f_u, f_i)
    return ad.matmul(f_u, ad.transpose(f_i))


def contrastive_loss(f_users, e_m_users, user_idx=None):
    """Cross-modal alignment loss with the positive pair kept in the denominator.

    For every modality and user, pulls f_u toward e^m_u against two negative
    families over the user set: other users' fused embeddings and other users'
    modality embeddings. user_idx restricts both sums to a batch; the full
    set is used when it is None.
    """
    if user_idx is not None:
        if len(user_idx) < 2:
            raise ValueError("contrastive loss needs at least two users")
        f_users = ad.take_rows(f_users, user_idx)
        e_m_users = [ad.take_rows(e, user_idx) for e in e_m_users]
    elif f_users.data.shape[0] < 2:
        raise ValueError("contrastive loss needs at least two users")
    f_n = _unit_rows_strict(f_users)
    total = None
    for e_m in e_m_users:
        e_n = _unit_rows_strict(e_m)
        pos = ad.sum_(ad.mul(f_n, e_n), axis=1)          # sim(f_u, e^m_u)
        s_fe = ad.matmul(f_n, ad.transpose(e_n))         # sim(f_v, e^m_u), v rows
        s_ee = ad.matmul(e_n, ad.transpose(e_n))         # sim(e^m_v, e^m_u)
        den = ad.add(ad.sum_(ad.exp(s_fe), axis=0), ad.sum_(ad.exp(s_ee), axis=0))
        term = ad.sum_(ad.sub(ad.log(den), pos))
        total = term if total is None else ad.add(total, term)
    return total


def _unit_rows_strict(x):
    return ad.scale_rows(x, ad.div(1.0, ad.l2norm(x, axis=1)))


def bpr_pair_loss(pos_scores, neg_scores):
    """Summed -log sigmoid score-difference over pairs."""
    return ad.neg(ad.sum_(ad.log_sigmoid(ad.sub(pos_scores, neg_scores))))


def bpr_losses(triples, f_users, f_items, item_scores, alpha2):
    """Ranking losses for the recommender and the item predictor on one batch."""
    if not triples:
        raise ValueError("empty triple set")
    u = np.array([t[0] for t in triples])
    ip = np.array([t[1] for t in triples])
    in_ = np.array([t[2] for t in triples])
    fu = ad.take_rows(f_users, u)
    pos = ad.sum_(ad.mul(fu, ad.take_rows(f_items, ip)), axis=1)
    neg = ad.sum_(ad.mul(fu, ad.take_rows(f_items, in_)), axis=1)
    l_ui = bpr_pair_loss(pos, neg)
    l_item = bpr_pair_loss(ad.take_rows(item_scores, ip), ad.take_rows(item_scores, in_))
    combined = ad.add(l_ui, ad.mul(l_item, alpha2))
    return l_ui, l_item, combined


def counterfactual_adjust(matching_scores, item_scores, gamma):
    """Remove the content-only direct effect from the matching scores.

    Applied at inference: y = y_ui * sigm(y_i) - gamma * sigm(y_i). The
    correction for an item is identical for every user.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    matching_scores = np.asarray(matching_scores, dtype=np.float64)
    gate = 1.0 / (1.0 + np.exp(-np.asarray(item_scores, dtype=np.float64)))
    return matching_scores * gate - gamma * gate


class RecommenderForward:
    """One full differentiable pass; holds the tensors the losses need."""

    def __init__(self, f_users, f_items, e_m_users, item_scores, latents,
                 v_m_users, v_m_items, graphs):
        self.f_users = f_users
        self.f_items = f_items
        self.e_m_users = e_m_users
        self.item_scores = item_scores
        self.latents = latents
        self.v_m_users = v_m_users
        self.v_m_items = v_m_items
        self.graphs = graphs


def recommender_forward(state, bundle, features, eta, delta, depth, top_k,
                        graphs=None):
    """Latents, graphs, attention, propagation and final embeddings.

    features are the completed (post-imputation) modality matrices, treated
    as constants. Pass precomputed graphs to reuse a snapshot's structure.
    """
    user_norm, item_norm, sym = normalized_train_adjacency(bundle)
    latents = [enc.encode(features[m]) for m, enc in enumerate(state.encoders)]
    v_m_users, v_m_items = [], []
    for v in latents:
        vu, vi = modality_aware_features(user_norm, item_norm, v)
        v_m_users.append(vu)
        v_m_items.append(vi)
    if graphs is None:
        graphs = [build_modality_graph(vu, vi, top_k)
                  for vu, vi in zip(v_m_users, v_m_items)]
    e_m_users, e_m_items = [], []
    for g in graphs:
        emu, emi = aggregate_id_embeddings(g, state.E_U, state.E_I)
        e_m_users.append(emu)
        e_m_items.append(emi)
    _, attn_mean_u = cross_modal_attention(e_m_users, state.W_Q, state.W_K, state.heads)
    _, attn_mean_i = cross_modal_attention(e_m_items, state.W_Q, state.W_K, state.heads)
    e0_u = ad.add(state.E_U, ad.mul(_rows_divided_by_sq_norm(attn_mean_u), eta))
    e0_i = ad.add(state.E_I, ad.mul(_rows_divided_by_sq_norm(attn_mean_i), eta))
    prop_u, prop_i = high_order_propagation(sym, e0_u, e0_i, depth)
    f_users = fuse_final(prop_u, v_m_users, delta)
    f_items = fuse_final(prop_i, v_m_items, delta)
    item_scores = state.predictor.score(latents)
    return RecommenderForward(f_users, f_items, e_m_users, item_scores, latents,
                              v_m_users, v_m_items, graphs)


def score_matrix(forward):
    """Dense matching scores and item scores as plain arrays."""
    with ad.no_grad():
        raw = forward.f_users.data @ forward.f_items.data.T
        item = forward.item_scores.data.copy()
    return raw, item
