"""Training losses and generation for diffusion-based modality completion."""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..rng import cell_generator
from .networks import ConditionFusionNet, DenoiserNetwork, ModalityAutoencoder


@dataclass
class MddcState:
    autoencoders: list
    fusion: ConditionFusionNet
    denoisers: list
    latent_dim: int
    cond_dim: int
    use_conditions: bool = True

    def params(self):
        out = {}
        for m, ae in enumerate(self.autoencoders):
            out.update(ae.params(f"mddc.ae{m}"))
        out.update(self.fusion.params("mddc.fusion"))
        for m, dn in enumerate(self.denoisers):
            out.update(dn.params(f"mddc.eps{m}"))
        return out


def build_mddc_state(bundle, latent_dim, cond_dim, ae_hidden, rng, use_conditions=True):
    """Networks plus frozen feature scalers from the observed sets."""
    aes, denoisers = [], []
    for m, mod in enumerate(bundle.modalities):
        ae = ModalityAutoencoder(rng, mod.dim, latent_dim, ae_hidden)
        observed = bundle.indicator.observed_set(m)
        ae.set_scaler(mod.data[observed])
        aes.append(ae)
        denoisers.append(DenoiserNetwork(rng, latent_dim, cond_dim))
    fusion = ConditionFusionNet(rng, bundle.n_modalities, latent_dim, cond_dim)
    return MddcState(autoencoders=aes, fusion=fusion, denoisers=denoisers,
                     latent_dim=latent_dim, cond_dim=cond_dim,
                     use_conditions=use_conditions)


def fuse_conditions(state, available_latents):
    """Condition vector for a single item from its available modality latents.

    available_latents: list of (modality index, latent vector) pairs, any order.
    """
    if not available_latents:
        raise ValueError("fuse_conditions requires at least one available modality")
    latents = [None] * state.fusion.n_modalities
    avail = np.zeros((1, state.fusion.n_modalities))
    for m, v in available_latents:
        latents[m] = ad.as_tensor(np.asarray(v).reshape(1, -1))
        avail[0, m] = 1.0
    fused = state.fusion.fuse_batch(latents, avail)
    return ad.reshape(fused, (-1,))


def denoise_predict(v_t, condition, t, net):
    """Predicted noise for a batch of latents at integer steps t."""
    return net.forward(v_t, condition, t)


def reverse_step(v_t, condition, t, net, schedule, z):
    """One ancestral denoising update from step t to t-1 (pure evaluation)."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside [1, {schedule.T}]")
    v_t = np.asarray(v_t)
    z = np.zeros_like(v_t) if z is None else np.asarray(z)
    if t == 1 and np.any(z != 0):
        raise ValueError("final step must use z = 0")
    with ad.no_grad():
        eps = net.forward(v_t.reshape(1, -1) if v_t.ndim == 1 else v_t,
                          condition.reshape(1, -1) if np.asarray(condition).ndim == 1 else condition,
                          np.full(1 if v_t.ndim == 1 else v_t.shape[0], t)).data
    eps = eps.reshape(v_t.shape)
    a_t = schedule.alpha[t]
    ab_t = schedule.alpha_bar[t]
    b_t = schedule.beta[t]
    mean = (v_t - (b_t / np.sqrt(1.0 - ab_t)) * eps) / np.sqrt(a_t)
    return mean + schedule.sigma[t] * z


def _item_conditions(state, features, filled, items, target_mod):
    """Fused conditions for the given items, excluding the target modality."""
    if not state.use_conditions:
        return Tensor(np.zeros((len(items), state.cond_dim)))
    avail = filled[items].astype(np.float64).copy()
    avail[:, target_mod] = 0.0
    latents = []
    for m, ae in enumerate(state.autoencoders):
        if avail[:, m].sum() == 0:
            latents.append(None)
            continue
        latents.append(ae.encode(features[m][items]))
    return state.fusion.fuse_batch(latents, avail)


def _sampler_noise(base_seed, epoch, modality, items, latent_dim, n_steps, deterministic):
    """Per-cell noise, independent of batching and thread scheduling."""
    init = np.zeros((len(items), latent_dim))
    step_z = np.zeros((n_steps, len(items), latent_dim))
    for row, item in enumerate(items):
        gen = cell_generator(base_seed, epoch, modality, int(item))
        init[row] = gen.standard_normal(latent_dim)
        if not deterministic:
            step_z[:, row] = gen.standard_normal((n_steps, latent_dim))
    return init, step_z


def accelerated_sample(net, schedule, cond, init, step_z=None, deterministic=True,
                       clip=None):
    """Latent sampler over the schedule's sub-sequence, from pure noise to v0.

    The deterministic variant extracts the current clean estimate
    v0_hat = (v_t - sqrt(1-abar_t) eps) / sqrt(abar_t) and re-noises it
    implicitly to the previous sub-step; the stochastic variant adds a
    posterior-style noise term drawn from step_z.

    clip bounds the clean estimate each step; without it an untrained
    predictor is amplified by 1/sqrt(abar_t) (over a hundred-fold at the
    last schedule step), which destabilizes early refinement passes.
    """
    steps = schedule.sample_steps
    n = init.shape[0]
    v = init
    with ad.no_grad():
        for k in range(len(steps) - 1, -1, -1):
            t = int(steps[k])
            eps = net.forward(v, cond, np.full(n, t)).data
            ab_t = schedule.alpha_bar[t]
            v0_hat = (v - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
            if clip is not None:
                v0_hat = np.clip(v0_hat, -clip, clip)
            if k == 0:
                return v0_hat
            t_prev = int(steps[k - 1])
            ab_prev = schedule.alpha_bar[t_prev]
            if deterministic:
                v = np.sqrt(ab_prev) * v0_hat + np.sqrt(1.0 - ab_prev) * eps
            else:
                # stochastic sub-sequence jump with the posterior-style variance
                var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
                var = min(max(var, 0.0), 1.0 - ab_prev)
                v = (np.sqrt(ab_prev) * v0_hat
                     + np.sqrt(max(1.0 - ab_prev - var, 0.0)) * eps
                     + np.sqrt(var) * step_z[k])
    return v


def _latent_clip(state, features, indicator, modality):
    """Clip bound from the observed latent scale of the target modality."""
    observed = indicator.observed_set(modality)
    with ad.no_grad():
        v = state.autoencoders[modality].encode(features[modality][observed]).data
    rms = float(np.sqrt(np.mean(v * v)))
    return 10.0 * max(1.0, rms)


def _generate_rows(state, schedule, modality, items, features, filled,
                   base_seed, epoch, deterministic, clip=None):
    """Run the accelerated sampler for a batch of items of one modality."""
    steps = schedule.sample_steps
    with ad.no_grad():
        cond = _item_conditions(state, features, filled, items, modality)
        init, step_z = _sampler_noise(base_seed, epoch, modality, items,
                                      state.latent_dim, len(steps), deterministic)
        v0 = accelerated_sample(state.denoisers[modality], schedule, cond, init,
                                step_z, deterministic, clip=clip)
        decoded = state.autoencoders[modality].decode(v0).data
    return decoded


def generate_missing(state, schedule, item, modality, features, filled,
                     base_seed, epoch=0, deterministic=True):
    """Generated feature vector for one missing item-modality cell."""
    if filled[item, modality]:
        raise ValueError(f"item {item} modality {modality} is not missing")
    if not np.any(np.delete(filled[item], modality)):
        raise ValueError(f"item {item} has no available modality to condition on")
    ind_like = _SingleModalityView(filled, modality)
    clip = _latent_clip(state, features, ind_like, modality)
    rows = _generate_rows(state, schedule, modality, [int(item)], features, filled,
                          base_seed, epoch, deterministic, clip=clip)
    return rows[0]


class _SingleModalityView:
    """Adapter exposing observed_set over a filled mask."""

    def __init__(self, filled, modality):
        self._filled = filled
        self._modality = modality

    def observed_set(self, m):
        return np.flatnonzero(self._filled[:, m])


def generate_all_missing(state, schedule, features, indicator, filled,
                         base_seed, epoch=0, deterministic=True, threads=None):
    """Fresh generations for every missing cell; returns {modality: (items, rows)}.

    Conditioning reads the features/filled snapshot passed in, so all cells of
    a pass are generated against the same state.
    """
    if threads is None:
        threads = int(os.environ.get("MODICF_THREADS", "1"))
    out = {}
    for m in range(indicator.n_modalities):
        items = indicator.missing_set(m)
        if items.size == 0:
            continue
        clip = _latent_clip(state, features, indicator, m)
        if threads > 1 and items.size > 1:
            chunks = np.array_split(items, threads)
            chunks = [c for c in chunks if c.size]
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(
                    lambda c: _generate_rows(state, schedule, m, list(c), features,
                                             filled, base_seed, epoch, deterministic,
                                             clip=clip),
                    chunks))
            rows = np.concatenate(parts, axis=0)
        else:
            rows = _generate_rows(state, schedule, m, list(items), features, filled,
                                  base_seed, epoch, deterministic, clip=clip)
        out[m] = (items, rows)
    return out


def iterative_refine(state, schedule, features, indicator, filled,
                     base_seed, epoch=0, deterministic=True, threads=None):
    """Replace every missing row with a fresh generation.

    Returns updated (features, filled); replaced rows participate in the next
    pass's conditioning. A bundle with nothing missing is returned unchanged.
    """
    generated = generate_all_missing(state, schedule, features, indicator, filled,
                                     base_seed, epoch, deterministic, threads)
    new_features = [f.copy() for f in features]
    new_filled = filled.copy()
    for m, (items, rows) in generated.items():
        new_features[m][items] = rows.astype(new_features[m].dtype)
        new_filled[items, m] = True
    return new_features, new_filled


def mddc_losses(state, schedule, features, indicator, filled, rng, alpha1,
                batch_size=None):
    """Diffusion and reconstruction losses over observed rows.

    Per modality, draws a step t and noise per row, predicts the injected
    noise under the fused clean condition, and reconstructs through the
    autoencoder; losses average squared vector norms over rows and then over
    modalities.

    The diffusion targets and the condition source latents are detached:
    encoders are shaped by the reconstruction term alone, which keeps the
    latent space stationary for the noise predictor (letting the diffusion
    loss reshape the latents destabilizes long runs). Conditions for this
    loss come only from genuinely observed sibling modalities; rows without
    any get a zero condition vector.
    """
    l_dm_terms, l_rec_terms = [], []
    for m, ae in enumerate(state.autoencoders):
        observed = indicator.observed_set(m)
        if observed.size == 0:
            raise ValueError(f"no observed rows for modality {m}")
        if batch_size is not None and observed.size > batch_size:
            observed = observed[rng.choice(observed.size, size=batch_size, replace=False)]
        observed = np.sort(observed)
        x = features[m][observed]
        v0_graph = ae.encode(x)
        v0 = Tensor(v0_graph.data.copy())
        t = rng.integers(1, schedule.T + 1, size=observed.size)
        noise = rng.standard_normal((observed.size, state.latent_dim))
        ab = schedule.alpha_bar[t]
        v_t = ad.add(ad.scale_rows(v0, Tensor(np.sqrt(ab))),
                     Tensor(np.sqrt(1.0 - ab)[:, None] * noise))
        cond = _loss_conditions(state, features, indicator, observed, m)
        eps_hat = state.denoisers[m].forward(v_t, cond, t)
        diff = ad.sub(Tensor(noise), eps_hat)
        l_dm_terms.append(ad.mean(ad.sum_(ad.mul(diff, diff), axis=1)))
        rec = ae.decode(v0_graph)
        rdiff = ad.sub(rec, Tensor(x))
        l_rec_terms.append(ad.mean(ad.sum_(ad.mul(rdiff, rdiff), axis=1)))
    n = float(len(l_dm_terms))
    l_dm = ad.mul(_sum_terms(l_dm_terms), 1.0 / n)
    l_rec = ad.mul(_sum_terms(l_rec_terms), 1.0 / n)
    l_diff = ad.add(l_dm, ad.mul(l_rec, alpha1))
    return l_dm, l_rec, l_diff


def _loss_conditions(state, features, indicator, items, target_mod):
    """Detached fused conditions from observed sibling modalities only."""
    if not state.use_conditions:
        return Tensor(np.zeros((len(items), state.cond_dim)))
    avail = indicator.entries[items].astype(np.float64).copy()
    avail[:, target_mod] = 0.0
    latents = []
    for m, ae in enumerate(state.autoencoders):
        if avail[:, m].sum() == 0:
            latents.append(None)
            continue
        with ad.no_grad():
            lat = ae.encode(features[m][items]).data
        latents.append(Tensor(lat.copy()))
    return state.fusion.fuse_batch(latents, avail)


def _sum_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total
