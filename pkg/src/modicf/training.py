"""Two-stage training: diffusion pretraining, joint optimization, variants.

Stage one fits the completion module alone; stage two jointly optimizes the
full objective (diffusion + ranking + contrastive + weight decay) with one
optimizer pass per epoch, refreshing imputations and modality graphs at the
start of every epoch. Ablation variants swap the imputer or disable the
conditioning / counterfactual paths.
"""

import dataclasses
import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cfmr
from . import mddc
from . import metrics as mx
from .autodiff import Tensor
from .dataset import sample_bpr_triples
from .optim import Adam
from .rng import RngHub, cell_generator

VARIANTS = ("full", "no-counterfactual", "no-conditioning", "impute-mean",
            "impute-zero", "impute-random", "impute-nearest", "mean-and-no-cf")

JOINT_EPOCH_NAMESPACE = 1_000_000  # keeps joint-stage noise apart from pretraining
RANDOM_IMPUTE_NAMESPACE = 2_000_000


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # embedding / latent dimensions
    d: int = 128
    cond_dim: int = 0           # 0 means same as d
    heads: int = 8
    depth: int = 2              # propagation layers
    top_k: int = 10             # modality-graph neighborhood size
    ae_hidden: int = 128
    enc_hidden: int = 128
    # diffusion schedule
    T: int = 1000
    T_s: int = 10
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # loss weights
    alpha1: float = 1.0
    alpha2: float = 0.7
    eta: float = 0.7
    delta: float = 0.4
    gamma: float = 0.01
    lambda1: float = 0.09
    lambda2: float = 1e-5
    # optimization
    lr: float = 1e-4
    lr_decay: float = 0.95
    lr_decay_interval: int = 100
    pretrain_epochs: int = 500
    pretrain_patience: int = 50
    joint_epochs: int = 250
    patience: int = 20
    batch_size: int = 2048
    cl_batch: int = 2048
    diffusion_batch: int = 0    # 0 means all observed rows
    refine_every: int = 1       # refinement cadence during pretraining (epochs)
    # protocol
    seed: int = 0
    variant: str = "full"
    deterministic_sampling: bool = True
    k_values: tuple = (10, 20)
    eval_k: int = 20

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.cond_dim == 0:
            self.cond_dim = self.d

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        raw["k_values"] = tuple(raw.get("k_values", (10, 20)))
        return cls(**raw)

    def config_id(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass
class TrainedModel:
    config: TrainConfig
    mddc_state: object          # None for imputation-substitute variants
    schedule: object
    rec_state: object
    features: list              # completed modality matrices (numpy)
    filled: np.ndarray

    def params(self):
        out = {}
        if self.mddc_state is not None:
            out.update(self.mddc_state.params())
        out.update(self.rec_state.params())
        return out


@dataclass
class TrainHistory:
    pretrain_losses: list = field(default_factory=list)
    joint_losses: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1


def parameter_audit(model):
    """Every trainable tensor reachable from the model must be registered.

    Returns the registered parameter count; raises if a reflective walk over
    the model objects finds an unregistered trainable tensor.
    """
    registry = model.params()
    registered = {id(t) for t in registry.values()}
    found = {}
    seen = set()
    stack = [model.mddc_state, model.rec_state]
    while stack:
        obj = stack.pop()
        if obj is None or id(obj) in seen:
            continue
        seen.add(id(obj))
        if isinstance(obj, Tensor):
            if obj.requires_grad:
                found[id(obj)] = obj
            continue
        if isinstance(obj, (list, tuple)):
            stack.extend(obj)
        elif isinstance(obj, dict):
            stack.extend(obj.values())
        elif hasattr(obj, "__dict__"):
            stack.extend(vars(obj).values())
    missing = [i for i in found if i not in registered]
    if missing:
        raise AssertionError(
            f"{len(missing)} trainable tensors are not registered for "
            f"regularization/optimization")
    return len(registry)


def regularization(params):
    total = None
    for name in sorted(params):
        p = params[name]
        term = ad.sum_(ad.mul(p, p))
        total = term if total is None else ad.add(total, term)
    return total


def _check_loss(loss, what):
    if not np.isfinite(float(loss.data)):
        raise TrainingDiverged(f"{what} became non-finite")


def pretrain_lr(base_lr, epoch, decay, interval):
    return base_lr * decay ** (epoch // interval)


def pretrain_mddc(bundle, config, hub, progress=None):
    """Stage one: optimize the completion losses with per-epoch refinement."""
    init_rng = hub.stream("init")
    state = mddc.build_mddc_state(
        bundle, config.d, config.cond_dim, config.ae_hidden, init_rng,
        use_conditions=config.variant != "no-conditioning")
    schedule = mddc.build_noise_schedule(config.T, config.beta_start,
                                         config.beta_end, config.T_s)
    features = [m.data.astype(np.float64) for m in bundle.modalities]
    filled = bundle.indicator.entries.astype(bool)
    params = state.params()
    names = sorted(params)
    opt = Adam([params[n] for n in names], lr=config.lr)
    diff_rng = hub.stream("diffusion-noise")
    history = TrainHistory()
    best, best_epoch = np.inf, -1
    any_missing = any(bundle.indicator.missing_set(m).size
                      for m in range(bundle.n_modalities))
    batch = config.diffusion_batch or None
    for epoch in range(config.pretrain_epochs):
        t0 = time.perf_counter()
        opt.lr = pretrain_lr(config.lr, epoch, config.lr_decay, config.lr_decay_interval)
        if any_missing and epoch % config.refine_every == 0:
            features, filled = mddc.iterative_refine(
                state, schedule, features, bundle.indicator, filled,
                base_seed=config.seed, epoch=epoch,
                deterministic=config.deterministic_sampling)
        opt.zero_grad()
        _, _, l_diff = mddc.mddc_losses(state, schedule, features, bundle.indicator,
                                        filled, diff_rng, config.alpha1, batch)
        _check_loss(l_diff, "pretraining loss")
        ad.backward(l_diff)
        opt.step()
        loss_val = float(l_diff.data)
        history.pretrain_losses.append(loss_val)
        history.epoch_seconds.append(time.perf_counter() - t0)
        if progress:
            progress("pretrain", epoch, loss_val)
        if loss_val < best - 1e-6:
            best, best_epoch = loss_val, epoch
        elif epoch - best_epoch >= config.pretrain_patience:
            break
    if any_missing:
        # imputations must reflect the final weights
        features, filled = mddc.iterative_refine(
            state, schedule, features, bundle.indicator, filled,
            base_seed=config.seed,
            epoch=len(history.pretrain_losses),
            deterministic=config.deterministic_sampling)
    history.stopped_epoch = len(history.pretrain_losses) - 1
    return state, schedule, features, filled, history


# ---------------------------------------------------------------------------
# imputation substitutes (ablation variants)


def impute_static(bundle, kind, seed):
    """Mean / zero / random / nearest-neighbor fills for the missing rows."""
    features = [m.data.astype(np.float64).copy() for m in bundle.modalities]
    ind = bundle.indicator
    for m in range(bundle.n_modalities):
        missing = ind.missing_set(m)
        if missing.size == 0:
            continue
        observed = ind.observed_set(m)
        rows = features[m][observed]
        if kind == "zero":
            continue
        if kind == "mean":
            features[m][missing] = rows.mean(axis=0)
        elif kind == "random":
            mu, sd = rows.mean(axis=0), rows.std(axis=0)
            for i in missing:
                gen = cell_generator(seed, RANDOM_IMPUTE_NAMESPACE, m, int(i))
                features[m][i] = mu + sd * gen.standard_normal(len(mu))
        elif kind == "nearest":
            for i in missing:
                features[m][i] = _nearest_row(bundle, m, int(i))
        else:
            raise ValueError(f"unknown imputation kind {kind!r}")
    filled = np.ones_like(ind.entries, dtype=bool)
    return features, filled


def _nearest_row(bundle, m, item):
    """Copy from the observed item most similar over the item's available modalities."""
    ind = bundle.indicator
    candidates = [j for j in ind.observed_set(m) if j != item]
    best_sim, best_j = -np.inf, None
    for j in candidates:
        sims = []
        for n in range(bundle.n_modalities):
            if ind.entries[item, n] == 1 and ind.entries[j, n] == 1:
                a = bundle.modalities[n].data[item].astype(np.float64)
                b = bundle.modalities[n].data[j].astype(np.float64)
                na, nb = np.linalg.norm(a), np.linalg.norm(b)
                sims.append(a @ b / (na * nb) if na > 0 and nb > 0 else 0.0)
        sim = float(np.mean(sims)) if sims else 0.0
        if sim > best_sim:
            best_sim, best_j = sim, j
    if best_j is None:
        return np.zeros(bundle.modalities[m].dim)
    return bundle.modalities[m].data[best_j].astype(np.float64)


# ---------------------------------------------------------------------------
# joint stage


def _uses_mddc(variant):
    return variant in ("full", "no-counterfactual", "no-conditioning")


def _uses_counterfactual(variant):
    return variant not in ("no-counterfactual", "mean-and-no-cf")


def _static_kind(variant):
    return {"impute-mean": "mean", "impute-zero": "zero", "impute-random": "random",
            "impute-nearest": "nearest", "mean-and-no-cf": "mean"}[variant]


def build_models(bundle, config, hub, mddc_state=None, schedule=None):
    init_rng = hub.stream("init")
    rec_state = cfmr.RecommenderState(
        init_rng, bundle.n_users, bundle.n_items,
        [m.dim for m in bundle.modalities], config.d, config.heads, config.enc_hidden)
    for m, enc in enumerate(rec_state.encoders):
        observed = bundle.indicator.observed_set(m)
        enc.set_scaler(bundle.modalities[m].data[observed])
    return TrainedModel(config=config, mddc_state=mddc_state,
                        schedule=schedule, rec_state=rec_state,
                        features=None, filled=None)


def validation_scores(model, bundle, variant):
    """Ranking scores under the variant's inference rule."""
    with ad.no_grad():
        fwd = cfmr.recommender_forward(
            model.rec_state, bundle, model.features,
            model.config.eta, model.config.delta, model.config.depth,
            model.config.top_k)
        raw, item = cfmr.score_matrix(fwd)
    if _uses_counterfactual(variant):
        return cfmr.counterfactual_adjust(raw, item, model.config.gamma), raw, item
    return raw, raw, item


def _val_metric(model, bundle, variant):
    scores, _, _ = validation_scores(model, bundle, variant)
    result = mx.rank_topk(scores, bundle, model.config.eval_k)
    val = bundle.split_mask("val")
    _, prec, _ = mx.accuracy_metrics(result, val)
    f = mx.fairness_f(result, bundle.indicator)
    fuse = mx.fairness_f_fuse(f, prec)
    return fuse if fuse is not None else prec


def joint_train(bundle, config, hub, pretrained=None, progress=None,
                checkpoint_every=0, checkpoint_path=None, resume=None):
    """Stage two: one optimizer pass per epoch over the full objective."""
    variant = config.variant
    if not bundle.split_mask("val").any():
        from .dataset import DataError
        raise DataError("no validation split; early stopping needs one "
                        "(increase density or interactions per user)")
    if _uses_mddc(variant):
        if pretrained is None:
            warnings.warn("no pretrained completion state; training it jointly from scratch")
            state = mddc.build_mddc_state(
                bundle, config.d, config.cond_dim, config.ae_hidden,
                hub.stream("init"), use_conditions=variant != "no-conditioning")
            schedule = mddc.build_noise_schedule(config.T, config.beta_start,
                                                 config.beta_end, config.T_s)
            features = [m.data.astype(np.float64) for m in bundle.modalities]
            filled = bundle.indicator.entries.astype(bool)
        else:
            state, schedule, features, filled = pretrained
        model = build_models(bundle, config, hub, state, schedule)
    else:
        features, filled = impute_static(bundle, _static_kind(variant), config.seed)
        model = build_models(bundle, config, hub)
    model.features = [f.copy() for f in features]
    model.filled = filled.copy()

    n_params = parameter_audit(model)
    params = model.params()
    names = sorted(params)
    opt = Adam([params[n] for n in names], lr=config.lr)
    diff_rng = hub.stream("diffusion-noise")
    neg_rng = hub.stream("negatives")
    history = TrainHistory()
    best_val, best_epoch, best_snapshot = -np.inf, -1, None
    start_epoch = 0

    if resume is not None:
        start_epoch, best_val, best_epoch, best_snapshot, history = _restore_joint(
            resume, model, opt, hub, names)

    any_missing = any(bundle.indicator.missing_set(m).size
                      for m in range(bundle.n_modalities))
    batch = config.diffusion_batch or None

    for epoch in range(start_epoch, config.joint_epochs):
        t0 = time.perf_counter()
        if model.mddc_state is not None and any_missing:
            model.features, model.filled = mddc.iterative_refine(
                model.mddc_state, model.schedule, model.features, bundle.indicator,
                model.filled, base_seed=config.seed,
                epoch=JOINT_EPOCH_NAMESPACE + epoch,
                deterministic=config.deterministic_sampling)

        opt.zero_grad()
        fwd = cfmr.recommender_forward(
            model.rec_state, bundle, model.features, config.eta, config.delta,
            config.depth, config.top_k)
        triples = sample_bpr_triples(bundle, config.batch_size, neg_rng)
        _, _, l_bpr = cfmr.bpr_losses(triples, fwd.f_users, fwd.f_items,
                                      fwd.item_scores, config.alpha2)
        if bundle.n_users <= config.cl_batch:
            user_idx = None
        else:
            user_idx = np.sort(neg_rng.choice(bundle.n_users, size=config.cl_batch,
                                              replace=False))
        l_cl = cfmr.contrastive_loss(fwd.f_users, fwd.e_m_users, user_idx)
        total = ad.add(l_bpr, ad.mul(l_cl, config.lambda1))
        if model.mddc_state is not None:
            _, _, l_diff = mddc.mddc_losses(
                model.mddc_state, model.schedule, model.features, bundle.indicator,
                model.filled, diff_rng, config.alpha1, batch)
            total = ad.add(total, l_diff)
        if config.lambda2 > 0:
            total = ad.add(total, ad.mul(regularization(params), config.lambda2))
        _check_loss(total, "joint loss")
        ad.backward(total)
        opt.step()

        val = _val_metric(model, bundle, variant)
        history.joint_losses.append(float(total.data))
        history.val_metric.append(val)
        history.epoch_seconds.append(time.perf_counter() - t0)
        if progress:
            progress("joint", epoch, float(total.data))

        if val > best_val + 1e-12:
            best_val, best_epoch = val, epoch
            best_snapshot = _snapshot(model, params, names)
        if checkpoint_every and checkpoint_path and (epoch + 1) % checkpoint_every == 0:
            save_training_checkpoint(checkpoint_path, model, opt, hub, names,
                                     epoch + 1, best_val, best_epoch, best_snapshot,
                                     history)
        if epoch - best_epoch >= config.patience:
            break

    history.best_epoch = best_epoch
    history.stopped_epoch = start_epoch + len(history.joint_losses) - 1
    if best_snapshot is not None:
        _restore_snapshot(model, params, best_snapshot)
    return model, history, n_params


def _snapshot(model, params, names):
    snap = {
        "params": {n: params[n].data.copy() for n in names},
        "features": [f.copy() for f in model.features],
        "filled": model.filled.copy(),
    }
    return snap


def _restore_snapshot(model, params, snap):
    for n, arr in snap["params"].items():
        params[n].data = arr.copy()
    model.features = [f.copy() for f in snap["features"]]
    model.filled = snap["filled"].copy()


# ---------------------------------------------------------------------------
# checkpoint plumbing for interrupt/resume


def save_training_checkpoint(path, model, opt, hub, names, epoch, best_val,
                             best_epoch, best_snapshot, history):
    from . import storage

    params = model.params()
    arrays = {}
    for m, f in enumerate(model.features):
        arrays[f"features/{m}"] = f
    arrays["filled"] = model.filled.astype(np.uint8)
    if best_snapshot is not None:
        for n, arr in best_snapshot["params"].items():
            arrays[f"best_param/{n}"] = arr
        for m, f in enumerate(best_snapshot["features"]):
            arrays[f"best_features/{m}"] = f
        arrays["best_filled"] = best_snapshot["filled"].astype(np.uint8)
    scalers = []
    if model.mddc_state is not None:
        scalers = [ae.scaler_state() for ae in model.mddc_state.autoencoders]
        for m, s in enumerate(scalers):
            arrays[f"scaler_mu/{m}"] = s["mu"]
            arrays[f"scaler_sd/{m}"] = s["sd"]
    for m, enc in enumerate(model.rec_state.encoders):
        arrays[f"rec_scaler_mu/{m}"] = enc.mu
        arrays[f"rec_scaler_sd/{m}"] = enc.sd
    extra = {
        "stage": "joint",
        "epoch": epoch,
        "best_val": float(best_val),
        "best_epoch": best_epoch,
        "has_best": best_snapshot is not None,
        "config": json.loads(model.config.to_json()),
        "rng": hub.state(),
        "history": {
            "joint_losses": history.joint_losses,
            "val_metric": history.val_metric,
        },
        "arrays": arrays,
    }
    storage.save_checkpoint(path, params, opt.state(), extra)


def _restore_joint(path, model, opt, hub, names):
    from . import storage

    saved_params, opt_state, payload, arrays = storage.load_checkpoint(path)
    params = model.params()
    if sorted(saved_params) != sorted(params):
        raise ValueError("checkpoint parameters do not match the model")
    for n, arr in saved_params.items():
        params[n].data = arr.astype(params[n].data.dtype)
    opt.restore(opt_state)
    hub.restore(payload["rng"])
    model.features = [arrays[f"features/{m}"].astype(np.float64)
                      for m in range(len(model.features))]
    model.filled = arrays["filled"].astype(bool)
    if model.mddc_state is not None:
        for m, ae in enumerate(model.mddc_state.autoencoders):
            ae.restore_scaler({"mu": arrays[f"scaler_mu/{m}"],
                               "sd": arrays[f"scaler_sd/{m}"]})
    for m, enc in enumerate(model.rec_state.encoders):
        enc.mu = arrays[f"rec_scaler_mu/{m}"]
        enc.sd = arrays[f"rec_scaler_sd/{m}"]
    best_snapshot = None
    if payload.get("has_best"):
        best_snapshot = {
            "params": {n: arrays[f"best_param/{n}"] for n in names},
            "features": [arrays[f"best_features/{m}"]
                         for m in range(len(model.features))],
            "filled": arrays["best_filled"].astype(bool),
        }
    history = TrainHistory(
        joint_losses=list(payload["history"]["joint_losses"]),
        val_metric=list(payload["history"]["val_metric"]),
    )
    return (payload["epoch"], payload["best_val"], payload["best_epoch"],
            best_snapshot, history)


# ---------------------------------------------------------------------------
# end-to-end runs


def desk_config(seed=0, **overrides):
    """Defaults sized for the synthetic desk-scale bundles.

    The paper-scale defaults in TrainConfig assume the full datasets; these
    shrink the dimensions and budgets so a run completes in seconds while
    keeping every mechanism active.
    """
    base = dict(
        d=32, cond_dim=32, heads=4, depth=2, top_k=10,
        ae_hidden=64, enc_hidden=32,
        T=1000, T_s=20,
        alpha1=1.0, alpha2=0.7, eta=0.7, delta=0.4, gamma=2.0,
        lambda1=0.05, lambda2=1e-5,
        lr=2e-3, lr_decay=0.98, pretrain_epochs=10000, pretrain_patience=10000,
        refine_every=25,
        joint_epochs=120, patience=20, batch_size=1024, cl_batch=2048,
        seed=seed,
    )
    base.update(overrides)
    return TrainConfig(**base)


def run_variant(bundle, variant, config, progress=None):
    """Pretrain (when the variant uses the diffusion imputer), train, evaluate."""
    config = dataclasses.replace(config, variant=variant)
    hub = RngHub(config.seed)
    pretrained = None
    pre_history = None
    if _uses_mddc(variant):
        state, schedule, features, filled, pre_history = pretrain_mddc(
            bundle, config, hub, progress)
        pretrained = (state, schedule, features, filled)
    model, history, n_params = joint_train(bundle, config, hub, pretrained, progress)
    if pre_history is not None:
        history.pretrain_losses = pre_history.pretrain_losses
    report, scores, raw, item = evaluate_model(bundle, model, variant)
    return model, history, report, n_params


def evaluate_model(bundle, model, variant=None, k_values=None):
    variant = variant or model.config.variant
    scores, raw, item = validation_scores(model, bundle, variant)
    report = mx.evaluate(scores, bundle, bundle.indicator,
                         k_values or model.config.k_values,
                         seed=model.config.seed, config_id=model.config.config_id())
    return report, scores, raw, item


def save_model(path, model):
    """Final-model container: parameters, completed features, config, scalers."""
    from . import storage

    params = model.params()
    arrays = {f"features/{m}": f for m, f in enumerate(model.features)}
    arrays["filled"] = model.filled.astype(np.uint8)
    if model.mddc_state is not None:
        for m, ae in enumerate(model.mddc_state.autoencoders):
            s = ae.scaler_state()
            arrays[f"scaler_mu/{m}"] = s["mu"]
            arrays[f"scaler_sd/{m}"] = s["sd"]
    for m, enc in enumerate(model.rec_state.encoders):
        arrays[f"rec_scaler_mu/{m}"] = enc.mu
        arrays[f"rec_scaler_sd/{m}"] = enc.sd
    extra = {
        "stage": "final",
        "config": json.loads(model.config.to_json()),
        "uses_mddc": model.mddc_state is not None,
        "arrays": arrays,
    }
    storage.save_checkpoint(path, params, {"t": 0, "m": [], "v": []}, extra)


def save_pretrained(path, state, features, filled, config):
    from . import storage

    arrays = {f"features/{m}": f for m, f in enumerate(features)}
    arrays["filled"] = filled.astype(np.uint8)
    for m, ae in enumerate(state.autoencoders):
        s = ae.scaler_state()
        arrays[f"scaler_mu/{m}"] = s["mu"]
        arrays[f"scaler_sd/{m}"] = s["sd"]
    extra = {"stage": "pretrained", "config": json.loads(config.to_json()),
             "arrays": arrays}
    storage.save_checkpoint(path, state.params(), {"t": 0, "m": [], "v": []}, extra)


def load_pretrained(path, bundle, config, hub):
    from . import storage

    saved, _, payload, arrays = storage.load_checkpoint(path)
    if payload.get("stage") != "pretrained":
        raise ValueError(f"{path} is not a pretraining checkpoint")
    state = mddc.build_mddc_state(
        bundle, config.d, config.cond_dim, config.ae_hidden, hub.stream("init"),
        use_conditions=config.variant != "no-conditioning")
    schedule = mddc.build_noise_schedule(config.T, config.beta_start,
                                         config.beta_end, config.T_s)
    params = state.params()
    if sorted(saved) != sorted(params):
        raise ValueError("pretrained networks do not match the config")
    for n, arr in saved.items():
        params[n].data = arr.astype(params[n].data.dtype)
    for m, ae in enumerate(state.autoencoders):
        ae.restore_scaler({"mu": arrays[f"scaler_mu/{m}"],
                           "sd": arrays[f"scaler_sd/{m}"]})
    features = [arrays[f"features/{m}"].astype(np.float64)
                for m in range(bundle.n_modalities)]
    filled = arrays["filled"].astype(bool)
    return state, schedule, features, filled


def load_model(path, bundle):
    """Rebuild a trained model against its dataset."""
    from . import storage

    saved, _, payload, arrays = storage.load_checkpoint(path)
    config = TrainConfig(**{**payload["config"],
                            "k_values": tuple(payload["config"]["k_values"])})
    hub = RngHub(config.seed)
    if payload["uses_mddc"]:
        state = mddc.build_mddc_state(
            bundle, config.d, config.cond_dim, config.ae_hidden,
            hub.stream("init"), use_conditions=config.variant != "no-conditioning")
        schedule = mddc.build_noise_schedule(config.T, config.beta_start,
                                             config.beta_end, config.T_s)
        model = build_models(bundle, config, hub, state, schedule)
        for m, ae in enumerate(state.autoencoders):
            ae.restore_scaler({"mu": arrays[f"scaler_mu/{m}"],
                               "sd": arrays[f"scaler_sd/{m}"]})
    else:
        model = build_models(bundle, config, hub)
    params = model.params()
    if sorted(saved) != sorted(params):
        raise ValueError("model file does not match the dataset/config")
    for n, arr in saved.items():
        params[n].data = arr.astype(params[n].data.dtype)
    for m, enc in enumerate(model.rec_state.encoders):
        enc.mu = arrays[f"rec_scaler_mu/{m}"]
        enc.sd = arrays[f"rec_scaler_sd/{m}"]
    model.features = [arrays[f"features/{m}"].astype(np.float64)
                      for m in range(bundle.n_modalities)]
    model.filled = arrays["filled"].astype(bool)
    return model
