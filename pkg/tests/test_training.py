import dataclasses

import numpy as np
import pytest

from modicf import autodiff as ad
from modicf import cfmr
from modicf import dataset as ds
from modicf import mddc
from modicf import training as tr
from modicf.autodiff import Tensor
from modicf.rng import RngHub


def tiny_config(**overrides):
    base = dict(d=8, cond_dim=8, heads=2, depth=2, top_k=4, ae_hidden=12,
                enc_hidden=12, T=60, T_s=5, lr=2e-3, pretrain_epochs=8,
                pretrain_patience=8, joint_epochs=6, patience=6,
                batch_size=64, cl_batch=64, seed=3,
                k_values=(3, 5), eval_k=5)
    base.update(overrides)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def masked_bundle():
    bundle = ds.generate_synthetic(30, 20, 2, [6, 6], 3, 0.35, seed=5)
    masked, plan = ds.apply_missing_mask(bundle, mr=0.4, seed=7)
    return bundle, masked, plan


def test_pretrain_lr_decay_rule():
    assert tr.pretrain_lr(1e-4, 250, 0.95, 100) == pytest.approx(1e-4 * 0.95 ** 2)
    assert tr.pretrain_lr(1e-4, 99, 0.95, 100) == pytest.approx(1e-4)


def test_pretrain_mr_zero_noop_refinement():
    bundle = ds.generate_synthetic(20, 12, 2, [6, 6], 2, 0.15, seed=2)
    config = tiny_config(pretrain_epochs=3)
    hub = RngHub(config.seed)
    state, schedule, features, filled, history = tr.pretrain_mddc(bundle, config, hub)
    assert filled.all()
    for m, mod in enumerate(bundle.modalities):
        assert np.array_equal(features[m], mod.data.astype(np.float64))
    assert len(history.pretrain_losses) == 3


def test_pretrain_deterministic_trajectory(masked_bundle):
    _, masked, _ = masked_bundle
    config = tiny_config(pretrain_epochs=4)
    runs = []
    for _ in range(2):
        hub = RngHub(config.seed)
        _, _, _, _, history = tr.pretrain_mddc(masked, config, hub)
        runs.append(history.pretrain_losses)
    assert runs[0] == runs[1]


def test_impute_static_kinds(masked_bundle):
    _, masked, _ = masked_bundle
    feats_zero, filled = tr.impute_static(masked, "zero", seed=1)
    assert filled.all()
    for m in range(2):
        missing = masked.indicator.missing_set(m)
        assert np.all(feats_zero[m][missing] == 0)
    feats_mean, _ = tr.impute_static(masked, "mean", seed=1)
    for m in range(2):
        observed = masked.indicator.observed_set(m)
        missing = masked.indicator.missing_set(m)
        want = masked.modalities[m].data[observed].astype(np.float64).mean(axis=0)
        assert np.allclose(feats_mean[m][missing], want)
    feats_rand, _ = tr.impute_static(masked, "random", seed=1)
    again, _ = tr.impute_static(masked, "random", seed=1)
    for m in range(2):
        assert np.array_equal(feats_rand[m], again[m])


def test_impute_nearest_matches_bruteforce():
    bundle = ds.generate_synthetic(15, 10, 2, [5, 5], 2, 0.2, seed=9)
    masked, _ = ds.apply_missing_mask(bundle, mr=0.4, seed=11)
    feats, _ = tr.impute_static(masked, "nearest", seed=1)
    ind = masked.indicator
    for m in range(2):
        for i in ind.missing_set(m):
            best_sim, best_j = -np.inf, None
            for j in ind.observed_set(m):
                if j == i:
                    continue
                sims = []
                for n in range(2):
                    if ind.entries[i, n] and ind.entries[j, n]:
                        a = masked.modalities[n].data[i].astype(np.float64)
                        b = masked.modalities[n].data[j].astype(np.float64)
                        na, nb = np.linalg.norm(a), np.linalg.norm(b)
                        sims.append(a @ b / (na * nb) if na and nb else 0.0)
                sim = np.mean(sims) if sims else 0.0
                if sim > best_sim:
                    best_sim, best_j = sim, j
            assert np.allclose(feats[m][i],
                               masked.modalities[m].data[best_j].astype(np.float64))


def test_parameter_audit_detects_unregistered(masked_bundle):
    _, masked, _ = masked_bundle
    config = tiny_config()
    hub = RngHub(0)
    model = tr.build_models(masked, config, hub)
    count = tr.parameter_audit(model)
    assert count > 0
    model.rec_state.rogue = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(AssertionError):
        tr.parameter_audit(model)


def test_objective_equals_sum_of_components(masked_bundle):
    # the combined loss at fixed parameters equals the independently computed
    # parts within 1e-6
    _, masked, _ = masked_bundle
    config = tiny_config(pretrain_epochs=2, joint_epochs=1)
    hub = RngHub(config.seed)
    state, schedule, features, filled, _ = tr.pretrain_mddc(masked, config, hub)
    model = tr.build_models(masked, config, hub, state, schedule)
    model.features, model.filled = features, filled
    params = model.params()

    rng_a = np.random.default_rng(99)
    rng_b = np.random.default_rng(99)
    triples = ds.sample_bpr_triples(masked, 32, np.random.default_rng(1))

    with ad.no_grad():
        fwd = cfmr.recommender_forward(model.rec_state, masked, features,
                                       config.eta, config.delta, config.depth,
                                       config.top_k)
        _, _, l_bpr = cfmr.bpr_losses(triples, fwd.f_users, fwd.f_items,
                                      fwd.item_scores, config.alpha2)
        l_cl = cfmr.contrastive_loss(fwd.f_users, fwd.e_m_users)
        _, _, l_diff = mddc.mddc_losses(state, schedule, features, masked.indicator,
                                        filled, rng_a, config.alpha1)
        reg = tr.regularization(params)
        total = (float(l_diff.data) + float(l_bpr.data)
                 + config.lambda1 * float(l_cl.data)
                 + config.lambda2 * float(reg.data))

        _, _, l_diff2 = mddc.mddc_losses(state, schedule, features, masked.indicator,
                                         filled, rng_b, config.alpha1)
        combined = ad.add(ad.add(l_bpr, ad.mul(l_cl, config.lambda1)),
                          ad.add(l_diff2, ad.mul(reg, config.lambda2)))
    assert float(combined.data) == pytest.approx(total, abs=2e-5 * max(1.0, abs(total)))


def test_joint_train_runs_and_is_deterministic(masked_bundle):
    _, masked, _ = masked_bundle
    config = tiny_config(pretrain_epochs=2, joint_epochs=4)

    def run():
        hub = RngHub(config.seed)
        pre = tr.pretrain_mddc(masked, config, hub)
        model, history, n_params = tr.joint_train(masked, config, hub, pre[:4])
        report, scores, raw, item = tr.evaluate_model(masked, model)
        return history.joint_losses, scores

    losses_a, scores_a = run()
    losses_b, scores_b = run()
    assert losses_a == losses_b
    assert np.array_equal(scores_a, scores_b)


def test_variant_semantics(masked_bundle):
    _, masked, _ = masked_bundle
    config = tiny_config(pretrain_epochs=2, joint_epochs=3)

    model, _, report, _ = tr.run_variant(masked, "impute-zero", config)
    for m in range(2):
        missing = masked.indicator.missing_set(m)
        assert np.all(model.features[m][missing] == 0)

    # no-counterfactual ranks by the raw matching scores
    model2, _, _, _ = tr.run_variant(masked, "no-counterfactual", config)
    scores, raw, item = tr.validation_scores(model2, masked, "no-counterfactual")
    assert np.array_equal(scores, raw)
    adjusted, raw2, item2 = tr.validation_scores(model2, masked, "full")
    assert not np.array_equal(adjusted, raw2)
    assert np.allclose(adjusted, cfmr.counterfactual_adjust(raw2, item2, config.gamma))


def test_no_conditioning_variant_uses_zero_conditions(masked_bundle):
    _, masked, _ = masked_bundle
    config = tiny_config(pretrain_epochs=2, variant="no-conditioning")
    hub = RngHub(config.seed)
    state, schedule, features, filled, _ = tr.pretrain_mddc(masked, config, hub)
    assert not state.use_conditions


def test_run_variant_rejects_unknown(masked_bundle):
    _, masked, _ = masked_bundle
    with pytest.raises(ValueError):
        tiny_config(variant="bogus")


def test_checkpoint_resume_bit_exact(tmp_path, masked_bundle):
    _, masked, _ = masked_bundle
    config = tiny_config(pretrain_epochs=2, joint_epochs=6, patience=6)

    # uninterrupted run
    hub = RngHub(config.seed)
    pre = tr.pretrain_mddc(masked, config, hub)
    model_a, hist_a, _ = tr.joint_train(masked, config, hub, pre[:4])
    report_a, scores_a, _, _ = tr.evaluate_model(masked, model_a)

    # interrupted after 3 epochs, then resumed
    ckpt = tmp_path / "ckpt.bin"
    hub_b = RngHub(config.seed)
    pre_b = tr.pretrain_mddc(masked, config, hub_b)
    half_config = dataclasses.replace(config, joint_epochs=3)
    tr.joint_train(masked, half_config, hub_b, pre_b[:4],
                   checkpoint_every=3, checkpoint_path=ckpt)

    hub_c = RngHub(config.seed)
    pre_c = tr.pretrain_mddc(masked, config, hub_c)
    model_c, hist_c, _ = tr.joint_train(masked, config, hub_c, pre_c[:4],
                                        resume=ckpt)
    report_c, scores_c, _, _ = tr.evaluate_model(masked, model_c)

    assert hist_a.joint_losses == hist_c.joint_losses
    assert np.array_equal(scores_a, scores_c)
    for name, p in model_a.params().items():
        assert np.array_equal(p.data, model_c.params()[name].data), name


def test_config_json_roundtrip():
    config = tiny_config()
    clone = tr.TrainConfig.from_json(config.to_json())
    assert clone == config
    assert clone.config_id() == config.config_id()
