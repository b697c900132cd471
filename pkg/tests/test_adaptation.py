import numpy as np
import pytest

from moe_route.adaptation import (TrainHistory, batch_tta, expert_divergence,
                                  generate_pseudo_labels, onfly_decode,
                                  predict_class_label, rab_like_tta, sat_train,
                                  train_domain_classifier, train_router, train_si,
                                  adaptive_train)
from moe_route.autodiff import Tensor
from moe_route.corpus import class_space, generate_corpus, group_name
from moe_route.losses import LossWeights
from moe_route.model import (EncoderConfig, ModelParams,
                             init_experts_from_adaptive_training)
from moe_route.router import RouterConfig

from conftest import tiny_experiment


CFG = tiny_experiment()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return generate_corpus(CFG.corpus, 0, tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="module")
def si_model(corpus):
    return train_si(corpus, CFG.resolved_model(corpus), 0, epochs=3, lr=2e-3)


def test_train_si_decreases_loss(corpus):
    history = TrainHistory()
    train_si(corpus, CFG.resolved_model(corpus), 0, epochs=3, lr=2e-3,
             history=history)
    assert history.epoch_losses[-1] < history.step_losses[0]


def test_adaptive_train_group_structure_and_audit(corpus, si_model):
    history = TrainHistory()
    model, adapters, groups = adaptive_train(si_model, corpus, "severity", 0,
                                             epochs=1, history=history)
    assert groups == class_space(corpus, "severity")
    assert len(adapters) == 5
    by_utt = {u.utt_id: u for u in corpus.utterances}
    for stage, utt_ids in history.batch_audit:
        if not stage.startswith("adapter."):
            continue
        group = stage.split(".", 1)[1]
        for uid in utt_ids:
            u = by_utt[uid]
            assert group_name(u.severity, u.gender, u.speaker_id, "severity") == group
    moe = init_experts_from_adaptive_training(model, adapters)
    assert moe.config.num_experts == 5


def test_adaptive_train_rejects_empty_group(corpus, si_model):
    with pytest.raises(ValueError, match="zero training utterances"):
        adaptive_train(si_model, corpus, "severity", 0, epochs=1,
                       exclude_speakers=[s for s in corpus.speakers
                                         if s.startswith("VL")])


def test_sat_produces_distinct_speaker_vectors(corpus, si_model):
    history = TrainHistory()
    model, theta = sat_train(si_model, corpus, LossWeights(), "severity", 0,
                             epochs=3, history=history)
    vecs = np.stack([t.data for t in theta.values()])
    assert len(theta) == len(corpus.train_speakers())
    assert np.std(vecs, axis=0).max() > 1e-4  # non-degenerate
    assert history.epoch_losses[-1] < history.step_losses[0]


def test_sat_loss_decreases_across_seeds(corpus, si_model):
    # the >= 30% drop on the default-scale corpus is asserted in acceptance;
    # at this miniature scale only the direction is stable
    for seed in (0, 1, 2):
        history = TrainHistory()
        sat_train(si_model, corpus, LossWeights(), "severity", seed, epochs=3,
                  history=history)
        assert min(history.epoch_losses) < history.step_losses[0], seed


def test_kl_weight_increases_expert_divergence(corpus, si_model):
    probe = corpus.split("train")[:10]
    divergences = {}
    for alpha in (0.0, 5.0):
        model, _ = sat_train(si_model, corpus, LossWeights(alpha=alpha), "severity",
                             0, epochs=2)
        divergences[alpha] = expert_divergence(model, probe)
    assert divergences[5.0] > divergences[0.0]


def test_generate_pseudo_labels_consistency(corpus, si_model):
    utts = corpus.split("test")[:6]
    labels, excluded = generate_pseudo_labels(si_model, utts)
    assert set(labels) | set(excluded) == {u.utt_id for u in utts}
    for tokens in labels.values():
        assert tokens  # empties are excluded, not returned
    # an all-blank head yields no usable pseudo labels
    blanked = si_model.copy()
    blanked.tensors["ctc.w"].data[:] = 0.0
    blanked.tensors["ctc.b"].data[:] = 0.0
    blanked.tensors["ctc.b"].data[-1] = 10.0
    labels, excluded = generate_pseudo_labels(blanked, utts)
    assert not labels and len(excluded) == len(utts)


def test_domain_classifier_accuracy_and_majority_vote(corpus):
    clf = train_domain_classifier(corpus, "severity", 0, epochs=30)
    test = corpus.split("test")
    correct = sum(clf.predict(u) == clf.space.index(u.severity) for u in test)
    assert correct / len(test) > 0.8
    speaker = corpus.test_speakers()[0]
    utts = corpus.by_speaker("test")[speaker]
    label = predict_class_label(clf, utts, "severity")
    assert 0 <= label < len(clf.space)
    assert predict_class_label(None, utts, "speaker") is None
    with pytest.raises(ValueError, match="not trained"):
        predict_class_label(None, utts, "severity")


def test_speaker_grouping_has_no_classifier(corpus):
    assert train_domain_classifier(corpus, "speaker", 0) is None


class TestBatchTta:
    @pytest.fixture(scope="class")
    def setting(self, corpus, si_model):
        model, theta = sat_train(si_model, corpus, LossWeights(), "severity", 0,
                                 epochs=3)
        speaker = corpus.test_speakers()[0]
        adapt = corpus.by_speaker("adapt")[speaker]
        pseudo, _ = generate_pseudo_labels(si_model, adapt)
        if not pseudo:  # fall back to reference tokens to keep the test runnable
            pseudo = {u.utt_id: u.tokens for u in adapt}
        return model, speaker, adapt, pseudo

    def test_steps_zero_returns_initialization(self, setting):
        model, speaker, adapt, pseudo = setting
        r, report = batch_tta(model, adapt, pseudo, None, LossWeights(), steps=0,
                              speaker_id=speaker)
        n = model.config.num_experts
        assert np.array_equal(r, np.full(n, 1.0 / n))
        assert report.steps == 0
        assert report.initial_loss == report.final_loss

    def test_freeze_contract_and_monotone_best(self, setting):
        model, speaker, adapt, pseudo = setting
        before = model.digest()
        r, report = batch_tta(model, adapt, pseudo, 1, LossWeights(), steps=6,
                              speaker_id=speaker)
        assert model.digest() == before  # every model parameter untouched
        assert report.final_loss <= report.initial_loss
        assert report.utterances_used == len(pseudo)
        assert np.all(np.isfinite(r))

    def test_rejects_empty_pseudo_labels(self, setting):
        model, speaker, adapt, _ = setting
        with pytest.raises(ValueError, match="no usable utterances"):
            batch_tta(model, adapt, {}, None, LossWeights(), steps=2,
                      speaker_id=speaker)


def test_rab_like_tta_freezes_model(corpus, si_model):
    speaker = corpus.test_speakers()[0]
    adapt = corpus.by_speaker("adapt")[speaker]
    pseudo, _ = generate_pseudo_labels(si_model, adapt)
    if not pseudo:
        pseudo = {u.utt_id: u.tokens for u in adapt}
    before = si_model.digest()
    adapter, report = rab_like_tta(si_model, adapt, pseudo, steps=3,
                                   speaker_id=speaker)
    assert si_model.digest() == before
    assert report.final_loss <= report.initial_loss
    assert set(adapter) == {"ln.g", "ln.b", "down.w", "down.b", "up.w", "up.b"}


class TestRouterTraining:
    @pytest.fixture(scope="class")
    def trained(self, corpus, si_model):
        model, theta = sat_train(si_model, corpus, LossWeights(), "severity", 0,
                                 epochs=3)
        rcfg = RouterConfig(width=model.config.width, att_width=8,
                            num_experts=model.config.num_experts)
        return model, theta, rcfg

    def test_freeze_contract(self, corpus, trained):
        model, theta, rcfg = trained
        before_backbone = model.digest("block")
        before_experts = model.digest("expert")
        train_router(model, theta, corpus, LossWeights(), rcfg, "severity", 0,
                     epochs=1)
        assert model.digest("block") == before_backbone
        assert model.digest("expert") == before_experts

    def test_missing_target_rejected(self, corpus, trained):
        model, theta, rcfg = trained
        partial = dict(list(theta.items())[:2])
        with pytest.raises(ValueError, match="no routing targets"):
            train_router(model, partial, corpus, LossWeights(), rcfg, "severity", 0,
                         epochs=1)

    def test_predictions_approach_targets(self, corpus, trained):
        from moe_route.router import routing_from_hidden
        from moe_route.model import encoder_prefix
        model, theta, rcfg = trained
        router = train_router(model, theta, corpus, LossWeights(), rcfg, "severity",
                              0, epochs=6, loss_mode="mse_only", lr=5e-3)
        sims = []
        for u in corpus.split("train")[:20]:
            prefix = encoder_prefix(Tensor(u.features), model)
            r = routing_from_hidden(prefix.router_input, router).data
            t = theta[u.speaker_id].data
            denom = np.linalg.norm(r) * np.linalg.norm(t)
            sims.append(r @ t / denom if denom else 0.0)
        assert np.mean(sims) > 0.5

    def test_mse_only_mode_trains(self, corpus, trained):
        model, theta, rcfg = trained
        history = TrainHistory()
        train_router(model, theta, corpus, LossWeights(), rcfg, "severity", 0,
                     epochs=2, loss_mode="mse_only", history=history)
        assert history.epoch_losses[-1] < history.epoch_losses[0]
        with pytest.raises(ValueError, match="loss mode"):
            train_router(model, theta, corpus, LossWeights(), rcfg, "severity", 0,
                         epochs=1, loss_mode="bogus")


def test_onfly_decode_stateless_deterministic(corpus, si_model, tmp_path):
    model, theta = sat_train(si_model, corpus, LossWeights(), "severity", 0, epochs=2)
    rcfg = RouterConfig(width=model.config.width, att_width=8,
                        num_experts=model.config.num_experts)
    router = train_router(model, theta, corpus, LossWeights(), rcfg, "severity", 0,
                          epochs=1)
    u = corpus.split("test")[0]
    hyp1, r1 = onfly_decode(model, router, u)
    hyp2, r2 = onfly_decode(model, router, u)
    assert hyp1.tokens == hyp2.tokens
    assert np.array_equal(r1, r2)
    assert hyp1.seconds > 0
