"""Training and adaptation procedures: supervised baseline training,
per-group adapter training, speaker-adaptive training of the expert
mixture, unsupervised batch-mode test-time adaptation of routing vectors,
routing-network training, and the on-the-fly decode path."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import corpus as corpus_mod
from .corpus import Corpus, Utterance, class_space, group_label, group_name
from .decode import Hypothesis, greedy_ctc_decode, word_error_rate
from .losses import (LossWeights, ce_loss, combined_batch_loss, combined_onfly_loss,
                     ctc_feasible, ctc_loss, kl_diversity_loss, mse_routing_loss)
from .model import (EncoderConfig, ModelParams, adapter_forward, classification_head,
                    ctc_head, encoder_forward, encoder_prefix, encoder_suffix,
                    expert_forward, init_expert_tensors,
                    init_experts_from_adaptive_training)
from .optim import Adam
from .router import RouterConfig, RouterParams, predict_routing, routing_from_hidden


@dataclass
class AdaptationReport:
    speaker_id: str
    mode: str
    utterances_used: int
    steps: int
    initial_loss: float
    final_loss: float
    seconds: float
    routing: np.ndarray


@dataclass
class TrainHistory:
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    batch_audit: list = field(default_factory=list)  # (stage, utt_ids) per step


def _loss_row(parts: dict) -> str:
    return ",".join(repr(float(parts.get(k, 0.0))) for k in ("ctc", "kl", "ce", "mse", "total"))


class LossLog:
    """Per-step loss component CSV: step,ctc,kl,ce,mse,total."""

    def __init__(self, path=None):
        self.path = path
        self.rows = ["step,ctc,kl,ce,mse,total"]

    def add(self, step: int, parts: dict) -> None:
        self.rows.append(f"{step}," + _loss_row(parts))

    def write(self) -> None:
        if self.path is not None:
            with open(self.path, "w") as fh:
                fh.write("\n".join(self.rows) + "\n")


def _batches(items, size, rng):
    order = list(items)
    rng.shuffle(order)
    for i in range(0, len(order), size):
        yield order[i: i + size]


def _detach(t: Tensor) -> Tensor:
    return Tensor(t.data)


@dataclass
class CachedForward:
    """Constant prefix of the expert block for stages that freeze everything
    upstream of the routing combination."""
    resid: Tensor
    ffn_out: Tensor
    router_input: Tensor
    expert_outputs: list
    kl_value: float


def cache_prefix(model: ModelParams, utt: Utterance, with_experts: bool = True) -> CachedForward:
    prefix = encoder_prefix(Tensor(utt.features), model, mode="eval")
    experts = expert_forward(prefix.ffn_out, model) if with_experts else []
    kl_value = kl_diversity_loss(experts).item() if len(experts) >= 2 else 0.0
    return CachedForward(resid=_detach(prefix.resid), ffn_out=_detach(prefix.ffn_out),
                         router_input=_detach(prefix.router_input),
                         expert_outputs=[_detach(a) for a in experts],
                         kl_value=kl_value)


def _suffix_from_cache(cached: CachedForward, r, model: ModelParams,
                       fresh_experts: bool = False):
    from .model import Prefix
    prefix = Prefix(resid=cached.resid, ffn_out=cached.ffn_out,
                    router_input=cached.router_input)
    experts = None
    if r is not None and not fresh_experts:
        experts = cached.expert_outputs
    return encoder_suffix(prefix, r, model, mode="eval", experts=experts)


def randomize_experts(model: ModelParams, seed: int, up_scale: float = 5e-2) -> ModelParams:
    """Re-initialize all experts with small random (non-inert) adapters; the
    no-domain-knowledge comparison arm."""
    out = model.copy()
    rng = np.random.default_rng([seed, 91])
    b = out.config.expert_bottleneck
    for e in range(out.config.num_experts):
        fresh = init_expert_tensors(out.config, rng)
        fresh["up.w"] = Tensor(rng.standard_normal(fresh["up.w"].shape) * up_scale
                               / np.sqrt(b))
        for key, t in fresh.items():
            out.tensors[f"expert{e}.{key}"] = t
    return out


def train_si(corpus: Corpus, config: EncoderConfig, seed: int, epochs: int,
             lr: float = 1e-3, batch_size: int = 4, loss_log: LossLog | None = None,
             history: TrainHistory | None = None) -> ModelParams:
    """Speaker-independent baseline: backbone + CTC head trained on the
    train split with CTC only; experts stay at their inert initialization."""
    model = ModelParams.init(config, seed)
    params = model.named("block", "ctc.")
    opt = Adam(params, lr)
    shuffle_rng = np.random.default_rng([seed, 31])
    drop_rng = np.random.default_rng([seed, 32])
    utts = corpus.split("train")
    if not utts:
        raise ValueError("train split is empty")
    step = 0
    for _ in range(epochs):
        epoch_losses = []
        for batch in _batches(utts, batch_size, shuffle_rng):
            maps, vals = [], []
            for u in batch:
                fw = encoder_forward(Tensor(u.features), model, None, mode="train",
                                     rng=drop_rng)
                loss = ctc_loss(ctc_head(fw.hidden, model), u.tokens)
                maps.append(ad.gradients(loss, params))
                vals.append(loss.item())
            opt.step(ad.add_gradient_maps(maps, 1.0 / len(batch)))
            mean = float(np.mean(vals))
            epoch_losses.append(mean)
            if loss_log is not None:
                loss_log.add(step, {"ctc": mean, "total": mean})
            if history is not None:
                history.step_losses.append(mean)
                history.batch_audit.append(("si", tuple(u.utt_id for u in batch)))
            step += 1
        if history is not None:
            history.epoch_losses.append(float(np.mean(epoch_losses)))
    if loss_log is not None:
        loss_log.write()
    return model


def adaptive_train(model: ModelParams, corpus: Corpus, grouping: str, seed: int,
                   epochs: int, lr: float = 1e-3, batch_size: int = 4,
                   history: TrainHistory | None = None,
                   exclude_speakers=()) -> tuple:
    """Adaptive training: one residual adapter per domain group, trained with
    CTC while the shared backbone keeps fine-tuning. Returns the updated
    model, the ordered adapter list, and the group order."""
    model = model.copy()
    space = class_space(corpus, grouping)
    utts = [u for u in corpus.split("train") if u.speaker_id not in set(exclude_speakers)]
    by_group: dict = {}
    for u in utts:
        by_group.setdefault(group_name(u.severity, u.gender, u.speaker_id, grouping), []).append(u)
    for g in space:
        if not by_group.get(g):
            raise ValueError(f"group '{g}' has zero training utterances")
    rng = np.random.default_rng([seed, 41])
    adapters = {g: init_expert_tensors(model.config, np.random.default_rng([seed, 42, i]))
                for i, g in enumerate(space)}
    backbone = model.named("block", "ctc.")
    all_params = dict(backbone)
    for g, tensors in adapters.items():
        for key, t in tensors.items():
            all_params[f"adapter.{g}.{key}"] = t
    opt = Adam(all_params, lr)
    shuffle_rng = np.random.default_rng([seed, 43])
    drop_rng = np.random.default_rng([seed, 44])
    one = Tensor(np.ones(1))
    for _ in range(epochs):
        for batch in _batches(utts, batch_size, shuffle_rng):
            maps = []
            for u in batch:
                g = group_name(u.severity, u.gender, u.speaker_id, grouping)
                prefix = encoder_prefix(Tensor(u.features), model, mode="train", rng=drop_rng)
                out = adapter_forward(prefix.ffn_out, adapters[g])
                suffix = encoder_suffix(prefix, one, model, mode="train", rng=drop_rng,
                                        experts=[out])
                loss = ctc_loss(ctc_head(suffix.hidden, model), u.tokens)
                wanted = dict(backbone)
                for key, t in adapters[g].items():
                    wanted[f"adapter.{g}.{key}"] = t
                maps.append(ad.gradients(loss, wanted))
                if history is not None:
                    history.batch_audit.append((f"adapter.{g}", (u.utt_id,)))
            opt.step(ad.add_gradient_maps(maps, 1.0 / len(batch)))
    return model, [adapters[g] for g in space], space


def sat_train(model: ModelParams, corpus: Corpus, weights: LossWeights, grouping: str,
              seed: int, epochs: int, lr: float = 1e-3, batch_size: int = 4,
              class_task: bool = True, r_lr: float = 1e-2,
              loss_log: LossLog | None = None,
              history: TrainHistory | None = None,
              exclude_speakers=(), freeze_backbone: bool = False) -> tuple:
    """Speaker-adaptive training: jointly optimize backbone, experts, heads
    and one routing vector per training speaker. Minibatches are grouped by
    speaker so every step uses a consistent routing vector. Returns the
    canonical model and the speaker -> routing-vector map."""
    model = model.copy()
    n = model.config.num_experts
    space = class_space(corpus, grouping)
    excluded = set(exclude_speakers)
    by_speaker = {s: us for s, us in corpus.by_speaker("train").items() if s not in excluded}
    if not by_speaker:
        raise ValueError("no training speakers")
    theta = {s: Tensor(np.full(n, 1.0 / n), name=f"r.{s}") for s in sorted(by_speaker)}
    if freeze_backbone:
        params = model.named("expert", "ctc.", "cls.")
    else:
        params = model.named("block", "expert", "ctc.", "cls.")
    if not class_task:
        params = {k: v for k, v in params.items() if not k.startswith("cls.")}
    opt = Adam({**params, **{f"r.{s}": t for s, t in theta.items()}}, lr)
    shuffle_rng = np.random.default_rng([seed, 51])
    drop_rng = np.random.default_rng([seed, 52])
    # frozen backbone: the expert block's inputs never change, so cache them
    # once and retrain experts/heads/routing from the cached stream (eval mode)
    cached = {}
    if freeze_backbone:
        for us in by_speaker.values():
            for u in us:
                cached[u.utt_id] = cache_prefix(model, u, with_experts=False)
    step = 0
    for _ in range(epochs):
        epoch_losses = []
        speaker_batches = []
        for s, us in by_speaker.items():
            for chunk in _batches(us, batch_size, shuffle_rng):
                speaker_batches.append((s, chunk))
        order = np.arange(len(speaker_batches))
        shuffle_rng.shuffle(order)
        for idx in order:
            s, batch = speaker_batches[idx]
            r = theta[s]
            wanted = {**params, f"r.{s}": r}
            maps, parts_acc = [], {"ctc": 0.0, "kl": 0.0, "ce": 0.0, "total": 0.0}
            for u in batch:
                if freeze_backbone:
                    suffix = _suffix_from_cache(cached[u.utt_id], r, model,
                                                fresh_experts=True)
                    fw = suffix
                else:
                    fw = encoder_forward(Tensor(u.features), model, r, mode="train",
                                         rng=drop_rng)
                ctc = ctc_loss(ctc_head(fw.hidden, model), u.tokens)
                kl = kl_diversity_loss(fw.expert_outputs) if weights.alpha > 0 else Tensor(0.0)
                if class_task:
                    ce = ce_loss(classification_head(fw.moe_block_out, model),
                                 group_label(u, grouping, space))
                else:
                    ce = Tensor(0.0)
                loss = combined_batch_loss(ctc, kl, ce, weights)
                maps.append(ad.gradients(loss, wanted))
                for key, val in (("ctc", ctc), ("kl", kl), ("ce", ce), ("total", loss)):
                    parts_acc[key] += val.item() / len(batch)
                if history is not None:
                    history.batch_audit.append(("sat", (u.utt_id,)))
            opt.step(ad.add_gradient_maps(maps, 1.0 / len(batch)))
            epoch_losses.append(parts_acc["total"])
            if loss_log is not None:
                loss_log.add(step, parts_acc)
            if history is not None:
                history.step_losses.append(parts_acc["total"])
            step += 1
        if history is not None:
            history.epoch_losses.append(float(np.mean(epoch_losses)))
    if loss_log is not None:
        loss_log.write()
    return model, theta


def expert_divergence(model: ModelParams, utterances, limit: int = 20) -> float:
    """Mean ordered-pair expert output divergence over a probe set; the
    negated per-utterance KL diversity loss, averaged."""
    n = model.config.num_experts
    pairs = n * (n - 1)
    if pairs == 0:
        return 0.0
    vals = []
    for u in utterances[:limit]:
        prefix = encoder_prefix(Tensor(u.features), model, mode="eval")
        outs = expert_forward(prefix.ffn_out, model)
        vals.append(-kl_diversity_loss(outs).item() / pairs)
    return float(np.mean(vals))


def generate_pseudo_labels(model: ModelParams, utterances) -> tuple:
    """Greedy decode with the unadapted model (r = 0 path); empty decodes are
    excluded from adaptation supervision."""
    labels: dict = {}
    excluded = []
    for u in utterances:
        fw = encoder_forward(Tensor(u.features), model, None, mode="eval")
        hyp = greedy_ctc_decode(ctc_head(fw.hidden, model).data)
        if hyp.tokens and ctc_feasible(u.features.shape[0], hyp.tokens):
            labels[u.utt_id] = hyp.tokens
        else:
            excluded.append(u.utt_id)
    return labels, excluded


class DomainClassifier:
    """Small feedforward classifier over pooled features, standing in for an
    external severity/gender predictor. Not used for speaker-level domain
    knowledge."""

    def __init__(self, grouping: str, space: list, tensors: dict,
                 mean: np.ndarray, std: np.ndarray):
        self.grouping = grouping
        self.space = space
        self.tensors = tensors
        self.mean = mean
        self.std = std

    @staticmethod
    def pooled(utt: Utterance) -> np.ndarray:
        f = utt.features
        return np.concatenate([f.mean(axis=0), f.std(axis=0)])

    def _logits(self, pooled: np.ndarray) -> Tensor:
        x = Tensor(((pooled - self.mean) / self.std).reshape(1, -1))
        h = ad.gelu(ad.add(ad.matmul(x, self.tensors["w1"]), self.tensors["b1"]))
        out = ad.add(ad.matmul(h, self.tensors["w2"]), self.tensors["b2"])
        return ad.reshape(out, (len(self.space),))

    def predict(self, utt: Utterance) -> int:
        return int(np.argmax(self._logits(self.pooled(utt)).data))


def train_domain_classifier(corpus: Corpus, grouping: str, seed: int,
                            epochs: int = 40, lr: float = 1e-2,
                            hidden: int = 32, batch_size: int = 32) -> DomainClassifier | None:
    """Train the auxiliary label predictor on the train split. Returns None
    for speaker-level grouping, where no test-time classification happens."""
    if grouping == "speaker":
        return None
    space = class_space(corpus, grouping)
    utts = corpus.split("train")
    feats = np.stack([DomainClassifier.pooled(u) for u in utts])
    labels = np.array([group_label(u, grouping, space) for u in utts])
    mean = feats.mean(axis=0)
    std = feats.std(axis=0) + 1e-8
    x_all = (feats - mean) / std
    rng = np.random.default_rng([seed, 61])
    d = feats.shape[1]
    tensors = {
        "w1": Tensor(rng.standard_normal((d, hidden)) / np.sqrt(d)),
        "b1": Tensor(np.zeros(hidden)),
        "w2": Tensor(rng.standard_normal((hidden, len(space))) / np.sqrt(hidden)),
        "b2": Tensor(np.zeros(len(space))),
    }
    opt = Adam(tensors, lr)
    idx = np.arange(len(utts))
    for _ in range(epochs):
        rng.shuffle(idx)
        for i in range(0, len(idx), batch_size):
            chunk = idx[i: i + batch_size]
            x = Tensor(x_all[chunk])
            h = ad.gelu(ad.add(ad.matmul(x, tensors["w1"]), tensors["b1"]))
            logits = ad.add(ad.matmul(h, tensors["w2"]), tensors["b2"])
            ls = ad.log_softmax(logits, axis=1)
            picked = ad.mul(ls, Tensor(np.eye(len(space))[labels[chunk]]))
            loss = ad.mul(ad.tsum(picked), -1.0 / len(chunk))
            opt.step(ad.gradients(loss, tensors))
    return DomainClassifier(grouping, space, tensors, mean, std)


def predict_class_label(classifier: DomainClassifier | None, utterances,
                        grouping: str) -> int | None:
    """Speaker-level class estimate: majority vote over per-utterance
    predictions. Skipped entirely for speaker-level domain knowledge."""
    if grouping == "speaker":
        return None
    if classifier is None:
        raise ValueError("classifier not trained")
    votes = np.bincount([classifier.predict(u) for u in utterances],
                        minlength=len(classifier.space))
    return int(np.argmax(votes))


def batch_tta(model: ModelParams, utterances, pseudo_labels: dict,
              class_label: int | None, weights: LossWeights, steps: int = 50,
              lr: float = 1e-2, speaker_id: str = "?") -> tuple:
    """Unsupervised batch-mode adaptation: re-initialize the speaker's
    routing vector uniformly and optimize it alone against pseudo-label CTC
    (plus CE on the predicted class); everything else stays frozen. The
    best-so-far iterate is retained."""
    t0 = time.perf_counter()
    n = model.config.num_experts
    usable = [u for u in utterances if pseudo_labels.get(u.utt_id)]
    if not usable:
        raise ValueError(f"no usable utterances for speaker {speaker_id}: "
                         "all pseudo-labels empty")
    cached = [cache_prefix(model, u) for u in usable]
    r = Tensor(np.full(n, 1.0 / n), name=f"r.{speaker_id}")

    def objective(r_t: Tensor):
        total = None
        for u, c in zip(usable, cached):
            suffix = _suffix_from_cache(c, r_t, model)
            ctc = ctc_loss(ctc_head(suffix.hidden, model), pseudo_labels[u.utt_id])
            kl = Tensor(c.kl_value)
            if class_label is not None and weights.beta > 0:
                ce = ce_loss(classification_head(suffix.moe_block_out, model), class_label)
            else:
                ce = Tensor(0.0)
            loss = combined_batch_loss(ctc, kl, ce, weights)
            total = loss if total is None else ad.add(total, loss)
        return ad.mul(total, 1.0 / len(usable))

    opt = Adam({r.name: r}, lr)
    loss = objective(r)
    initial = loss.item()
    best_loss, best_r = initial, r.data.copy()
    for _ in range(steps):
        opt.step(ad.gradients(loss, {r.name: r}))
        loss = objective(r)
        val = loss.item()
        if val < best_loss:
            best_loss, best_r = val, r.data.copy()
    report = AdaptationReport(
        speaker_id=speaker_id, mode="batch_tta", utterances_used=len(usable),
        steps=steps, initial_loss=initial, final_loss=best_loss,
        seconds=time.perf_counter() - t0, routing=best_r)
    return best_r, report


def rab_like_tta(model: ModelParams, utterances, pseudo_labels: dict,
                 steps: int = 50, lr: float = 1e-2, seed: int = 0,
                 speaker_id: str = "?") -> tuple:
    """Single-expert comparison arm: the whole adapter is the speaker-level
    parameter set, attached with a fixed unit routing weight."""
    t0 = time.perf_counter()
    usable = [u for u in utterances if pseudo_labels.get(u.utt_id)]
    if not usable:
        raise ValueError(f"no usable utterances for speaker {speaker_id}")
    cached = [cache_prefix(model, u, with_experts=False) for u in usable]
    adapter = init_expert_tensors(model.config, np.random.default_rng([seed, 71]))
    params = {f"rab.{k}": t for k, t in adapter.items()}
    one = Tensor(np.ones(1))

    def objective():
        total = None
        for u, c in zip(usable, cached):
            out = adapter_forward(c.ffn_out, adapter)
            suffix = _suffix_from_cache(
                CachedForward(c.resid, c.ffn_out, c.router_input, [out], 0.0), one, model)
            loss = ctc_loss(ctc_head(suffix.hidden, model), pseudo_labels[u.utt_id])
            total = loss if total is None else ad.add(total, loss)
        return ad.mul(total, 1.0 / len(usable))

    opt = Adam(params, lr)
    loss = objective()
    initial = loss.item()
    best_loss = initial
    best = {k: t.data.copy() for k, t in adapter.items()}
    for _ in range(steps):
        opt.step(ad.gradients(loss, params))
        loss = objective()
        if loss.item() < best_loss:
            best_loss = loss.item()
            best = {k: t.data.copy() for k, t in adapter.items()}
    for k, t in adapter.items():
        t.data[:] = best[k]
    report = AdaptationReport(
        speaker_id=speaker_id, mode="rab_like", utterances_used=len(usable),
        steps=steps, initial_loss=initial, final_loss=best_loss,
        seconds=time.perf_counter() - t0, routing=np.ones(1))
    return adapter, report


def train_router(model: ModelParams, theta: dict, corpus: Corpus,
                 weights: LossWeights, router_config: RouterConfig, grouping: str,
                 seed: int, epochs: int, lr: float = 1e-3, batch_size: int = 4,
                 loss_mode: str = "full", class_task: bool = True,
                 loss_log: LossLog | None = None,
                 history: TrainHistory | None = None,
                 exclude_speakers=()) -> RouterParams:
    """Train the routing network against the speaker-adaptive targets with
    the backbone and experts frozen. loss_mode='full' backpropagates CTC,
    KL-constant, CE and MSE; 'mse_only' regresses the targets alone."""
    if loss_mode not in ("full", "mse_only"):
        raise ValueError(f"unknown router loss mode '{loss_mode}'")
    router = RouterParams.init(router_config, seed)
    params = router.named()
    space = class_space(corpus, grouping)
    excluded = set(exclude_speakers)
    utts = [u for u in corpus.split("train") if u.speaker_id not in excluded]
    missing = {u.speaker_id for u in utts} - set(theta)
    if missing:
        raise ValueError(f"no routing targets for speakers: {sorted(missing)}")
    cached = {u.utt_id: cache_prefix(model, u, with_experts=(loss_mode == "full"))
              for u in utts}
    opt = Adam(params, lr)
    shuffle_rng = np.random.default_rng([seed, 81])
    step = 0
    for _ in range(epochs):
        epoch_losses = []
        for batch in _batches(utts, batch_size, shuffle_rng):
            maps, parts_acc = [], {"ctc": 0.0, "kl": 0.0, "ce": 0.0, "mse": 0.0,
                                   "total": 0.0}
            for u in batch:
                c = cached[u.utt_id]
                r_pred = routing_from_hidden(c.router_input, router)
                target = theta[u.speaker_id]
                mse = mse_routing_loss(r_pred, Tensor(np.asarray(
                    getattr(target, "data", target))))
                if loss_mode == "mse_only":
                    loss = ad.mul(mse, weights.gamma)
                    parts = {"mse": mse.item(), "total": loss.item()}
                else:
                    suffix = _suffix_from_cache(c, r_pred, model)
                    ctc = ctc_loss(ctc_head(suffix.hidden, model), u.tokens)
                    kl = Tensor(c.kl_value)
                    if class_task:
                        ce = ce_loss(classification_head(suffix.moe_block_out, model),
                                     group_label(u, grouping, space))
                    else:
                        ce = Tensor(0.0)
                    loss = combined_onfly_loss(ctc, kl, ce, mse, weights)
                    parts = {"ctc": ctc.item(), "kl": kl.item(), "ce": ce.item(),
                             "mse": mse.item(), "total": loss.item()}
                maps.append(ad.gradients(loss, params))
                for k, v in parts.items():
                    parts_acc[k] += v / len(batch)
                if history is not None:
                    history.batch_audit.append(("router", (u.utt_id,)))
            opt.step(ad.add_gradient_maps(maps, 1.0 / len(batch)))
            epoch_losses.append(parts_acc["total"])
            if loss_log is not None:
                loss_log.add(step, parts_acc)
            if history is not None:
                history.step_losses.append(parts_acc["total"])
            step += 1
        if history is not None:
            history.epoch_losses.append(float(np.mean(epoch_losses)))
    if loss_log is not None:
        loss_log.write()
    return router


def onfly_decode(model: ModelParams, router: RouterParams, utt: Utterance) -> tuple:
    """Single stateless pass: predict the routing vector, run the adapted
    encoder, greedy decode."""
    t0 = time.perf_counter()
    r, prefix = predict_routing(Tensor(utt.features), model, router)
    suffix = encoder_suffix(prefix, r, model, mode="eval")
    hyp = greedy_ctc_decode(ctc_head(suffix.hidden, model).data)
    hyp.seconds = time.perf_counter() - t0
    return hyp, r.data.copy()


def decode_utterance(model: ModelParams, utt: Utterance, r=None) -> Hypothesis:
    """Plain decode with a fixed routing vector (or none for the unadapted
    path), timing included."""
    t0 = time.perf_counter()
    fw = encoder_forward(Tensor(utt.features), model, r, mode="eval")
    hyp = greedy_ctc_decode(ctc_head(fw.hidden, model).data)
    hyp.seconds = time.perf_counter() - t0
    return hyp
