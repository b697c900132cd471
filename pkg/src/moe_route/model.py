"""Toy transformer-style encoder with a mixture of adapter experts in one
block, plus CTC and classification heads.

Block order: LN -> MHSA -> dropout -> residual, then LN -> FFN -> (expert
mixture at the configured block) -> dropout -> residual. Each expert is a
residual adapter: LN -> down-projection -> gelu -> up-projection, combined
as h = sum_i r_i * a_i and added to the FFN output, so r = 0 reproduces the
unadapted network exactly.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import tensor_io


@dataclass(frozen=True)
class EncoderConfig:
    num_blocks: int = 4
    width: int = 64
    num_heads: int = 4
    ffn_width: int = 128
    vocab_size: int = 31          # includes the blank at id V-1
    moe_block_index: int = 2      # 1-based
    num_experts: int = 10
    expert_bottleneck: int = 16
    dropout: float = 0.1
    num_classes: int = 10
    router_tap: str = "moe_input"  # or "features"

    def validate(self) -> "EncoderConfig":
        if not 1 <= self.moe_block_index <= self.num_blocks:
            raise ValueError(
                f"moe_block_index {self.moe_block_index} outside 1..{self.num_blocks}")
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if self.width % self.num_heads:
            raise ValueError(f"width {self.width} not divisible by {self.num_heads} heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (content + blank)")
        if self.router_tap not in ("moe_input", "features"):
            raise ValueError(f"unknown router_tap '{self.router_tap}'")
        return self


EXPERT_KEYS = ("ln.g", "ln.b", "down.w", "down.b", "up.w", "up.b")


def _init_linear(rng, fan_in: int, fan_out: int, zero: bool = False):
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
    return w, np.zeros(fan_out)


def init_expert_tensors(config: EncoderConfig, rng) -> dict:
    """One residual adapter; the up-projection starts at zero so the expert
    is inert until trained."""
    f, b = config.width, config.expert_bottleneck
    dw, db = _init_linear(rng, f, b)
    uw, ub = _init_linear(rng, b, f, zero=True)
    return {
        "ln.g": Tensor(np.ones(f)), "ln.b": Tensor(np.zeros(f)),
        "down.w": Tensor(dw), "down.b": Tensor(db),
        "up.w": Tensor(uw), "up.b": Tensor(ub),
    }


class ModelParams:
    """Flat name -> Tensor map over backbone blocks, experts and heads."""

    def __init__(self, config: EncoderConfig, tensors: dict):
        self.config = config.validate()
        self.tensors = tensors

    @classmethod
    def init(cls, config: EncoderConfig, seed: int) -> "ModelParams":
        config = config.validate()
        rng = np.random.default_rng([int(seed), 11])
        f, ff, v, k = config.width, config.ffn_width, config.vocab_size, config.num_classes
        t: dict = {}
        for i in range(config.num_blocks):
            p = f"block{i}."
            t[p + "ln1.g"] = Tensor(np.ones(f))
            t[p + "ln1.b"] = Tensor(np.zeros(f))
            for nm in ("wq", "wk", "wv", "wo"):
                w, bvec = _init_linear(rng, f, f)
                t[p + f"attn.{nm}"] = Tensor(w)
                t[p + f"attn.{nm[1]}b"] = Tensor(bvec)
            t[p + "ln2.g"] = Tensor(np.ones(f))
            t[p + "ln2.b"] = Tensor(np.zeros(f))
            w1, b1 = _init_linear(rng, f, ff)
            w2, b2 = _init_linear(rng, ff, f)
            t[p + "ffn.w1"], t[p + "ffn.b1"] = Tensor(w1), Tensor(b1)
            t[p + "ffn.w2"], t[p + "ffn.b2"] = Tensor(w2), Tensor(b2)
        for e in range(config.num_experts):
            for key, tensor in init_expert_tensors(config, rng).items():
                t[f"expert{e}.{key}"] = tensor
        cw, cb = _init_linear(rng, f, v)
        t["ctc.w"], t["ctc.b"] = Tensor(cw), Tensor(cb)
        kw, kb = _init_linear(rng, f, k)
        t["cls.w"], t["cls.b"] = Tensor(kw), Tensor(kb)
        return cls(config, t)

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def named(self, *prefixes) -> dict:
        if not prefixes:
            return dict(self.tensors)
        return {k: v for k, v in self.tensors.items()
                if any(k.startswith(p) for p in prefixes)}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config,
                           {k: Tensor(v.data.copy(), name=v.name)
                            for k, v in self.tensors.items()})

    def expert_tensors(self, index: int) -> dict:
        prefix = f"expert{index}."
        return {k[len(prefix):]: v for k, v in self.tensors.items()
                if k.startswith(prefix)}

    def digest(self, *prefixes) -> str:
        return tensor_io.params_digest(self.named(*prefixes))

    def save(self, path) -> None:
        path = Path(path)
        tensor_io.save_tensors(path, {k: v.data for k, v in self.tensors.items()})
        path.with_suffix(".json").write_text(
            json.dumps(asdict(self.config), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> "ModelParams":
        path = Path(path)
        config = EncoderConfig(**json.loads(path.with_suffix(".json").read_text()))
        arrays = tensor_io.load_tensors(path)
        return cls(config, {k: Tensor(v) for k, v in arrays.items()})


def param_counts(model: ModelParams) -> dict:
    counts = {"backbone": 0, "experts": 0, "heads": 0}
    for name, t in model.tensors.items():
        if name.startswith("block"):
            counts["backbone"] += t.data.size
        elif name.startswith("expert"):
            counts["experts"] += t.data.size
        else:
            counts["heads"] += t.data.size
    return counts


def sd_param_count(num_speakers: int, num_experts: int) -> int:
    """Batch-mode speaker-dependent parameter total: one routing vector per
    speaker."""
    return num_speakers * num_experts


def _mhsa(x: Tensor, model: ModelParams, i: int):
    cfg = model.config
    p = f"block{i}.attn."
    q = ad.add(ad.matmul(x, model[p + "wq"]), model[p + "qb"])
    k = ad.add(ad.matmul(x, model[p + "wk"]), model[p + "kb"])
    v = ad.add(ad.matmul(x, model[p + "wv"]), model[p + "vb"])
    d = cfg.width // cfg.num_heads
    scale = 1.0 / math.sqrt(d)
    heads = []
    for h in range(cfg.num_heads):
        lo, hi = h * d, (h + 1) * d
        qh = ad.narrow(q, 1, lo, hi)
        kh = ad.narrow(k, 1, lo, hi)
        vh = ad.narrow(v, 1, lo, hi)
        att = ad.softmax(ad.mul(ad.matmul(qh, ad.transpose(kh)), scale), axis=1)
        heads.append(ad.matmul(att, vh))
    merged = ad.concat(heads, axis=1)
    return ad.add(ad.matmul(merged, model[p + "wo"]), model[p + "ob"])


def _ffn(x: Tensor, model: ModelParams, i: int):
    p = f"block{i}.ffn."
    h = ad.gelu(ad.add(ad.matmul(x, model[p + "w1"]), model[p + "b1"]))
    return ad.add(ad.matmul(h, model[p + "w2"]), model[p + "b2"])


def _drop(x: Tensor, model: ModelParams, mode: str, rng):
    if mode == "train":
        return ad.dropout(x, model.config.dropout, rng)
    return x


def _attend(x: Tensor, model: ModelParams, i: int, mode: str, rng):
    normed = ad.layer_norm(x, model[f"block{i}.ln1.g"], model[f"block{i}.ln1.b"])
    return ad.add(x, _drop(_mhsa(normed, model, i), model, mode, rng))


def _plain_block(x: Tensor, model: ModelParams, i: int, mode: str, rng):
    a = _attend(x, model, i, mode, rng)
    y = _ffn(ad.layer_norm(a, model[f"block{i}.ln2.g"], model[f"block{i}.ln2.b"]), model, i)
    return ad.add(a, _drop(y, model, mode, rng))


def adapter_forward(y: Tensor, tensors: dict) -> Tensor:
    """Residual adapter body: LN -> down -> gelu -> up. The residual path is
    the routing-weighted combination added by the caller."""
    h = ad.layer_norm(y, tensors["ln.g"], tensors["ln.b"])
    h = ad.gelu(ad.add(ad.matmul(h, tensors["down.w"]), tensors["down.b"]))
    return ad.add(ad.matmul(h, tensors["up.w"]), tensors["up.b"])


def expert_forward(y: Tensor, model: ModelParams) -> list:
    return [adapter_forward(y, model.expert_tensors(e))
            for e in range(model.config.num_experts)]


def moe_combine(expert_outputs, r: Tensor) -> Tensor:
    """Linear combination sum_i r_i * a_i over same-shape expert outputs."""
    outs = [ad.as_tensor(a) for a in expert_outputs]
    r = ad.as_tensor(r)
    if len(r.shape) != 1 or r.shape[0] != len(outs):
        raise ValueError(
            f"moe_combine: routing length {r.shape} does not match {len(outs)} experts")
    shape = outs[0].shape
    for a in outs:
        if a.shape != shape:
            raise ValueError(f"moe_combine: expert shapes differ: {shape} vs {a.shape}")
    total = None
    for i, a in enumerate(outs):
        ri = ad.reshape(ad.narrow(r, 0, i, i + 1), ())
        term = ad.mul(a, ri)
        total = term if total is None else ad.add(total, term)
    return total


@dataclass
class Prefix:
    """Forward state of the expert-carrying block right before combination."""
    resid: Tensor        # post-attention residual stream
    ffn_out: Tensor      # FFN output the experts and the combination consume
    router_input: Tensor  # normalized stream the routing network reads


@dataclass
class ForwardResult:
    hidden: Tensor
    expert_outputs: list
    moe_block_out: Tensor
    router_input: Tensor


def encoder_prefix(x: Tensor, model: ModelParams, mode: str = "eval", rng=None) -> Prefix:
    cfg = model.config
    x = ad.as_tensor(x)
    if len(x.shape) != 2 or x.shape[1] != cfg.width:
        raise ValueError(f"encoder: input shape {x.shape} does not match width {cfg.width}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode '{mode}'")
    if mode == "train" and rng is None:
        raise ValueError("train mode requires an rng for dropout")
    h = x
    moe = cfg.moe_block_index - 1
    for i in range(moe):
        h = _plain_block(h, model, i, mode, rng)
    a = _attend(h, model, moe, mode, rng)
    y = _ffn(ad.layer_norm(a, model[f"block{moe}.ln2.g"], model[f"block{moe}.ln2.b"]),
             model, moe)
    tap = x if cfg.router_tap == "features" else y
    return Prefix(resid=a, ffn_out=y, router_input=ad.layer_norm(tap))


@dataclass
class Suffix:
    hidden: Tensor
    moe_block_out: Tensor
    expert_outputs: list


def encoder_suffix(prefix: Prefix, r, model: ModelParams, mode: str = "eval",
                   rng=None, experts=None) -> Suffix:
    cfg = model.config
    if r is None:
        expert_outs = []
        y2 = prefix.ffn_out
    else:
        r = ad.as_tensor(r)
        n = len(experts) if experts is not None else cfg.num_experts
        if r.shape != (n,):
            raise ValueError(
                f"routing vector shape {r.shape} does not match {n} experts")
        expert_outs = experts if experts is not None else expert_forward(prefix.ffn_out, model)
        y2 = ad.add(prefix.ffn_out, moe_combine(expert_outs, r))
    moe = cfg.moe_block_index - 1
    block_out = ad.add(prefix.resid, _drop(y2, model, mode, rng))
    h = block_out
    for i in range(moe + 1, cfg.num_blocks):
        h = _plain_block(h, model, i, mode, rng)
    return Suffix(hidden=h, moe_block_out=block_out, expert_outputs=expert_outs)


def encoder_forward(x, model: ModelParams, r, mode: str = "eval", rng=None) -> ForwardResult:
    """Full forward pass; r=None runs the unadapted network without touching
    the experts, r=zeros reproduces it exactly through the combination."""
    prefix = encoder_prefix(x, model, mode, rng)
    suffix = encoder_suffix(prefix, r, model, mode, rng)
    return ForwardResult(hidden=suffix.hidden, expert_outputs=suffix.expert_outputs,
                         moe_block_out=suffix.moe_block_out,
                         router_input=prefix.router_input)


def ctc_head(hidden: Tensor, model: ModelParams) -> Tensor:
    return ad.add(ad.matmul(hidden, model["ctc.w"]), model["ctc.b"])


def classification_head(moe_block_out: Tensor, model: ModelParams) -> Tensor:
    """Temporal mean pool of the expert block's post-combination hiddens,
    then affine to class logits."""
    if moe_block_out.shape[0] < 1:
        raise ValueError("classification_head: empty time axis")
    pooled = ad.reshape(ad.tmean(moe_block_out, axis=0), (1, moe_block_out.shape[1]))
    logits = ad.add(ad.matmul(pooled, model["cls.w"]), model["cls.b"])
    return ad.reshape(logits, (model.config.num_classes,))


def init_experts_from_adaptive_training(model: ModelParams, adapters) -> ModelParams:
    """Copy one trained group adapter into each expert slot, in group order."""
    adapters = list(adapters)
    if len(adapters) != model.config.num_experts:
        raise ValueError(
            f"{len(adapters)} group adapters do not match "
            f"{model.config.num_experts} configured experts")
    out = model.copy()
    for e, adapter in enumerate(adapters):
        if set(adapter) != set(EXPERT_KEYS):
            raise ValueError(f"adapter {e} keys {sorted(adapter)} != {sorted(EXPERT_KEYS)}")
        for key in EXPERT_KEYS:
            src = adapter[key]
            out.tensors[f"expert{e}.{key}"] = Tensor(
                np.array(getattr(src, "data", src), dtype=np.float64, copy=True))
    return out
