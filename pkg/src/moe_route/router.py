"""Feature-driven routing network: two feedforward/layernorm stages, an
attentive statistics pooling block, and a final linear map to the routing
vector."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import tensor_io
from .model import ModelParams, encoder_prefix


@dataclass(frozen=True)
class RouterConfig:
    width: int = 64          # frame feature width the router consumes
    att_width: int = 32
    num_experts: int = 10
    attentive: bool = True   # False = plain temporal average pooling

    def validate(self) -> "RouterConfig":
        if self.width < 1 or self.att_width < 1 or self.num_experts < 1:
            raise ValueError(f"invalid router config {self}")
        return self


class RouterParams:
    """Flat name -> Tensor map for the routing network."""

    def __init__(self, config: RouterConfig, tensors: dict):
        self.config = config.validate()
        self.tensors = tensors

    @classmethod
    def init(cls, config: RouterConfig, seed: int) -> "RouterParams":
        config = config.validate()
        rng = np.random.default_rng([int(seed), 23])
        f, a, n = config.width, config.att_width, config.num_experts
        scale = 1.0 / math.sqrt(f)
        t = {
            "ff1.w": Tensor(rng.standard_normal((f, f)) * scale),
            "ff1.b": Tensor(np.zeros(f)),
            "ln1.g": Tensor(np.ones(f)),
            "ln1.b": Tensor(np.zeros(f)),
            "ff2.w": Tensor(rng.standard_normal((f, f)) * scale),
            "ff2.b": Tensor(np.zeros(f)),
            "ln2.g": Tensor(np.ones(f)),
            "ln2.b": Tensor(np.zeros(f)),
            "att.w": Tensor(rng.standard_normal((f, a)) * scale),
            "att.b": Tensor(np.zeros(a)),
            "att.v": Tensor(rng.standard_normal(a) / math.sqrt(a)),
            "att.c": Tensor(0.0),
            "out.w": Tensor(rng.standard_normal((2 * f, n)) / math.sqrt(2 * f)),
            "out.b": Tensor(np.zeros(n)),
        }
        return cls(config, t)

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def named(self) -> dict:
        return dict(self.tensors)

    def copy(self) -> "RouterParams":
        return RouterParams(self.config,
                            {k: Tensor(v.data.copy(), name=v.name)
                             for k, v in self.tensors.items()})

    def digest(self) -> str:
        return tensor_io.params_digest(self.tensors)

    def save(self, path) -> None:
        path = Path(path)
        tensor_io.save_tensors(path, {k: v.data for k, v in self.tensors.items()})
        path.with_suffix(".json").write_text(
            json.dumps(asdict(self.config), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> "RouterParams":
        path = Path(path)
        config = RouterConfig(**json.loads(path.with_suffix(".json").read_text()))
        arrays = tensor_io.load_tensors(path)
        return cls(config, {k: Tensor(v) for k, v in arrays.items()})


@dataclass
class PooledStats:
    mu: Tensor      # (F,) weighted mean
    sigma: Tensor   # (F,) weighted standard deviation
    z: Tensor       # (2F,) concatenation [mu; sigma]
    alpha: Tensor   # (T,) attention weights


def attention_weights(hidden: Tensor, params: RouterParams) -> Tensor:
    """Per-frame attention scores v' tanh(W h_t + b) + c, softmax-normalized
    over time."""
    hidden = ad.as_tensor(hidden)
    if len(hidden.shape) != 2 or hidden.shape[0] < 1:
        raise ValueError(f"attention_weights: need nonempty T x F input, got {hidden.shape}")
    a = params.config.att_width
    u = ad.tanh(ad.add(ad.matmul(hidden, params["att.w"]), params["att.b"]))
    scores = ad.add(ad.reshape(ad.matmul(u, ad.reshape(params["att.v"], (a, 1))),
                               (hidden.shape[0],)),
                    params["att.c"])
    return ad.softmax(scores, axis=0)


def attentive_pool(hidden: Tensor, params: RouterParams) -> PooledStats:
    """Attention-weighted mean and standard deviation over time; the variance
    radicand is clamped at zero before the square root."""
    hidden = ad.as_tensor(hidden)
    if len(hidden.shape) != 2 or hidden.shape[0] < 1:
        raise ValueError(f"attentive_pool: need nonempty T x F input, got {hidden.shape}")
    t, f = hidden.shape
    if params.config.attentive:
        alpha = attention_weights(hidden, params)
    else:
        alpha = Tensor(np.full(t, 1.0 / t))
    row = ad.reshape(alpha, (1, t))
    mu = ad.matmul(row, hidden)                       # (1, F)
    m2 = ad.matmul(row, ad.mul(hidden, hidden))        # (1, F)
    radicand = ad.clamp_min(ad.sub(m2, ad.mul(mu, mu)), 0.0)
    sigma = ad.sqrt(ad.add(radicand, Tensor(np.full((1, f), 1e-12))))
    z = ad.reshape(ad.concat([mu, sigma], axis=1), (2 * f,))
    return PooledStats(mu=ad.reshape(mu, (f,)), sigma=ad.reshape(sigma, (f,)),
                       z=z, alpha=alpha)


def routing_from_hidden(hidden: Tensor, params: RouterParams) -> Tensor:
    """Stages -> pooling -> final linear, yielding the routing vector."""
    h = ad.as_tensor(hidden)
    h = ad.layer_norm(ad.gelu(ad.add(ad.matmul(h, params["ff1.w"]), params["ff1.b"])),
                      params["ln1.g"], params["ln1.b"])
    h = ad.layer_norm(ad.gelu(ad.add(ad.matmul(h, params["ff2.w"]), params["ff2.b"])),
                      params["ln2.g"], params["ln2.b"])
    stats = attentive_pool(h, params)
    z = ad.reshape(stats.z, (1, 2 * params.config.width))
    r = ad.add(ad.matmul(z, params["out.w"]), params["out.b"])
    return ad.reshape(r, (params.config.num_experts,))


def predict_routing(x, model: ModelParams, params: RouterParams):
    """Per-utterance routing prediction from the same normalized stream the
    expert block consumes. Returns (routing vector, prefix) so decoding can
    reuse the prefix."""
    prefix = encoder_prefix(ad.as_tensor(x), model, mode="eval")
    return routing_from_hidden(prefix.router_input, params), prefix
