import numpy as np
import pytest

from moe_route.corpus import CorpusConfig
from moe_route.harness import ExperimentConfig, TrainingPlan, run_pipeline
from moe_route.model import EncoderConfig


def tiny_experiment(**overrides) -> ExperimentConfig:
    """Small but trainable setup for fast integration tests."""
    base = dict(
        corpus=CorpusConfig(speakers_per_cell=1, vocab_size=8, alphabet_size=6,
                            train_per_speaker=6, adapt_per_speaker=3,
                            test_per_speaker=3, feature_dim=16),
        model=EncoderConfig(num_blocks=2, width=16, num_heads=2, ffn_width=24,
                            vocab_size=9, moe_block_index=2, expert_bottleneck=4),
        plan=TrainingPlan(si_epochs=3, adaptive_epochs=2, sat_epochs=3,
                          router_epochs=3, classifier_epochs=10, rr_sat_epochs=1,
                          rr_router_epochs=1, tta_steps=5, k_grid=(1, 2),
                          rtf_repetitions=1),
        grouping="severity",
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    cfg = tiny_experiment()
    run_dir = tmp_path_factory.mktemp("tiny_run")
    return run_pipeline(cfg, seed=0, run_dir=run_dir)


def rel_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum.reduce([np.abs(analytic), np.abs(numeric),
                               np.full_like(numeric, 1e-6)])
    return float((np.abs(analytic - numeric) / denom).max())


def finite_difference(loss_fn, arrays: dict, h: float = 1e-5) -> dict:
    """Central finite differences of a scalar-valued function of named
    arrays; loss_fn receives plain ndarray copies."""
    grads = {}
    for name, base in arrays.items():
        g = np.zeros_like(base)
        flat = g.ravel()
        for i in range(base.size):
            hi = {k: v.copy() for k, v in arrays.items()}
            lo = {k: v.copy() for k, v in arrays.items()}
            hi[name].ravel()[i] += h
            lo[name].ravel()[i] -= h
            flat[i] = (loss_fn(hi) - loss_fn(lo)) / (2 * h)
        grads[name] = g
    return grads
