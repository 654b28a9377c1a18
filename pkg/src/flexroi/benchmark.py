"""The default blurred synthetic benchmark used for ablation comparisons.

Small enough to train one model in about a minute on a single CPU core:
128x128 images with up to four objects, a quarter of them mean-blurred
with a 5x5 kernel and a quarter with 9x9.
"""
from __future__ import annotations

from dataclasses import replace
from typing import List, Sequence

from .model import ModelConfig
from .synthgen import Scene, SynthConfig, blur_scene, synth_scene
from .trainer import TrainConfig

BENCH_SYNTH = SynthConfig(image_size=128, min_objects=1, max_objects=4, min_scale=12.0, max_scale=56.0)
BENCH_BLURS = (1, 1, 5, 9)
BENCH_TRAIN_SEED = 100
BENCH_EVAL_SEED = 200
BENCH_TRAIN_SCENES = 160
BENCH_EVAL_SCENES = 150

# delta scaled so the toy object sizes spread over all five levels
BENCH_MODEL = ModelConfig(channels=32, hidden=64, feedback_hidden=32, delta=16.0)
BENCH_TRAIN = TrainConfig(model=BENCH_MODEL, epochs=12, batch_size=8, lr=0.05)


def corpus(n: int, seed: int, blurs: Sequence[int] = BENCH_BLURS, config: SynthConfig = BENCH_SYNTH) -> List[Scene]:
    """Scene j is blurred with ``blurs[j % len(blurs)]``."""
    return [blur_scene(synth_scene((seed, j), config), blurs[j % len(blurs)]) for j in range(n)]


def train_scenes(n: int = BENCH_TRAIN_SCENES) -> List[Scene]:
    return corpus(n, BENCH_TRAIN_SEED)


def eval_scenes(n: int = BENCH_EVAL_SCENES) -> List[Scene]:
    return corpus(n, BENCH_EVAL_SEED)


def clean_scenes(n: int, seed: int = BENCH_EVAL_SEED) -> List[Scene]:
    return corpus(n, seed, blurs=(1,))


def bench_config(seed: int = 0, **model_overrides) -> TrainConfig:
    """Benchmark training config with the given seed and model fields replaced."""
    return replace(BENCH_TRAIN, seed=seed, model=replace(BENCH_MODEL, **model_overrides))
