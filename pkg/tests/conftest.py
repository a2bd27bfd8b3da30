"""Shared fixtures: one micro end-to-end run reused by the service and CLI tests.

The run keeps the full eight-category world but shrinks everything else
(vertices, decoder width, epochs) so the whole synth -> pretrain -> train
chain finishes in about a second.  Tests that only need wiring, schemas,
and determinism use this; quality claims are checked elsewhere at the
default scale.
"""

import pytest

from braintext import pipeline
from braintext.config import RunConfig, format_config
from braintext.training import PhaseConfig


def micro_config(out_dir, seed: int = 0) -> RunConfig:
    cfg = RunConfig()
    cfg.seed = seed
    cfg.out_dir = str(out_dir)
    cfg.position_jitter = 8
    cfg.world.n_vertices = 128
    cfg.world.n_regions = 4
    cfg.world.latent_dim = 6
    cfg.world.n_trials = 60
    cfg.world.shared_fraction = 0.3
    cfg.world.test_count = 8
    cfg.world.seed = seed
    cfg.decoder.d_model = 16
    cfg.decoder.n_layers = 1
    cfg.decoder.n_heads = 2
    cfg.decoder.d_ff = 32
    cfg.decoder.max_seq_len = 96
    cfg.tokenizer.hidden = 8
    cfg.tokenizer.variance_target = 0.9
    cfg.lora.rank = 2
    cfg.lora.alpha = 4.0
    cfg.lm = PhaseConfig("lm", epochs=2, lr=1e-3, batch_size=16)
    cfg.phase1 = PhaseConfig("phase1", epochs=2, lr=1e-3, batch_size=5, tokenizer_l2=0.2)
    cfg.phase2 = PhaseConfig("phase2", epochs=1, lr=2e-5, batch_size=5, tokenizer_l2=5e-4)
    cfg.experiments.n_baseline_permutations = 20
    cfg.experiments.stim_trials_per_group = 4
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def demo_run(tmp_path_factory):
    """Config of a completed micro run; artifacts live in cfg.out_dir."""
    out = tmp_path_factory.mktemp("demo-run")
    cfg = micro_config(out)
    pipeline.run_synth(cfg)
    world_cfg, parcellation, trials = pipeline.load_world(cfg)
    pipeline.run_pretrain(cfg, trials, world_cfg)
    pipeline.run_train(cfg)
    (out / "config.json").write_text(format_config(cfg))
    return cfg
