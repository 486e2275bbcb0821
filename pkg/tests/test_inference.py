"""Decoding, flow sampling against oracle fields, detection endpoint
semantics, and VCoT loop termination."""
import numpy as np
import pytest

from genshield_micro import inference as inf
from genshield_micro import model as m
from genshield_micro.errors import ConfigError
from genshield_micro.toyworld import (
    EOS, GridConfig, REASON_TOK, STOP_TOK, VOCAB, gen_clean)

SMALL = GridConfig(channels=2, height=4, width=8)


def small_cfg(**kw):
    args = dict(d_model=16, n_layers=1, n_heads=2, grid=SMALL, max_len=96, dtype="float64")
    args.update(kw)
    return m.ModelConfig(**args)


def biased_params(cfg, token_id, bias=50.0):
    """Force greedy decoding to always emit token_id via the text head bias."""
    params = m.init_params(cfg, seed=0)
    params["head_text.b"].data[token_id] = bias
    return params


class TestDecodeText:
    def test_eos_forcing_gives_single_token(self):
        cfg = small_cfg()
        params = biased_params(cfg, EOS)
        ctx = inf.Context().add_image(gen_clean(0, SMALL))
        decoded, logits = inf.decode_text(ctx, params, cfg)
        assert decoded == [EOS]
        assert len(logits) == 1

    def test_max_new_tokens_cap(self):
        cfg = small_cfg()
        params = biased_params(cfg, VOCAB.ids["image"])
        ctx = inf.Context().add_image(gen_clean(0, SMALL))
        decoded, _ = inf.decode_text(ctx, params, cfg, max_new_tokens=5)
        assert len(decoded) == 5 and EOS not in decoded

    def test_deterministic(self):
        cfg = small_cfg()
        params = m.init_params(cfg, seed=4)
        ctx = inf.Context().add_image(gen_clean(1, SMALL))
        a, _ = inf.decode_text(ctx, params, cfg, max_new_tokens=6)
        b, _ = inf.decode_text(ctx, params, cfg, max_new_tokens=6)
        assert a == b


class TestFlowSampler:
    def test_oracle_field_endpoint(self):
        cfg = small_cfg()
        rng = np.random.default_rng(5)
        x1 = rng.uniform(-1, 1, SMALL.shape)
        z0 = rng.standard_normal(SMALL.shape)
        for n_steps in (1, 5, 20):
            out = inf.flow_sample(inf.Context(), [], None, cfg, n_steps=n_steps,
                                  z0=z0, velocity_fn=lambda z, t: x1 - z0)
            assert np.max(np.abs(out - x1)) < 1e-6, n_steps

    def test_constant_field_telescoping(self):
        cfg = small_cfg()
        c = np.full(SMALL.shape, -0.375)
        out = inf.flow_sample(inf.Context(), [], None, cfg, n_steps=13,
                              z0=np.zeros(SMALL.shape), velocity_fn=lambda z, t: c)
        # sum of time deltas telescopes to 1, exact to float rounding
        assert np.max(np.abs(out - c)) < 1e-12

    def test_single_step_is_z0_plus_velocity(self):
        cfg = small_cfg()
        rng = np.random.default_rng(6)
        z0 = np.clip(rng.standard_normal(SMALL.shape) * 0.1, -0.4, 0.4)
        v = np.full(SMALL.shape, 0.25)
        out = inf.flow_sample(inf.Context(), [], None, cfg, n_steps=1,
                              z0=z0, velocity_fn=lambda z, t: v)
        assert np.allclose(out, z0 + v, atol=1e-15)

    def test_nsteps_zero_rejected(self):
        with pytest.raises(ConfigError):
            inf.flow_sample(inf.Context(), [], None, small_cfg(), n_steps=0,
                            z0=np.zeros(SMALL.shape), velocity_fn=lambda z, t: z)

    def test_output_clamped(self):
        cfg = small_cfg()
        out = inf.flow_sample(inf.Context(), [], None, cfg, n_steps=2,
                              z0=np.zeros(SMALL.shape),
                              velocity_fn=lambda z, t: np.full(SMALL.shape, 5.0))
        assert np.max(out) <= 1.0

    def test_model_sampling_deterministic_given_seed(self):
        cfg = small_cfg()
        params = m.init_params(cfg, seed=0)
        ctx = inf.Context().add_image(gen_clean(2, SMALL))
        a = inf.flow_sample(ctx, [], params, cfg, n_steps=3,
                            rng=np.random.default_rng(9))
        b = inf.flow_sample(ctx, [], params, cfg, n_steps=3,
                            rng=np.random.default_rng(9))
        assert np.array_equal(a, b)


class TestDetect:
    def test_score_in_unit_interval_and_malformed_flag(self):
        cfg = small_cfg()
        params = m.init_params(cfg, seed=7)  # untrained: arbitrary decode
        r = inf.detect(gen_clean(3, SMALL), params, cfg)
        assert 0.0 <= r.fake_score <= 1.0
        assert r.verdict in ("real", "fake")

    def test_tie_breaks_toward_real(self):
        cfg = small_cfg()
        # equal huge bias on real and fake: their slot probabilities tie
        params = m.init_params(cfg, seed=0)
        params["head_text.w"].data[:] = 0.0
        params["head_text.b"].data[:] = 0.0
        params["head_text.b"].data[VOCAB.ids["<detect>"]] = 50.0
        r = inf.detect(gen_clean(4, SMALL), params, cfg, max_new_tokens=3)
        assert r.fake_score == pytest.approx(0.5, abs=0)
        assert r.verdict == "real"

    def test_wrong_grid_rejected(self):
        cfg = small_cfg()
        params = m.init_params(cfg, seed=0)
        with pytest.raises(ConfigError):
            inf.detect(np.zeros((4, 8, 8)), params, cfg)

    def test_well_formed_answer_parses(self):
        cfg = small_cfg()
        params = biased_params(cfg, EOS)
        r = inf.detect(gen_clean(5, SMALL), params, cfg)
        assert r.malformed  # no <detect> marker decoded
        assert r.raw_ids == [EOS]


class TestVcot:
    def test_always_stop_one_round_image_unchanged(self):
        cfg = small_cfg()
        params = biased_params(cfg, STOP_TOK)
        img = gen_clean(6, SMALL)
        traj = inf.vcot_correct(img, params, cfg, max_rounds=6, n_steps=2)
        assert traj.rounds_used == 1
        assert traj.terminated_by == "stop_token"
        assert np.array_equal(traj.final_image, img)
        assert traj.rounds[0].diagnosis_ids[0] == STOP_TOK

    def test_never_stop_hits_round_cap(self):
        cfg = small_cfg()
        params = biased_params(cfg, REASON_TOK)
        traj = inf.vcot_correct(gen_clean(7, SMALL), params, cfg,
                                max_rounds=3, n_steps=2)
        assert traj.rounds_used == 3
        assert traj.terminated_by == "max_rounds"

    def test_single_step_is_prefix_of_multi_step(self):
        cfg = small_cfg()
        params = m.init_params(cfg, seed=8)
        traj = inf.vcot_correct(gen_clean(8, SMALL), params, cfg,
                                max_rounds=2, n_steps=2,
                                rng=np.random.default_rng(1))
        assert np.array_equal(traj.single_step_image, traj.rounds[0].image)

    def test_halts_for_any_params(self):
        cfg = small_cfg()
        for seed in range(3):
            params = m.init_params(cfg, seed=seed)
            traj = inf.vcot_correct(gen_clean(seed, SMALL), params, cfg,
                                    max_rounds=4, n_steps=1)
            assert traj.rounds_used <= 4

    def test_max_rounds_validated(self):
        cfg = small_cfg()
        params = m.init_params(cfg, seed=0)
        with pytest.raises(ConfigError):
            inf.vcot_correct(gen_clean(0, SMALL), params, cfg, max_rounds=0)
