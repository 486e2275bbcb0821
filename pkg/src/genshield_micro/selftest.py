"""Built-in verification suites behind the `selftest` CLI subcommand.

Each suite returns (name, passed, detail). These are quick versions of the
checks the test suite runs exhaustively: analytic-vs-finite-difference
gradients, flow-sampler exactness against an oracle field, attention-mask
soundness probes, and the optimizer against a scalar reference loop.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import nn, objectives
from .dataset import SequenceBuilder, TrainSample
from .model import ModelConfig, forward, forward_packed, pack_batch, text_logits_at, velocity_at
from .inference import Context, flow_sample
from .model import init_params
from .toyworld import GridConfig
from .trainer import OptimizerState, adamw_step, clip_grad_norm


def _tiny_setup():
    grid = GridConfig(channels=2, height=3, width=3)
    cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, grid=grid,
                      max_len=32, dtype="float64")
    params = init_params(cfg, seed=3)
    b = SequenceBuilder(grid)
    b.add_text("prompt", [1, 2])
    b.add_image("img_cond")
    b.add_text("answer", [5, 6, 2], supervised=True)
    b.add_image("img_gen")
    seq = b.build()
    rng = np.random.default_rng(11)
    cond = rng.uniform(-1, 1, grid.shape)
    x1 = rng.uniform(-1, 1, grid.shape)
    z0 = rng.standard_normal(grid.shape)
    t = 0.37
    zt = objectives.interpolate(x1, z0, t).z_t
    sample = TrainSample(seq, "vcot_initial", [cond], x1)
    gs = zt.reshape(grid.channels, -1).T

    def loss_fn(p):
        pk = pack_batch([sample], cfg, [gs])
        h = forward_packed(p, cfg, pk, np.array([t]))
        logits = text_logits_at(p, h, pk.ar_pred_rows)
        ar = objectives.ar_loss(logits, pk.ar_targets, np.ones(len(pk.ar_targets), bool))
        vel = velocity_at(p, cfg, h, pk)
        tgt = (x1 - z0).reshape(grid.channels, -1).T[None]
        fm = nn.mean_(nn.square(nn.sub(vel, tgt)))
        return objectives.combined_loss(fm, ar)

    return cfg, params, sample, loss_fn


def check_gradients(sample_per_tensor: int = 6) -> tuple[str, bool, str]:
    """Spot-check analytic gradients on the combined loss.

    Sweeps a few representative tensors fully and a deterministic sample
    of scalars elsewhere (the full sweep lives in the acceptance tests).
    """
    cfg, params, _, loss_fn = _tiny_setup()
    full = ["head_vel.w", "head_text.b", "layers.0.cor.attn.wq", "img_in.gen.w"]
    err = nn.gradient_check(loss_fn, params, eps=1e-5, param_names=full)

    with nn.Tape() as tape:
        loss = loss_fn(params)
    analytic = nn.param_grads(tape.backward(loss), params)
    rng = np.random.default_rng(0)
    for name, t in params.items():
        if name in full:
            continue
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in rng.choice(flat.size, size=min(sample_per_tensor, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + 1e-5
            lp = float(loss_fn(params).data)
            flat[i] = orig - 1e-5
            lm = float(loss_fn(params).data)
            flat[i] = orig
            fd = (lp - lm) / 2e-5
            err = max(err, abs(ga[i] - fd) / max(1.0, abs(ga[i]), abs(fd)))
    return "gradient_check", err < 1e-4, f"max rel err {err:.3e} (tolerance 1e-4)"


def check_sampler() -> tuple[str, bool, str]:
    """Euler sampler against the exact linear oracle field."""
    grid = GridConfig(channels=2, height=4, width=4)
    cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, grid=grid, dtype="float64")
    rng = np.random.default_rng(5)
    x1 = rng.uniform(-1, 1, grid.shape)
    z0 = rng.standard_normal(grid.shape)
    worst = 0.0
    for n_steps in (1, 5, 20):
        out = flow_sample(Context(), [], params=None, cfg=cfg, n_steps=n_steps,
                          z0=z0, velocity_fn=lambda z, t: x1 - z0)
        worst = max(worst, float(np.max(np.abs(out - x1))))
    c = np.full(grid.shape, 0.625)
    out = flow_sample(Context(), [], params=None, cfg=cfg, n_steps=7,
                      z0=np.zeros(grid.shape), velocity_fn=lambda z, t: c)
    tele = float(np.max(np.abs(out - c)))
    ok = worst < 1e-6 and tele == 0.0
    return "sampler_exactness", ok, f"oracle endpoint err {worst:.2e}, telescoping err {tele:.2e}"


def check_mask_soundness(trials: int = 8) -> tuple[str, bool, str]:
    """Perturbing a forbidden token never changes earlier outputs."""
    cfg, params, sample, _ = _tiny_setup()
    rng = np.random.default_rng(2)
    grid = cfg.grid
    ok = True
    for _ in range(trials):
        cond = rng.uniform(-1, 1, grid.shape)
        x1 = rng.uniform(-1, 1, grid.shape)
        z = rng.standard_normal(grid.shape).reshape(grid.channels, -1).T
        s = TrainSample(sample.seq, sample.task, [cond], x1)
        base_logits, base_vel = forward(s, params, cfg, t=0.5, gen_sites=z)
        # img_gen block is the last segment; text/cond tokens before it may
        # not see it, so perturbing z must leave their logits unchanged
        z2 = z.copy()
        z2[rng.integers(len(z2))] += 3.0
        logits2, _ = forward(s, params, cfg, t=0.5, gen_sites=z2)
        gen_start = sample.seq.segments[-1].start
        if not np.array_equal(base_logits[:gen_start], logits2[:gen_start]):
            ok = False
        # and perturbing a text token after the cond image must not change
        # the cond image block's outputs
        seq2 = s.seq
        ids2 = seq2.text_ids.copy()
        ans_start = seq2.segments[2].start
        ids2[ans_start] = (ids2[ans_start] + 3) % cfg.vocab_size
        s2 = TrainSample(dataclasses.replace(seq2, text_ids=ids2), s.task, [cond], x1)
        logits3, _ = forward(s2, params, cfg, t=0.5, gen_sites=z)
        if not np.array_equal(base_logits[:ans_start], logits3[:ans_start]):
            ok = False
    return "mask_soundness", ok, f"{trials} random probes, outputs bit-identical where required"


def check_optimizer() -> tuple[str, bool, str]:
    """AdamW on f(p) = p^2 against a hand-rolled scalar reference."""
    lr, b1, b2, eps = 2e-5, 0.9, 0.95, 1e-15
    p = {"p": nn.Tensor(np.array([1.0]))}
    state = OptimizerState.init(p)
    m = v = 0.0
    ref = 1.0
    worst = 0.0
    for t in range(1, 101):
        g = 2.0 * float(p["p"].data[0])
        adamw_step(p, {"p": np.array([g])}, state, lr, b1, b2, eps, 0.0)
        gr = 2.0 * ref
        m = b1 * m + (1 - b1) * gr
        v = b2 * v + (1 - b2) * gr * gr
        ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        worst = max(worst, abs(float(p["p"].data[0]) - ref))

    grads = {"a": np.array([1.2, 1.6]), "b": np.array([0.0])}  # norm 2.0
    clipped, norm = clip_grad_norm(grads, 1.0)
    clip_ok = abs(norm - 2.0) < 1e-12 and np.allclose(clipped["a"], [0.6, 0.8], atol=1e-12)

    ema = 0.999 * 0.0 + 0.001 * 1.0
    ema_ok = ema == 0.001
    ok = worst < 1e-10 and clip_ok and ema_ok
    return "optimizer_oracle", ok, f"100-step divergence {worst:.2e}, clip and EMA identities {'hold' if clip_ok and ema_ok else 'FAIL'}"


ALL_SUITES = (check_gradients, check_sampler, check_mask_soundness, check_optimizer)


def run_all() -> list[tuple[str, bool, str]]:
    return [suite() for suite in ALL_SUITES]
