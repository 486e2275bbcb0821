"""Dual-expert transformer over interleaved multimodal sequences.

Every token is routed by modality to one of two per-layer expert parameter
sets (text and conditioning images go to the detection expert, generated
image tokens to the correction expert), while attention scores are shared:
each token's Q/K/V come from its own expert's projections and the softmax
runs over the whole sequence. Heads are expert-specific: the text head
reads positions processed by the detection expert, the velocity head reads
the generated-image positions.

Forward evaluation is pure; the batch is processed flat ([B*L, d]) with
gather/scatter partitioning by expert.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dataset import MOD_IMG_COND, MOD_IMG_GEN, MOD_TEXT, KIND_INDEX, MultimodalSequence, TrainSample
from .errors import ConfigError
from .toyworld import PAD, VOCAB, GridConfig

EXPERT_DETECTION = "det"
EXPERT_CORRECTION = "cor"
EXPERTS = (EXPERT_DETECTION, EXPERT_CORRECTION)

TIME_EMB_DIM = 64


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = len(VOCAB)
    grid: GridConfig = field(default_factory=GridConfig)
    patch_size: int = 1
    max_len: int = 160
    flow_steps: int = 20
    timestep_shift: float = 4.0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.patch_size != 1:
            raise ConfigError("only patch_size=1 is supported")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def route(modality: int) -> str:
    """Per-token expert: generated-image tokens go to the correction expert."""
    return EXPERT_CORRECTION if modality == MOD_IMG_GEN else EXPERT_DETECTION


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, nn.Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x40DE1]))
    dt = cfg.np_dtype
    d, v = cfg.d_model, cfg.vocab_size
    out_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers)

    def w(*shape, scale=1.0):
        return nn.Tensor((rng.normal(0.0, 0.02 * scale, size=shape)).astype(dt))

    def zeros(*shape):
        return nn.Tensor(np.zeros(shape, dtype=dt))

    def ones(*shape):
        return nn.Tensor(np.ones(shape, dtype=dt))

    p: dict[str, nn.Tensor] = {
        "tok_emb": w(v, d),
        "pos_text": w(cfg.max_len, d),
        "pos_row": w(cfg.grid.height, d),
        "pos_col": w(cfg.grid.width, d),
        "seg_emb": w(len(KIND_INDEX), d),
        "img_in.cond.w": w(cfg.grid.channels, d),
        "img_in.cond.b": zeros(d),
        "img_in.gen.w": w(cfg.grid.channels, d),
        "img_in.gen.b": zeros(d),
        "time_mlp.w1": w(TIME_EMB_DIM, d),
        "time_mlp.b1": zeros(d),
        "time_mlp.w2": w(d, d),
        "time_mlp.b2": zeros(d),
    }
    for i in range(cfg.n_layers):
        for e in EXPERTS:
            pre = f"layers.{i}.{e}"
            p[f"{pre}.ln1.g"] = ones(d)
            p[f"{pre}.ln1.b"] = zeros(d)
            p[f"{pre}.attn.wq"] = w(d, d)
            p[f"{pre}.attn.bq"] = zeros(d)
            p[f"{pre}.attn.wk"] = w(d, d)
            p[f"{pre}.attn.bk"] = zeros(d)
            p[f"{pre}.attn.wv"] = w(d, d)
            p[f"{pre}.attn.bv"] = zeros(d)
            p[f"{pre}.attn.wo"] = w(d, d, scale=out_scale)
            p[f"{pre}.attn.bo"] = zeros(d)
            p[f"{pre}.ln2.g"] = ones(d)
            p[f"{pre}.ln2.b"] = zeros(d)
            p[f"{pre}.ffn.w1"] = w(d, 4 * d)
            p[f"{pre}.ffn.b1"] = zeros(4 * d)
            p[f"{pre}.ffn.w2"] = w(4 * d, d, scale=out_scale)
            p[f"{pre}.ffn.b2"] = zeros(d)
    p["head_text.w"] = w(d, v)
    p["head_text.b"] = zeros(v)
    p["head_vel.w"] = w(d, cfg.grid.channels)
    p["head_vel.b"] = zeros(cfg.grid.channels)
    return p


def is_correction_param(name: str) -> bool:
    return f".{EXPERT_CORRECTION}." in name or name.startswith("head_vel")


# ---------------------------------------------------------------------------
# attention mask
# ---------------------------------------------------------------------------

def allow_matrix(segment_id: np.ndarray, modality: np.ndarray) -> np.ndarray:
    """allow(i, j): j in an earlier segment, or same segment and
    (causal for text, unrestricted for image blocks)."""
    seg_i = segment_id[:, None]
    seg_j = segment_id[None, :]
    pos = np.arange(len(segment_id))
    causal = pos[None, :] <= pos[:, None]
    is_text_i = (modality == MOD_TEXT)[:, None]
    same = seg_i == seg_j
    return (seg_j < seg_i) | (same & (causal | ~is_text_i))


def build_attention_mask(seq: MultimodalSequence) -> np.ndarray:
    return allow_matrix(seq.segment_id, seq.modality)


# ---------------------------------------------------------------------------
# batch packing
# ---------------------------------------------------------------------------

@dataclass
class PackedBatch:
    B: int
    L: int
    text_rows: np.ndarray        # flat indices of text (incl. pad) positions
    text_ids: np.ndarray         # token ids at text_rows
    text_pos: np.ndarray         # sequence positions at text_rows
    cond_rows: np.ndarray
    cond_values: np.ndarray      # [n_cond, C]
    cond_row_idx: np.ndarray     # grid row per cond token
    cond_col_idx: np.ndarray
    gen_rows: np.ndarray         # flat indices of img_gen positions
    gen_values: np.ndarray       # [n_gen, C]
    gen_row_idx: np.ndarray
    gen_col_idx: np.ndarray
    gen_sample: np.ndarray       # sample index per gen token
    kind_flat: np.ndarray        # [B*L] segment-kind index
    det_rows: np.ndarray
    cor_rows: np.ndarray
    attn_bias: np.ndarray        # [B, 1, L, L]
    ar_pred_rows: np.ndarray     # flat rows whose logits predict a supervised token
    ar_targets: np.ndarray
    n_gen_per_sample: int


def _image_to_sites(img: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (H*W, C), row-major sites."""
    c = img.shape[0]
    return img.reshape(c, -1).T


def sites_to_image(sites: np.ndarray, grid: GridConfig) -> np.ndarray:
    """(H*W, C) -> (C, H, W); inverse of _image_to_sites."""
    return sites.T.reshape(grid.channels, grid.height, grid.width)


def pack_batch(
    samples: list[TrainSample],
    cfg: ModelConfig,
    gen_values: list[np.ndarray] | None = None,
) -> PackedBatch:
    """Pad to a common length and flatten index structure for the forward pass.

    ``gen_values[b]`` holds the (H*W, C) noised-latent values for sample b's
    img_gen block; omitted for sequences without generation tokens.
    """
    dt = cfg.np_dtype
    B = len(samples)
    L = max(len(s.seq) for s in samples)
    if L > cfg.max_len:
        raise ConfigError(f"sequence length {L} exceeds max_len {cfg.max_len}")

    text_rows, text_ids, text_pos = [], [], []
    cond_rows, cond_vals, cond_r, cond_c = [], [], [], []
    gen_rows, gen_vals, gen_r, gen_c, gen_sample = [], [], [], [], []
    kind_flat = np.full(B * L, KIND_INDEX["prompt"], dtype=np.int64)
    bias = np.zeros((B, 1, L, L), dtype=dt)
    ar_pred_rows, ar_targets = [], []
    n_gen_per_sample = 0

    w = cfg.grid.width
    for b, s in enumerate(samples):
        seq = s.seq
        n = len(seq)
        base = b * L
        pad = L - n
        seg = seq.segment_id
        mod = seq.modality
        if pad:
            seg = np.concatenate([seg, np.full(pad, seg[-1] + 1, dtype=seg.dtype)])
            mod = np.concatenate([mod, np.full(pad, MOD_TEXT, dtype=mod.dtype)])
        allow = allow_matrix(seg, mod)
        bias[b, 0][~allow] = nn.NEG_ATTENTION_BIAS

        for sid, segment in enumerate(seq.segments):
            sl = slice(segment.start, segment.start + segment.length)
            kind_flat[base + segment.start: base + segment.start + segment.length] = (
                KIND_INDEX[segment.kind])
            rows = np.arange(base + segment.start, base + segment.start + segment.length)
            if segment.kind in ("prompt", "answer"):
                text_rows.append(rows)
                text_ids.append(seq.text_ids[sl])
                text_pos.append(np.arange(segment.start, segment.start + segment.length))
            elif segment.kind == "img_cond":
                img_i = sum(1 for t in seq.segments[:sid] if t.kind == "img_cond")
                cond_rows.append(rows)
                cond_vals.append(_image_to_sites(s.cond_images[img_i]).astype(dt))
                sites = seq.site[sl]
                cond_r.append(sites // w)
                cond_c.append(sites % w)
            else:
                gen_rows.append(rows)
                if gen_values is not None:
                    gen_vals.append(gen_values[b].astype(dt))
                sites = seq.site[sl]
                gen_r.append(sites // w)
                gen_c.append(sites % w)
                gen_sample.append(np.full(segment.length, b, dtype=np.int64))
                n_gen_per_sample = segment.length
        if pad:
            rows = np.arange(base + n, base + L)
            text_rows.append(rows)
            text_ids.append(np.full(pad, PAD, dtype=np.int64))
            text_pos.append(np.arange(n, L))

        for p in np.flatnonzero(seq.ar_loss_mask):
            ar_pred_rows.append(base + p - 1)
            ar_targets.append(seq.text_ids[p])

    def cat(parts, dtype=np.int64):
        return (np.concatenate(parts) if parts else np.zeros(0, dtype=dtype))

    text_rows = cat(text_rows)
    gen_rows_arr = cat(gen_rows)
    cond_rows_arr = cat(cond_rows)
    det_rows = np.setdiff1d(np.arange(B * L), gen_rows_arr)
    return PackedBatch(
        B=B, L=L,
        text_rows=text_rows,
        text_ids=cat(text_ids),
        text_pos=cat(text_pos),
        cond_rows=cond_rows_arr,
        cond_values=(np.concatenate(cond_vals) if cond_vals
                     else np.zeros((0, cfg.grid.channels), dtype=dt)),
        cond_row_idx=cat(cond_r),
        cond_col_idx=cat(cond_c),
        gen_rows=gen_rows_arr,
        gen_values=(np.concatenate(gen_vals) if gen_vals
                    else np.zeros((0, cfg.grid.channels), dtype=dt)),
        gen_row_idx=cat(gen_r),
        gen_col_idx=cat(gen_c),
        gen_sample=cat(gen_sample),
        kind_flat=kind_flat,
        det_rows=det_rows,
        cor_rows=np.sort(gen_rows_arr),
        attn_bias=bias,
        ar_pred_rows=np.asarray(ar_pred_rows, dtype=np.int64),
        ar_targets=np.asarray(ar_targets, dtype=np.int64),
        n_gen_per_sample=n_gen_per_sample,
    )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _timestep_features(t: np.ndarray, dtype) -> np.ndarray:
    """Sinusoidal features of t in [0,1]; [B, TIME_EMB_DIM]."""
    half = TIME_EMB_DIM // 2
    freqs = np.power(1000.0, np.arange(half) / (half - 1))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(dtype)


def _affine(x, g, b):
    return nn.add(nn.mul(x, g), b)


def forward_packed(
    params: dict[str, nn.Tensor],
    cfg: ModelConfig,
    pk: PackedBatch,
    t: np.ndarray | None = None,
) -> nn.Tensor:
    """Run the trunk; returns the final hidden states, flat [B*L, d]."""
    if pk.gen_rows.size and t is None:
        raise ConfigError("timestep t required when img_gen tokens are present")
    N = pk.B * pk.L
    dt = cfg.np_dtype

    e_text = nn.add(
        nn.gather(params["tok_emb"], pk.text_ids),
        nn.gather(params["pos_text"], pk.text_pos),
    )
    x = nn.scatter_rows(e_text, pk.text_rows, N)

    if pk.cond_rows.size:
        e_cond = nn.add(nn.matmul(pk.cond_values, params["img_in.cond.w"]), params["img_in.cond.b"])
        e_cond = nn.add(e_cond, nn.add(
            nn.gather(params["pos_row"], pk.cond_row_idx),
            nn.gather(params["pos_col"], pk.cond_col_idx)))
        x = nn.add(x, nn.scatter_rows(e_cond, pk.cond_rows, N))

    if pk.gen_rows.size:
        feats = _timestep_features(np.asarray(t, dtype=np.float64).reshape(-1), dt)
        h = nn.add(nn.matmul(feats, params["time_mlp.w1"]), params["time_mlp.b1"])
        temb = nn.add(nn.matmul(nn.gelu(h), params["time_mlp.w2"]), params["time_mlp.b2"])
        e_gen = nn.add(nn.matmul(pk.gen_values, params["img_in.gen.w"]), params["img_in.gen.b"])
        e_gen = nn.add(e_gen, nn.add(
            nn.gather(params["pos_row"], pk.gen_row_idx),
            nn.gather(params["pos_col"], pk.gen_col_idx)))
        e_gen = nn.add(e_gen, nn.gather(temb, pk.gen_sample))
        x = nn.add(x, nn.scatter_rows(e_gen, pk.gen_rows, N))

    x = nn.add(x, nn.gather(params["seg_emb"], pk.kind_flat))

    rows_by_expert = {EXPERT_DETECTION: pk.det_rows, EXPERT_CORRECTION: pk.cor_rows}
    d, nh, hd = cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / float(np.sqrt(hd))  # python float: no dtype promotion

    for i in range(cfg.n_layers):
        qkv = {}
        for e in EXPERTS:
            rows = rows_by_expert[e]
            pre = f"layers.{i}.{e}"
            h = nn.gather(x, rows, unique=True)
            h = _affine(nn.layer_norm(h), params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
            for which in ("q", "k", "v"):
                proj = nn.add(nn.matmul(h, params[f"{pre}.attn.w{which}"]),
                              params[f"{pre}.attn.b{which}"])
                part = nn.scatter_rows(proj, rows, N)
                qkv[which] = part if e == EXPERT_DETECTION else nn.add(qkv[which], part)

        def heads(z):
            return nn.swapaxes(nn.reshape(z, (pk.B, pk.L, nh, hd)), 1, 2)

        q, k, v = heads(qkv["q"]), heads(qkv["k"]), heads(qkv["v"])
        scores = nn.add(nn.mul(nn.matmul(q, nn.swapaxes(k, -1, -2)), scale), pk.attn_bias)
        ctx = nn.matmul(nn.softmax(scores), v)
        ctx = nn.reshape(nn.swapaxes(ctx, 1, 2), (N, d))

        attn_out = None
        for e in EXPERTS:
            rows = rows_by_expert[e]
            pre = f"layers.{i}.{e}"
            o = nn.add(nn.matmul(nn.gather(ctx, rows, unique=True), params[f"{pre}.attn.wo"]),
                       params[f"{pre}.attn.bo"])
            part = nn.scatter_rows(o, rows, N)
            attn_out = part if attn_out is None else nn.add(attn_out, part)
        x = nn.add(x, attn_out)

        ffn_out = None
        for e in EXPERTS:
            rows = rows_by_expert[e]
            pre = f"layers.{i}.{e}"
            h = nn.gather(x, rows, unique=True)
            h = _affine(nn.layer_norm(h), params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
            h = nn.gelu(nn.add(nn.matmul(h, params[f"{pre}.ffn.w1"]), params[f"{pre}.ffn.b1"]))
            h = nn.add(nn.matmul(h, params[f"{pre}.ffn.w2"]), params[f"{pre}.ffn.b2"])
            part = nn.scatter_rows(h, rows, N)
            ffn_out = part if ffn_out is None else nn.add(ffn_out, part)
        x = nn.add(x, ffn_out)

    return x


def text_logits_at(params: dict[str, nn.Tensor], hidden: nn.Tensor, rows: np.ndarray) -> nn.Tensor:
    h = nn.gather(hidden, rows, unique=True)
    return nn.add(nn.matmul(h, params["head_text.w"]), params["head_text.b"])


def velocity_at(
    params: dict[str, nn.Tensor], cfg: ModelConfig, hidden: nn.Tensor, pk: PackedBatch
) -> nn.Tensor:
    """Velocity for every img_gen token, [B, n_gen, C]."""
    h = nn.gather(hidden, pk.gen_rows, unique=True)
    v = nn.add(nn.matmul(h, params["head_vel.w"]), params["head_vel.b"])
    return nn.reshape(v, (pk.B, pk.n_gen_per_sample, cfg.grid.channels))


def forward(
    seq_sample: TrainSample,
    params: dict[str, nn.Tensor],
    cfg: ModelConfig,
    t: float | None = None,
    gen_sites: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Single-sample forward: (text logits [L, V], velocity (C,H,W) or None).

    ``gen_sites`` carries the (H*W, C) noised-latent values when the
    sequence has an img_gen block; ``t`` is then required.
    """
    has_gen = bool(seq_sample.seq.fm_loss_mask.any())
    if has_gen and t is None:
        raise ConfigError("forward: timestep t required for img_gen tokens")
    pk = pack_batch([seq_sample], cfg, [gen_sites] if has_gen else None)
    hidden = forward_packed(params, cfg, pk, np.array([t]) if has_gen else None)
    logits = text_logits_at(params, hidden, np.arange(pk.L)).data
    vel = None
    if has_gen:
        vel_sites = velocity_at(params, cfg, hidden, pk).data[0]
        vel = sites_to_image(vel_sites, cfg.grid)
    return logits, vel
