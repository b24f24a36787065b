"""The five chain components plus the speaker embedder.

All components are small attention seq2seq networks over the tensor module:

* speech-to-text: bidirectional tanh-RNN frame encoder, attention decoder
* image-to-text: patch-grid affine encoder, attention decoder
* dual-decoder speech/image-to-text: one decoder per modality whose per-step
  output distributions are averaged when both modalities are present
* text-to-speech: text encoder, autoregressive frame decoder with a stop
  predictor, conditioned on a fixed speaker embedding per utterance
* text-to-image: text encoder, attention-pooled code, affine upsampler
* speaker embedder: mean-pooled frames through one tanh layer

Teacher-forced forwards run on the active tape; decoding is plain numpy and
therefore can never leak gradients into the models that produced its inputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .tensor import (
    Tensor,
    affine,
    attend,
    bce_with_logits_loss,
    concat,
    concat_affine,
    cross_entropy_loss,
    embedding_lookup,
    matmul,
    mse_loss,
    mul,
    nll_of_probs_loss,
    relu,
    reshape,
    rnn_tanh_cell,
    sigmoid,
    slice_,
    softmax,
    tanh,
    time_reverse,
    transpose,
)
from .world import EOS, PAD, SOS, VOCAB_SIZE, Image, SpeechSeq, TextSeq

COMPONENT_KINDS = ("asr", "ic", "imgsp2txt", "tts", "ig", "spkembed")

_NEG_BIAS = -1e9  # attention score bias at padded positions

# sinusoidal position features; a band of frequencies makes monotonic
# attention alignments linearly learnable for the dot-product scorer
_FRAME_PERIODS = (12.0, 24.0, 48.0, 96.0)
_CHAR_PERIODS = (4.0, 8.0, 16.0, 32.0)
PE_FRAME_DIMS = 2 * len(_FRAME_PERIODS)
PE_PATCH_DIMS = 6


def _sin_posenc(n: int, periods) -> np.ndarray:
    t = np.arange(n, dtype=np.float64)[:, None]
    feats = []
    for p in periods:
        feats.append(np.sin(2.0 * np.pi * t / p))
        feats.append(np.cos(2.0 * np.pi * t / p))
    return np.concatenate(feats, axis=1)


def frame_pos_features(n: int) -> np.ndarray:
    return _sin_posenc(n, _FRAME_PERIODS)


def char_pos_table(n: int, width: int) -> np.ndarray:
    pe = _sin_posenc(n, _CHAR_PERIODS)
    out = np.zeros((n, width))
    k = min(width, pe.shape[1])
    out[:, :k] = pe[:, :k]
    return out


def text_to_speech_diag_bias(n_frames: int, n_chars: int, ratio: int, kappa: float) -> np.ndarray:
    """Soft-diagonal attention prior for frame step t over char positions.

    The synthetic world emits a fixed number of frames per character, so the
    true alignment is the diagonal; a quadratic penalty away from it lets
    attention lock on early while content still refines the weights.
    """
    t = np.arange(n_frames, dtype=np.float64)[:, None]
    i = np.arange(n_chars, dtype=np.float64)[None, :]
    mu = (t - (ratio - 1) / 2.0) / ratio
    return -kappa * (i - mu) ** 2


def speech_to_text_diag_bias(n_chars: int, n_frames: int, ratio: int, kappa: float) -> np.ndarray:
    """Soft-diagonal prior for char step t over frame positions."""
    t = np.arange(n_chars, dtype=np.float64)[:, None]
    j = np.arange(n_frames, dtype=np.float64)[None, :]
    mu = ratio * t + (ratio - 1) / 2.0
    return -kappa * ((j - mu) / ratio) ** 2


def image_salience_bias(pixels: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, P) attention score bias toward patches that contain anything.

    Empty background patches carry no information; biasing scores by patch
    peak intensity points the captioning decoders at the glyph from step one.
    """
    patches = image_patches(pixels, cfg)
    return cfg.attn_salience_strength * patches.max(axis=2)


def patch_pos_features(grid: int) -> np.ndarray:
    r, c = np.divmod(np.arange(grid * grid, dtype=np.float64), grid)
    return np.stack(
        [
            r / max(grid - 1, 1),
            c / max(grid - 1, 1),
            np.sin(2.0 * np.pi * r / grid),
            np.cos(2.0 * np.pi * r / grid),
            np.sin(2.0 * np.pi * c / grid),
            np.cos(2.0 * np.pi * c / grid),
        ],
        axis=1,
    )


@dataclass
class ModelConfig:
    hidden: int = 32
    spk_dim: int = 8
    vocab: int = VOCAB_SIZE
    frame_dim: int = 8
    image_size: int = 16
    image_channels: int = 1
    patch: int = 4
    max_text_len: int = 24
    max_frames: int = 96
    beam: int = 3
    num_speakers: int = 8
    frames_per_char: int = 3  # speech/text alignment ratio for the diagonal prior
    attn_diag_strength: float = 4.0
    attn_salience_strength: float = 6.0  # image attention bias toward non-empty patches
    fused_loss_variant: str = "mixture"  # mixture | per_decoder
    stop_pos_weight: float = 5.0
    init_scale: float = 0.08  # output projections: keeps untrained losses near ln V
    init_scale_inner: float = 0.5  # embeddings / recurrent / attention weights

    @property
    def patch_count(self) -> int:
        g = self.image_size // self.patch
        return g * g

    @property
    def patch_pixels(self) -> int:
        return self.patch * self.patch * self.image_channels

    @property
    def n_pixels(self) -> int:
        return self.image_size * self.image_size * self.image_channels


@dataclass
class ComponentParams:
    kind: str
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


@dataclass
class DualDecoderOutput:
    p_x: np.ndarray | None  # per-step distributions of the speech decoder
    p_z: np.ndarray | None  # per-step distributions of the image decoder
    fused: np.ndarray  # averaged when both present, else the present one


def params_digest(params: ComponentParams) -> str:
    """Stable byte-level checksum used by the parameter-isolation audits."""
    h = hashlib.sha256()
    for name in sorted(params.tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params.tensors[name].data).tobytes())
    return h.hexdigest()


def clone_params(params: ComponentParams) -> ComponentParams:
    return ComponentParams(
        kind=params.kind,
        tensors={
            n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for n, t in params.tensors.items()
        },
    )


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng, shape, scale) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def _add_speech_encoder(t, rng, cfg: ModelConfig) -> None:
    H, F, s = cfg.hidden, cfg.frame_dim, cfg.init_scale_inner
    for d in ("fwd", "bwd"):
        t[f"enc_{d}_wx"] = _uniform(rng, (F + PE_FRAME_DIMS, H), s)
        t[f"enc_{d}_wh"] = _uniform(rng, (H, H), s)
        t[f"enc_{d}_b"] = _uniform(rng, (H,), s)


def _add_text_encoder(t, rng, cfg: ModelConfig) -> None:
    H, s = cfg.hidden, cfg.init_scale_inner
    t["tenc_emb"] = _uniform(rng, (cfg.vocab, H), s)
    for d in ("fwd", "bwd"):
        t[f"tenc_{d}_wx"] = _uniform(rng, (H, H), s)
        t[f"tenc_{d}_wh"] = _uniform(rng, (H, H), s)
        t[f"tenc_{d}_b"] = _uniform(rng, (H,), s)


def _add_image_encoder(t, rng, cfg: ModelConfig) -> None:
    H, s = cfg.hidden, cfg.init_scale_inner
    width = 2 * cfg.patch_pixels + 2 + PE_PATCH_DIMS
    t["ienc_w"] = _uniform(rng, (width, 2 * H), s)
    t["ienc_b"] = _uniform(rng, (2 * H,), s)


def _add_text_decoder(t, rng, cfg: ModelConfig, prefix: str) -> None:
    H, V = cfg.hidden, cfg.vocab
    s, so = cfg.init_scale_inner, cfg.init_scale
    t[f"{prefix}_emb"] = _uniform(rng, (V, H), s)
    # recurrence input: [token embedding ; previous attention context]
    t[f"{prefix}_wx"] = _uniform(rng, (2 * H, H), s)
    t[f"{prefix}_wh"] = _uniform(rng, (H, H), s)
    t[f"{prefix}_b"] = _uniform(rng, (H,), s)
    t[f"{prefix}_attn"] = _uniform(rng, (2 * H, H), s)
    # tanh combination layer plus a bilinear position-content pathway; the
    # elementwise product lets step position select what to read out of a
    # static attended context without waiting on deep credit assignment
    t[f"{prefix}_wc"] = _uniform(rng, (2 * H, 2 * H), s)
    t[f"{prefix}_bc"] = _uniform(rng, (2 * H,), s)
    t[f"{prefix}_bu"] = _uniform(rng, (2 * H, H), s)
    t[f"{prefix}_bv"] = _uniform(rng, (H, H), s)
    t[f"{prefix}_bw"] = _uniform(rng, (H, V), so)
    t[f"{prefix}_wo"] = _uniform(rng, (2 * H, V), so)
    t[f"{prefix}_bo"] = _uniform(rng, (V,), so)


def init_component(kind: str, cfg: ModelConfig, seed: int) -> ComponentParams:
    """Initialize one component from its own seed-derived stream."""
    if kind not in COMPONENT_KINDS and kind != "ig_disc":
        raise ContractViolation(f"unknown component kind: {kind}")
    stream = np.random.default_rng(
        np.random.SeedSequence([33, seed, _kind_index(kind)])
    )
    H, s = cfg.hidden, cfg.init_scale
    t: dict[str, np.ndarray] = {}
    if kind == "asr":
        _add_speech_encoder(t, stream, cfg)
        _add_text_decoder(t, stream, cfg, "dec")
    elif kind == "ic":
        _add_image_encoder(t, stream, cfg)
        _add_text_decoder(t, stream, cfg, "dec")
    elif kind == "imgsp2txt":
        _add_speech_encoder(t, stream, cfg)
        _add_image_encoder(t, stream, cfg)
        _add_text_decoder(t, stream, cfg, "decx")
        _add_text_decoder(t, stream, cfg, "decz")
    elif kind == "tts":
        si = cfg.init_scale_inner
        _add_text_encoder(t, stream, cfg)
        # decoder input: [speaker ; frame-step position ; previous attention
        # context]; no predicted-frame feedback, so the free-running decode
        # computes exactly what teacher forcing trained
        t["tdec_wx"] = _uniform(stream, (cfg.spk_dim + PE_FRAME_DIMS + H, H), si)
        t["tdec_wh"] = _uniform(stream, (H, H), si)
        t["tdec_b"] = _uniform(stream, (H,), si)
        t["tdec_attn"] = _uniform(stream, (2 * H, H), si)
        t["tdec_frame_w"] = _uniform(stream, (2 * H, cfg.frame_dim), s)
        t["tdec_frame_b"] = _uniform(stream, (cfg.frame_dim,), s)
        t["tdec_stop_w"] = _uniform(stream, (2 * H, 1), s)
        t["tdec_stop_b"] = _uniform(stream, (1,), s)
    elif kind == "ig":
        si = cfg.init_scale_inner
        _add_text_encoder(t, stream, cfg)
        t["pool_q"] = _uniform(stream, (2 * H,), si)
        t["gen_w1"] = _uniform(stream, (2 * H, 2 * H), si)
        t["gen_b1"] = _uniform(stream, (2 * H,), si)
        t["gen_where_w"] = _uniform(stream, (2 * H, cfg.patch_count), si)
        t["gen_where_b"] = _uniform(stream, (cfg.patch_count,), s)
        t["gen_what_w"] = _uniform(stream, (2 * H, cfg.patch_pixels), si)
        t["gen_what_b"] = _uniform(stream, (cfg.patch_pixels,), s)
    elif kind == "spkembed":
        si = cfg.init_scale_inner
        t["se_w"] = _uniform(stream, (cfg.frame_dim, cfg.spk_dim), si)
        t["se_b"] = _uniform(stream, (cfg.spk_dim,), si)
        t["se_cls_w"] = _uniform(stream, (cfg.spk_dim, cfg.num_speakers), s)
        t["se_cls_b"] = _uniform(stream, (cfg.num_speakers,), s)
    elif kind == "ig_disc":
        si = cfg.init_scale_inner
        t["d_w1"] = _uniform(stream, (cfg.n_pixels, H), si)
        t["d_b1"] = _uniform(stream, (H,), si)
        t["d_w2"] = _uniform(stream, (H, 1), s)
        t["d_b2"] = _uniform(stream, (1,), s)
    return ComponentParams(
        kind=kind,
        tensors={n: Tensor(v, requires_grad=True) for n, v in t.items()},
    )


def _kind_index(kind: str) -> int:
    table = {k: i for i, k in enumerate(COMPONENT_KINDS)}
    table["ig_disc"] = len(COMPONENT_KINDS)
    return table[kind]


def init_all_components(
    cfg: ModelConfig, seed: int, kinds=COMPONENT_KINDS
) -> dict[str, ComponentParams]:
    return {k: init_component(k, cfg, seed) for k in kinds}


# ---------------------------------------------------------------------------
# batching


@dataclass
class SpeechBatch:
    frames: np.ndarray  # (B, T, F) zero-padded
    lengths: np.ndarray  # (B,)
    stops: np.ndarray  # (B, T) float targets

    @property
    def mask(self) -> np.ndarray:
        T = self.frames.shape[1]
        return np.arange(T)[None, :] < self.lengths[:, None]


@dataclass
class TextBatch:
    tokens_in: np.ndarray  # (B, L) SOS-shifted decoder inputs
    targets: np.ndarray  # (B, L) token ids ending in EOS, PAD after
    lengths: np.ndarray  # (B,) counts including EOS

    @property
    def mask(self) -> np.ndarray:
        L = self.targets.shape[1]
        return np.arange(L)[None, :] < self.lengths[:, None]


@dataclass
class ImageBatch:
    pixels: np.ndarray  # (B, H, W, C)


def make_speech_batch(xs: list[SpeechSeq]) -> SpeechBatch:
    if not xs:
        raise ContractViolation("empty speech batch")
    if any(len(x) == 0 for x in xs):
        raise ContractViolation("speech sequence with zero frames")
    T = max(len(x) for x in xs)
    F = xs[0].frames.shape[1]
    frames = np.zeros((len(xs), T, F))
    stops = np.zeros((len(xs), T))
    lengths = np.zeros(len(xs), dtype=np.int64)
    for i, x in enumerate(xs):
        n = len(x)
        frames[i, :n] = x.frames
        stops[i, :n] = x.stop_flags.astype(np.float64)
        lengths[i] = n
    return SpeechBatch(frames=frames, lengths=lengths, stops=stops)


def make_text_batch(ys: list[TextSeq]) -> TextBatch:
    if not ys:
        raise ContractViolation("empty text batch")
    L = max(len(y) for y in ys)
    tokens_in = np.full((len(ys), L), PAD, dtype=np.int64)
    targets = np.full((len(ys), L), PAD, dtype=np.int64)
    lengths = np.zeros(len(ys), dtype=np.int64)
    for i, y in enumerate(ys):
        n = len(y)
        tokens_in[i, 0] = SOS
        tokens_in[i, 1:n] = y.tokens[: n - 1]
        targets[i, :n] = y.tokens
        lengths[i] = n
    return TextBatch(tokens_in=tokens_in, targets=targets, lengths=lengths)


def make_image_batch(zs: list[Image]) -> ImageBatch:
    if not zs:
        raise ContractViolation("empty image batch")
    return ImageBatch(pixels=np.stack([z.pixels for z in zs]))


def _as_speech_batch(x) -> SpeechBatch:
    return x if isinstance(x, SpeechBatch) else make_speech_batch([x])


def _as_text_batch(y) -> TextBatch:
    return y if isinstance(y, TextBatch) else make_text_batch([y])


def _as_image_batch(z) -> ImageBatch:
    return z if isinstance(z, ImageBatch) else make_image_batch([z])


def _mask_bias(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, _NEG_BIAS)


# ---------------------------------------------------------------------------
# encoders (taped)


def _rnn_sweep(x_steps, wx, wh, b, B: int, H: int) -> Tensor:
    """Run a tanh RNN over a list of (B, D) inputs; stack to (B, T, H)."""
    h = Tensor(np.zeros((B, H)))
    outs = []
    for x_t in x_steps:
        h = rnn_tanh_cell(x_t, h, wx, wh, b)
        outs.append(reshape(h, (B, 1, H)))
    return concat(outs, axis=1)


def encode_speech(p: ComponentParams, xb: SpeechBatch, cfg: ModelConfig) -> Tensor:
    """Bidirectional frame encoder -> (B, T, 2H) states."""
    B, T, _ = xb.frames.shape
    H = cfg.hidden
    aug = np.concatenate(
        [xb.frames, np.tile(frame_pos_features(T)[None], (B, 1, 1))], axis=2
    )
    fwd_in = [Tensor(aug[:, t]) for t in range(T)]
    rev = np.zeros_like(aug)
    for i in range(B):
        n = int(xb.lengths[i])
        rev[i, :n] = aug[i, :n][::-1]
    bwd_in = [Tensor(rev[:, t]) for t in range(T)]
    f_states = _rnn_sweep(fwd_in, p["enc_fwd_wx"], p["enc_fwd_wh"], p["enc_fwd_b"], B, H)
    b_states = _rnn_sweep(bwd_in, p["enc_bwd_wx"], p["enc_bwd_wh"], p["enc_bwd_b"], B, H)
    b_states = time_reverse(b_states, xb.lengths)
    return concat([f_states, b_states], axis=2)


def encode_text(p: ComponentParams, yb: TextBatch, cfg: ModelConfig) -> Tensor:
    """Bidirectional character encoder over targets -> (B, L, 2H)."""
    B, L = yb.targets.shape
    H = cfg.hidden
    emb = p["tenc_emb"]
    toks = np.where(yb.mask, yb.targets, 0)
    rev_toks = toks.copy()
    for i in range(B):
        n = int(yb.lengths[i])
        rev_toks[i, :n] = toks[i, :n][::-1]
    pe = char_pos_table(L, emb.data.shape[1])
    fwd_in = [embedding_lookup(emb, toks[:, t]) + Tensor(pe[t]) for t in range(L)]
    bwd_in = [embedding_lookup(emb, rev_toks[:, t]) + Tensor(pe[t]) for t in range(L)]
    f_states = _rnn_sweep(fwd_in, p["tenc_fwd_wx"], p["tenc_fwd_wh"], p["tenc_fwd_b"], B, H)
    b_states = _rnn_sweep(bwd_in, p["tenc_bwd_wx"], p["tenc_bwd_wh"], p["tenc_bwd_b"], B, H)
    b_states = time_reverse(b_states, yb.lengths)
    return concat([f_states, b_states], axis=2)


def image_patches(pixels: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, patches, patch*patch*C) row-major patch grid."""
    B = pixels.shape[0]
    g = cfg.image_size // cfg.patch
    p = cfg.patch
    x = pixels.reshape(B, g, p, g, p, cfg.image_channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(B, g * g, cfg.patch_pixels))


def encode_image(p: ComponentParams, zb: ImageBatch, cfg: ModelConfig) -> Tensor:
    """Patch-grid affine encoder -> (B, P, 2H) region states.

    Patch vectors carry their grid coordinates; glyph pixels alone cannot
    tell the captioner where on the grid the object sits.
    """
    patches = image_patches(zb.pixels, cfg)
    B, P, _ = patches.shape
    pos = np.tile(patch_pos_features(cfg.image_size // cfg.patch)[None], (B, 1, 1))
    peak = patches.max(axis=2, keepdims=True)
    mean = patches.mean(axis=2, keepdims=True)
    shape = patches / np.maximum(peak, 1e-6)  # intensity-normalized stencil
    aug = np.concatenate([patches, shape, peak, mean, pos], axis=2)
    return tanh(affine(Tensor(aug), p["ienc_w"], p["ienc_b"]))


# ---------------------------------------------------------------------------
# attention text decoder (taped, teacher-forced)


def _zeros_h(B: int, H: int) -> Tensor:
    return Tensor(np.zeros(H))


def text_decoder_forward(
    p: ComponentParams,
    prefix: str,
    enc_states: Tensor,
    enc_bias: np.ndarray,
    yb: TextBatch,
    cfg: ModelConfig,
    diag: bool = False,
) -> Tensor:
    """Teacher-forced decoder logits (B, L, V) attending projected states."""
    B, L = yb.tokens_in.shape
    H, V = cfg.hidden, cfg.vocab
    proj = tanh(enc_states @ p[f"{prefix}_attn"])
    s = Tensor(np.zeros((B, H)))
    pe = char_pos_table(L, p[f"{prefix}_emb"].data.shape[1])
    T_enc = enc_states.data.shape[1]
    diag_bias = (
        speech_to_text_diag_bias(L, T_enc, cfg.frames_per_char, cfg.attn_diag_strength)
        if diag
        else None
    )
    ctx = Tensor(np.zeros((B, H)))
    outs = []
    for t in range(L):
        e_t = embedding_lookup(p[f"{prefix}_emb"], yb.tokens_in[:, t]) + Tensor(pe[t])
        inp = concat([e_t, ctx], axis=1)
        s = rnn_tanh_cell(inp, s, p[f"{prefix}_wx"], p[f"{prefix}_wh"], p[f"{prefix}_b"])
        bias_t = enc_bias if diag_bias is None else enc_bias + diag_bias[t]
        ctx = attend(proj, s, bias_t)
        comb = tanh(concat_affine(s, ctx, p[f"{prefix}_wc"], p[f"{prefix}_bc"]))
        u = concat_affine(s, ctx, p[f"{prefix}_bu"], _zeros_h(B, H))
        v = reshape(Tensor(pe[t : t + 1]) @ p[f"{prefix}_bv"], (1, H))
        logits_t = affine(comb, p[f"{prefix}_wo"], p[f"{prefix}_bo"]) + (
            mul(u, v) @ p[f"{prefix}_bw"]
        )
        outs.append(reshape(logits_t, (B, 1, V)))
    return concat(outs, axis=1)


# ---------------------------------------------------------------------------
# numpy decode helpers (never taped)


def _np_tanh_proj(states: np.ndarray, attn: np.ndarray) -> np.ndarray:
    return np.tanh(states @ attn)


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class _DecoderHalf:
    """Raw-numpy view of one text decoder for stepwise decoding."""

    def __init__(
        self,
        p: ComponentParams,
        prefix: str,
        enc_states: np.ndarray,
        max_len: int,
        cfg: ModelConfig | None = None,
        diag: bool = False,
        score_bias: np.ndarray | None = None,
    ):
        g = lambda n: p.tensors[f"{prefix}_{n}"].data
        self.emb = g("emb")
        self.wx, self.wh, self.b = g("wx"), g("wh"), g("b")
        self.wc, self.bc = g("wc"), g("bc")
        self.bu, self.bv, self.bw = g("bu"), g("bv"), g("bw")
        self.wo, self.bo = g("wo"), g("bo")
        self.proj = _np_tanh_proj(enc_states, g("attn"))  # (T, H)
        self.pe = char_pos_table(max_len, self.emb.shape[1])
        self.diag_bias = (
            speech_to_text_diag_bias(
                max_len, enc_states.shape[0], cfg.frames_per_char, cfg.attn_diag_strength
            )
            if diag
            else None
        )
        self.score_bias = score_bias

    def step(self, prev_tokens: np.ndarray, state, t: int):
        """(n,) ids + (s, ctx) pair arrays -> (n, V) logits, new pair."""
        s, ctx = state
        e = self.emb[prev_tokens] + self.pe[t]
        s_new = np.tanh(np.concatenate([e, ctx], axis=-1) @ self.wx + s @ self.wh + self.b)
        scores = s_new @ self.proj.T
        if self.diag_bias is not None:
            scores = scores + self.diag_bias[t]
        if self.score_bias is not None:
            scores = scores + self.score_bias
        alpha = _np_softmax(scores)
        ctx_new = alpha @ self.proj
        sc = np.concatenate([s_new, ctx_new], axis=-1)
        comb = np.tanh(sc @ self.wc + self.bc)
        gated = (sc @ self.bu) * (self.pe[t] @ self.bv)
        logits = comb @ self.wo + self.bo + gated @ self.bw
        return logits, (s_new, ctx_new)


@dataclass
class _Hyp:
    tokens: tuple
    logp: float
    state: object
    finished: bool

    def norm_score(self) -> float:
        return self.logp / max(len(self.tokens), 1)


def beam_search(step_fn, init_state, beam: int, max_len: int, vocab: int) -> list[int]:
    """Length-normalized beam search over a pluggable step function.

    step_fn(prev_tokens (n,), states list) -> (logprobs (n, V), new states
    list).  Ties break toward the lexicographically smaller token sequence,
    which also prefers the shorter hypothesis on a shared prefix.  Every
    returned sequence ends in EOS and has at most ``max_len`` tokens.
    """
    if beam < 1:
        raise ContractViolation("beam must be >= 1")
    live = [_Hyp(tokens=(), logp=0.0, state=init_state, finished=False)]
    finished: list[_Hyp] = []
    step_idx = 0
    while live:
        prev = np.array([h.tokens[-1] if h.tokens else SOS for h in live])
        logprobs, new_states = step_fn(prev, [h.state for h in live], step_idx)
        step_idx += 1
        logprobs[:, PAD] = -np.inf
        logprobs[:, SOS] = -np.inf
        cands = list(finished)
        for i, h in enumerate(live):
            at_cap = len(h.tokens) >= max_len - 1
            token_range = (EOS,) if at_cap else range(vocab)
            for v in token_range:
                lp = logprobs[i, v]
                if not np.isfinite(lp):
                    continue
                cands.append(
                    _Hyp(
                        tokens=h.tokens + (v,),
                        logp=h.logp + float(lp),
                        state=new_states[i],
                        finished=(v == EOS),
                    )
                )
        cands.sort(key=lambda h: (-h.norm_score(), h.tokens))
        kept = cands[:beam]
        finished = [h for h in kept if h.finished]
        live = [h for h in kept if not h.finished]
    if not finished:  # max_len forces EOS, so this cannot trigger
        raise ContractViolation("beam search ended with no finished hypothesis")
    best = min(finished, key=lambda h: (-h.norm_score(), h.tokens))
    return list(best.tokens)


def _decode_single(
    p: ComponentParams,
    prefix: str,
    enc_states: np.ndarray,
    beam: int,
    cfg: ModelConfig,
    diag: bool = False,
    score_bias: np.ndarray | None = None,
) -> TextSeq:
    half = _DecoderHalf(p, prefix, enc_states, cfg.max_text_len, cfg, diag, score_bias)

    def step(prev, states, t):
        s = np.stack([st[0] for st in states])
        ctx = np.stack([st[1] for st in states])
        logits, (s_new, ctx_new) = half.step(prev, (s, ctx), t)
        return _np_log_softmax(logits), [(s_new[i], ctx_new[i]) for i in range(len(prev))]

    H = cfg.hidden
    toks = beam_search(step, (np.zeros(H), np.zeros(H)), beam, cfg.max_text_len, cfg.vocab)
    return TextSeq(tokens=np.asarray(toks, dtype=np.int64))


# ---------------------------------------------------------------------------
# speech recognition (speech -> text)


def asr_forward(p: ComponentParams, x, y, cfg: ModelConfig):
    """Teacher-forced cross-entropy; returns (scalar loss, logits array)."""
    xb, yb = _as_speech_batch(x), _as_text_batch(y)
    states = encode_speech(p, xb, cfg)
    logits = text_decoder_forward(p, "dec", states, _mask_bias(xb.mask), yb, cfg, diag=True)
    loss = cross_entropy_loss(logits, yb.targets, yb.mask)
    return loss, logits.data


def asr_decode(p: ComponentParams, x: SpeechSeq, cfg: ModelConfig, beam: int | None = None) -> TextSeq:
    if len(x) == 0:
        raise ContractViolation("asr_decode: empty speech input")
    beam = cfg.beam if beam is None else beam
    xb = make_speech_batch([x])
    states = encode_speech(p, xb, cfg).data[0]
    return _decode_single(p, "dec", states, beam, cfg, diag=True)


# ---------------------------------------------------------------------------
# image captioning (image -> text)


def ic_forward(p: ComponentParams, z, y, cfg: ModelConfig):
    zb, yb = _as_image_batch(z), _as_text_batch(y)
    states = encode_image(p, zb, cfg)
    bias = image_salience_bias(zb.pixels, cfg)
    logits = text_decoder_forward(p, "dec", states, bias, yb, cfg)
    loss = cross_entropy_loss(logits, yb.targets, yb.mask)
    return loss, logits.data


def ic_decode(p: ComponentParams, z: Image, cfg: ModelConfig, beam: int | None = None) -> TextSeq:
    beam = cfg.beam if beam is None else beam
    zb = make_image_batch([z])
    states = encode_image(p, zb, cfg).data[0]
    bias = image_salience_bias(zb.pixels, cfg)[0]
    return _decode_single(p, "dec", states, beam, cfg, score_bias=bias)


# ---------------------------------------------------------------------------
# dual-decoder speech/image -> text


def imgsp2txt_forward(p: ComponentParams, x, z, y, cfg: ModelConfig):
    """Fused dual-decoder loss.

    With both modalities the per-step distributions are averaged and the
    loss is the NLL of that mixture (or the mean of the per-decoder
    cross-entropies under the ``per_decoder`` variant).  With one modality
    the computation is exactly the single-decoder cross-entropy.
    """
    if x is None and z is None:
        raise ContractViolation("imgsp2txt_forward: need speech and/or image")
    yb = _as_text_batch(y)
    logits_x = logits_z = None
    if x is not None:
        xb = _as_speech_batch(x)
        sp_states = encode_speech(p, xb, cfg)
        logits_x = text_decoder_forward(
            p, "decx", sp_states, _mask_bias(xb.mask), yb, cfg, diag=True
        )
    if z is not None:
        zb = _as_image_batch(z)
        im_states = encode_image(p, zb, cfg)
        bias = image_salience_bias(zb.pixels, cfg)
        logits_z = text_decoder_forward(p, "decz", im_states, bias, yb, cfg)

    if logits_x is None:
        loss = cross_entropy_loss(logits_z, yb.targets, yb.mask)
        pz = _np_softmax(logits_z.data)
        return loss, DualDecoderOutput(p_x=None, p_z=pz, fused=pz)
    if logits_z is None:
        loss = cross_entropy_loss(logits_x, yb.targets, yb.mask)
        px = _np_softmax(logits_x.data)
        return loss, DualDecoderOutput(p_x=px, p_z=None, fused=px)

    px_t = softmax(logits_x)
    pz_t = softmax(logits_z)
    fused_t = mul(px_t + pz_t, 0.5)
    if cfg.fused_loss_variant == "mixture":
        loss = nll_of_probs_loss(fused_t, yb.targets, yb.mask)
    elif cfg.fused_loss_variant == "per_decoder":
        loss = mul(
            cross_entropy_loss(logits_x, yb.targets, yb.mask)
            + cross_entropy_loss(logits_z, yb.targets, yb.mask),
            0.5,
        )
    else:
        raise ContractViolation(f"unknown fused_loss_variant {cfg.fused_loss_variant!r}")
    return loss, DualDecoderOutput(p_x=px_t.data, p_z=pz_t.data, fused=fused_t.data)


def imgsp2txt_decode(
    p: ComponentParams, x, z, cfg: ModelConfig, beam: int | None = None
) -> TextSeq:
    if x is None and z is None:
        raise ContractViolation("imgsp2txt_decode: need speech and/or image")
    beam = cfg.beam if beam is None else beam
    if z is None:
        xb = make_speech_batch([x])
        states = encode_speech(p, xb, cfg).data[0]
        return _decode_single(p, "decx", states, beam, cfg, diag=True)
    if x is None:
        zb = make_image_batch([z])
        states = encode_image(p, zb, cfg).data[0]
        bias = image_salience_bias(zb.pixels, cfg)[0]
        return _decode_single(p, "decz", states, beam, cfg, score_bias=bias)

    xb = make_speech_batch([x])
    zb = make_image_batch([z])
    half_x = _DecoderHalf(
        p, "decx", encode_speech(p, xb, cfg).data[0], cfg.max_text_len, cfg, diag=True
    )
    half_z = _DecoderHalf(
        p,
        "decz",
        encode_image(p, zb, cfg).data[0],
        cfg.max_text_len,
        score_bias=image_salience_bias(zb.pixels, cfg)[0],
    )
    H = cfg.hidden

    def step(prev, states, t):
        sx = np.stack([s[0][0] for s in states])
        cx = np.stack([s[0][1] for s in states])
        sz = np.stack([s[1][0] for s in states])
        cz = np.stack([s[1][1] for s in states])
        lx, (sx_new, cx_new) = half_x.step(prev, (sx, cx), t)
        lz, (sz_new, cz_new) = half_z.step(prev, (sz, cz), t)
        fused = 0.5 * (_np_softmax(lx) + _np_softmax(lz))
        logp = np.log(np.maximum(fused, 1e-300))
        return logp, [
            ((sx_new[i], cx_new[i]), (sz_new[i], cz_new[i])) for i in range(len(prev))
        ]

    zero = (np.zeros(H), np.zeros(H))
    toks = beam_search(step, (zero, zero), beam, cfg.max_text_len, cfg.vocab)
    return TextSeq(tokens=np.asarray(toks, dtype=np.int64))


# ---------------------------------------------------------------------------
# text -> speech


def tts_forward(p: ComponentParams, y, spk: np.ndarray, x, cfg: ModelConfig) -> Tensor:
    """Teacher-forced frame MSE + stop BCE (+ zero-at-teacher-forcing length term)."""
    yb, xb = _as_text_batch(y), _as_speech_batch(x)
    B, T, F = xb.frames.shape
    states = encode_text(p, yb, cfg)
    proj = tanh(states @ p["tdec_attn"])
    bias = _mask_bias(yb.mask)
    spk_arr = np.asarray(spk, dtype=np.float64)
    if spk_arr.ndim == 1:
        spk_arr = np.tile(spk_arr, (B, 1))
    dec_in = np.concatenate(
        [
            np.tile(spk_arr[:, None, :], (1, T, 1)),
            np.tile(frame_pos_features(T)[None], (B, 1, 1)),
        ],
        axis=2,
    )

    s = Tensor(np.zeros((B, cfg.hidden)))
    ctx = Tensor(np.zeros((B, cfg.hidden)))
    diag = text_to_speech_diag_bias(
        T, yb.targets.shape[1], cfg.frames_per_char, cfg.attn_diag_strength
    )
    frame_outs, stop_outs = [], []
    for t in range(T):
        inp = concat([Tensor(dec_in[:, t]), ctx], axis=1)
        s = rnn_tanh_cell(inp, s, p["tdec_wx"], p["tdec_wh"], p["tdec_b"])
        ctx = attend(proj, s, bias + diag[t])
        frame_t = tanh(concat_affine(s, ctx, p["tdec_frame_w"], p["tdec_frame_b"]))
        stop_t = concat_affine(s, ctx, p["tdec_stop_w"], p["tdec_stop_b"])
        frame_outs.append(reshape(frame_t, (B, 1, F)))
        stop_outs.append(reshape(stop_t, (B, 1)))
    frames_pred = concat(frame_outs, axis=1)
    stops_pred = concat(stop_outs, axis=1)
    fmask = xb.mask
    loss = mse_loss(frames_pred, Tensor(xb.frames), fmask)
    loss = loss + bce_with_logits_loss(
        stops_pred, xb.stops, fmask, pos_weight=cfg.stop_pos_weight
    )
    # teacher forcing matches lengths; the term keeps train/eval conventions aligned
    length_penalty = abs(T - T) / max(T, 1)
    if length_penalty:
        loss = loss + length_penalty
    return loss


def tts_decode(p: ComponentParams, y: TextSeq, spk: np.ndarray, cfg: ModelConfig) -> SpeechSeq:
    """Autoregressive frame generation until stop probability > 0.5 or cap."""
    if len(y) == 0:
        raise ContractViolation("tts_decode: empty text")
    yb = make_text_batch([y])
    states = encode_text(p, yb, cfg).data[0]
    proj = _np_tanh_proj(states, p["tdec_attn"].data)
    wx, wh, b = p["tdec_wx"].data, p["tdec_wh"].data, p["tdec_b"].data
    fw, fb = p["tdec_frame_w"].data, p["tdec_frame_b"].data
    sw, sb = p["tdec_stop_w"].data, p["tdec_stop_b"].data
    spk_arr = np.asarray(spk, dtype=np.float64)
    s = np.zeros(cfg.hidden)
    ctx = np.zeros(cfg.hidden)
    pe = frame_pos_features(cfg.max_frames)
    diag = text_to_speech_diag_bias(
        cfg.max_frames, len(y), cfg.frames_per_char, cfg.attn_diag_strength
    )
    frames = []
    for t in range(cfg.max_frames):
        inp = np.concatenate([spk_arr, pe[t], ctx])
        s = np.tanh(inp @ wx + s @ wh + b)
        scores = proj @ s + diag[t]
        alpha = _np_softmax(scores)
        ctx = alpha @ proj
        sc = np.concatenate([s, ctx])
        frame = np.tanh(sc @ fw + fb)
        stop_logit = float((sc @ sw + sb)[0])
        frames.append(frame)
        if 1.0 / (1.0 + np.exp(-stop_logit)) > 0.5:
            break
    out = np.stack(frames)
    stops = np.zeros(out.shape[0], dtype=bool)
    stops[-1] = True
    return SpeechSeq(frames=out, stop_flags=stops, speaker=None)


# ---------------------------------------------------------------------------
# text -> image


def ig_generate(p: ComponentParams, y, cfg: ModelConfig) -> Tensor:
    """Sigmoid pixel tensor (B, H, W, C); differentiable when taped.

    The upsampler factors into a softmax placement over the patch grid and a
    sigmoid within-patch pattern; their product stays in [0, 1] and places
    one pattern on an empty canvas.
    """
    yb = _as_text_batch(y)
    B = yb.targets.shape[0]
    states = encode_text(p, yb, cfg)
    query = Tensor(np.zeros((B, 2 * cfg.hidden))) + reshape(p["pool_q"], (1, 2 * cfg.hidden))
    code = attend(states, query, _mask_bias(yb.mask))
    h1 = relu(affine(code, p["gen_w1"], p["gen_b1"]))
    # gain on the placement logits pushes generations toward one crisp cell
    where = softmax(mul(affine(h1, p["gen_where_w"], p["gen_where_b"]), 4.0))  # (B, P)
    what = sigmoid(affine(h1, p["gen_what_w"], p["gen_what_b"]))  # (B, pp)
    P, pp = cfg.patch_count, cfg.patch_pixels
    cells = matmul(reshape(where, (B, P, 1)), reshape(what, (B, 1, pp)))
    g = cfg.image_size // cfg.patch
    grid = reshape(cells, (B, g, g, cfg.patch, cfg.patch, cfg.image_channels))
    canvas = transpose(grid, (0, 1, 3, 2, 4, 5))
    return reshape(canvas, (B, cfg.image_size, cfg.image_size, cfg.image_channels))


def ig_loss(z, z_hat) -> Tensor:
    """Reconstruction loss between a target image and generated pixels."""
    target = z.pixels if isinstance(z, Image) else np.asarray(z)
    pred = z_hat
    if pred.data.ndim == target.ndim + 1 and pred.data.shape[0] == 1:
        pred = slice_(pred, 0)
    return mse_loss(pred, Tensor(target))


# ---------------------------------------------------------------------------
# speaker embedder


def _pool_frames(x: SpeechSeq) -> np.ndarray:
    if len(x) == 0:
        raise ContractViolation("spk_embed: empty speech input")
    return x.frames.mean(axis=0)


def spk_embed(p: ComponentParams, x: SpeechSeq) -> np.ndarray:
    """One-shot speaker embedding: mean-pooled frames -> affine -> tanh."""
    pooled = _pool_frames(x)
    return np.tanh(pooled @ p["se_w"].data + p["se_b"].data)


def spk_classify_loss(p: ComponentParams, xs: list[SpeechSeq], speaker_ids) -> Tensor:
    """Speaker-id cross-entropy used to pretrain the embedder."""
    pooled = np.stack([_pool_frames(x) for x in xs])
    ids = np.asarray(speaker_ids, dtype=np.int64)
    emb = tanh(affine(Tensor(pooled), p["se_w"], p["se_b"]))
    logits = affine(emb, p["se_cls_w"], p["se_cls_b"])
    return cross_entropy_loss(logits, ids)


# ---------------------------------------------------------------------------
# adversarial extra for the image generator (off by default)


def disc_logits(p: ComponentParams, pixels, cfg: ModelConfig) -> Tensor:
    flat = (
        reshape(pixels, (pixels.data.shape[0], cfg.n_pixels))
        if isinstance(pixels, Tensor)
        else Tensor(np.asarray(pixels).reshape(-1, cfg.n_pixels))
    )
    h = tanh(affine(flat, p["d_w1"], p["d_b1"]))
    return affine(h, p["d_w2"], p["d_b2"])
