"""Training protocols: supervised steps, the dual-loop and single-loop chain
steps, the single-modality composite step, the label-propagation baseline,
and the four-stage schedule with per-stage dev evaluation.

Parameter isolation is structural: each step builds its loss on a fresh
tape, zeroes only the target component's grads, and steps only that
component's optimizer.  Pseudo-labels and generated modalities are produced
by tape-free decoding, so no gradient can cross a decode.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics as met
from . import models as mdl
from .errors import ContractViolation
from .tensor import Tape, Tensor, backward, bce_with_logits_loss, mse_loss, mul, zero_grad
from .optim import AdamState, adam_step
from .world import Image, MultimodalExample, PartitionedDataset, TextSeq

STAGES = (
    "supervised-paired",
    "chain-unpaired-multimodal",
    "chain-speech-only",
    "chain-image-only",
)

MODE_COMPONENTS = {
    "mmc1": ("asr", "ic", "tts", "ig", "spkembed"),
    "mmc2": ("imgsp2txt", "tts", "ig", "spkembed"),
    "labelprop": mdl.COMPONENT_KINDS,
    "supervised-topline": mdl.COMPONENT_KINDS,
}

_COMPONENT_LR_KEY = {
    "asr": "lr_asr",
    "ic": "lr_ic",
    "imgsp2txt": "lr_imgsp2txt",
    "tts": "lr_tts",
    "ig": "lr_ig",
    "spkembed": "lr_spkembed",
    "ig_disc": "lr_ig",
}


_DEFAULT_STAGE1_EPOCHS = {
    "asr": 45,
    "ic": 180,
    "imgsp2txt": 200,
    "tts": 150,
    "ig": 200,
    "spkembed": 60,
}

# roughly the same optimizer-step budget on the 7.5x larger all-paired set
_DEFAULT_TOPLINE_EPOCHS = {
    "asr": 16,
    "ic": 40,
    "imgsp2txt": 45,
    "tts": 25,
    "ig": 40,
    "spkembed": 10,
}


@dataclass
class ChainConfig:
    mode: str = "mmc2"
    beam: int = 3
    batch_size: int = 8
    supervised_epochs: dict = field(default_factory=lambda: dict(_DEFAULT_STAGE1_EPOCHS))
    unpaired_epochs: int = 10
    speech_only_epochs: int = 2
    image_only_epochs: int = 3
    lp_retrain_epochs: int = 3
    topline_epochs: dict = field(default_factory=lambda: dict(_DEFAULT_TOPLINE_EPOCHS))
    lr_asr: float = 1e-4
    lr_ic: float = 1e-4
    lr_imgsp2txt: float = 1e-4
    lr_tts: float = 2.5e-4
    lr_ig: float = 2e-4
    lr_spkembed: float = 1e-3
    fused_loss_variant: str = "mixture"
    lambda_adv: float = 0.0

    def validate(self) -> None:
        if self.mode not in ("mmc1", "mmc2"):
            raise ContractViolation(f"chain mode must be mmc1 or mmc2, got {self.mode!r}")
        if self.beam < 1:
            raise ContractViolation("beam must be >= 1")
        for k in _COMPONENT_LR_KEY.values():
            if getattr(self, k) <= 0:
                raise ContractViolation(f"{k} must be > 0")
        for table_name in ("supervised_epochs", "topline_epochs"):
            table = getattr(self, table_name)
            unknown = set(table) - set(mdl.COMPONENT_KINDS)
            if unknown:
                raise ContractViolation(f"{table_name}: unknown components {sorted(unknown)}")

    def lr_for(self, kind: str) -> float:
        return getattr(self, _COMPONENT_LR_KEY[kind])

    def stage1_epochs_for(self, kind: str) -> int:
        return int(self.supervised_epochs.get(kind, _DEFAULT_STAGE1_EPOCHS[kind]))

    def topline_epochs_for(self, kind: str) -> int:
        return int(self.topline_epochs.get(kind, _DEFAULT_TOPLINE_EPOCHS[kind]))


@dataclass
class ChainState:
    params: dict[str, mdl.ComponentParams]
    optims: dict[str, AdamState]
    default_spk: np.ndarray | None = None

    def digests(self) -> dict[str, str]:
        return {k: mdl.params_digest(p) for k, p in self.params.items()}


def init_state(ccfg: ChainConfig, mcfg: mdl.ModelConfig, seed: int, kinds) -> ChainState:
    params = {k: mdl.init_component(k, mcfg, seed) for k in kinds}
    optims = {k: AdamState(lr=ccfg.lr_for(k)) for k in kinds}
    if ccfg.lambda_adv > 0 and "ig" in params:
        params["ig_disc"] = mdl.init_component("ig_disc", mcfg, seed)
        optims["ig_disc"] = AdamState(lr=ccfg.lr_for("ig_disc"))
    return ChainState(params=params, optims=optims)


def _apply(state: ChainState, kind: str, loss_builder) -> float:
    """zero-grad, forward on a fresh tape, backward, Adam; one component."""
    p = state.params[kind]
    zero_grad(p.tensors)
    with Tape() as tape:
        loss = loss_builder()
    backward(loss, tape)
    adam_step(p.tensors, state.optims[kind])
    return float(loss.data)


# ---------------------------------------------------------------------------
# supervised training


def supervised_step(
    state: ChainState,
    kind: str,
    batch: list[MultimodalExample],
    mcfg: mdl.ModelConfig,
    ccfg: ChainConfig,
) -> float:
    """One supervised Adam step for one component on a paired batch."""
    if not batch:
        raise ContractViolation("supervised_step: empty batch")
    p = state.params[kind]
    if kind == "asr":
        _need(batch, "x", "y")
        xb = mdl.make_speech_batch([ex.x for ex in batch])
        yb = mdl.make_text_batch([ex.y for ex in batch])
        return _apply(state, kind, lambda: mdl.asr_forward(p, xb, yb, mcfg)[0])
    if kind == "ic":
        _need(batch, "z", "y")
        zb = mdl.make_image_batch([ex.z for ex in batch])
        yb = mdl.make_text_batch([ex.y for ex in batch])
        return _apply(state, kind, lambda: mdl.ic_forward(p, zb, yb, mcfg)[0])
    if kind == "imgsp2txt":
        yb = mdl.make_text_batch([ex.y for ex in batch])
        has_x = all(ex.x is not None for ex in batch)
        has_z = all(ex.z is not None for ex in batch)
        if not (has_x or has_z):
            raise ContractViolation("imgsp2txt batch needs speech and/or image")
        xb = mdl.make_speech_batch([ex.x for ex in batch]) if has_x else None
        zb = mdl.make_image_batch([ex.z for ex in batch]) if has_z else None
        if has_x and has_z:
            # rotate fused / single-branch steps so the confident branch
            # cannot starve the other of mixture-loss gradient; the image
            # branch learns slowest and gets half the steps
            phase = state.optims[kind].t % 6
            if phase in (1, 3, 5):
                xb = None
            elif phase == 2:
                zb = None
        return _apply(state, kind, lambda: mdl.imgsp2txt_forward(p, xb, zb, yb, mcfg)[0])
    if kind == "tts":
        _need(batch, "x", "y")
        xb = mdl.make_speech_batch([ex.x for ex in batch])
        yb = mdl.make_text_batch([ex.y for ex in batch])
        spk = np.stack(
            [mdl.spk_embed(state.params["spkembed"], ex.x) for ex in batch]
        )
        return _apply(state, kind, lambda: mdl.tts_forward(p, yb, spk, xb, mcfg))
    if kind == "ig":
        _need(batch, "z", "y")
        yb = mdl.make_text_batch([ex.y for ex in batch])
        target = np.stack([ex.z.pixels for ex in batch])
        loss = _apply(
            state,
            kind,
            lambda: _ig_supervised_loss(state, p, yb, target, mcfg, ccfg),
        )
        if ccfg.lambda_adv > 0:
            _disc_step(state, yb, target, mcfg)
        return loss
    if kind == "spkembed":
        _need(batch, "x")
        if any(ex.speaker is None for ex in batch):
            raise ContractViolation("spkembed batch needs speaker ids")
        xs = [ex.x for ex in batch]
        ids = [ex.speaker for ex in batch]
        return _apply(state, kind, lambda: mdl.spk_classify_loss(p, xs, ids))
    raise ContractViolation(f"unknown component {kind!r}")


def _ig_supervised_loss(state, p, yb, target, mcfg, ccfg):
    pred = mdl.ig_generate(p, yb, mcfg)
    loss = mse_loss(pred, Tensor(target))
    if ccfg.lambda_adv > 0:
        d = state.params["ig_disc"]
        logits = mdl.disc_logits(d, pred, mcfg)
        adv = bce_with_logits_loss(logits, np.ones_like(logits.data))
        loss = loss + mul(adv, ccfg.lambda_adv)
    return loss


def _disc_step(state, yb, real_pixels, mcfg):
    fake = mdl.ig_generate(state.params["ig"], yb, mcfg).data  # constant for D

    def build():
        d = state.params["ig_disc"]
        lr_ = mdl.disc_logits(d, Tensor(real_pixels), mcfg)
        lf = mdl.disc_logits(d, Tensor(fake), mcfg)
        return bce_with_logits_loss(lr_, np.ones_like(lr_.data)) + bce_with_logits_loss(
            lf, np.zeros_like(lf.data)
        )

    _apply(state, "ig_disc", build)


def _need(batch, *fields) -> None:
    for ex in batch:
        for f in fields:
            if getattr(ex, f) is None:
                raise ContractViolation(f"batch example missing modality {f!r}")


def _component_stream(seed: int, stage_idx: int, kind: str):
    return np.random.default_rng(
        np.random.SeedSequence([51, seed, stage_idx, mdl._kind_index(kind)])
    )


def train_supervised(
    state: ChainState,
    kinds,
    examples: list[MultimodalExample],
    epochs,
    mcfg: mdl.ModelConfig,
    ccfg: ChainConfig,
    seed: int,
    stage_idx: int = 0,
) -> dict[str, float]:
    """Independent supervised training of each component on paired examples.

    ``epochs`` is an int applied to every kind, or a per-kind mapping.  Every
    component consumes its own seed stream, so the trajectory of any one
    component does not depend on which other components are trained.
    """
    losses = {}
    for kind in kinds:
        n_epochs = epochs[kind] if isinstance(epochs, dict) else epochs
        rng = _component_stream(seed, stage_idx, kind)
        last = float("nan")
        for _ in range(n_epochs):
            order = rng.permutation(len(examples))
            for lo in range(0, len(order), ccfg.batch_size):
                batch = [examples[i] for i in order[lo : lo + ccfg.batch_size]]
                last = supervised_step(state, kind, batch, mcfg, ccfg)
        losses[kind] = last
    return losses


def compute_default_speaker(
    state: ChainState, paired: list[MultimodalExample]
) -> np.ndarray:
    """Designated speaker embedding for text-only synthesis.

    Mean of per-speaker mean embeddings over the paired training utterances.
    """
    by_speaker: dict[int, list[np.ndarray]] = {}
    for ex in paired:
        if ex.x is None or ex.speaker is None:
            continue
        by_speaker.setdefault(ex.speaker, []).append(
            mdl.spk_embed(state.params["spkembed"], ex.x)
        )
    if not by_speaker:
        raise ContractViolation("no paired utterances to derive a default speaker")
    means = [np.mean(v, axis=0) for _, v in sorted(by_speaker.items())]
    return np.mean(means, axis=0)


# ---------------------------------------------------------------------------
# unrolled chain steps


def mmc2_sp_img_to_text_step(x, z, state: ChainState, mcfg, ccfg) -> tuple[TextSeq, dict]:
    """Speech/image -> pseudo-text; update the generators that have targets.

    The decoded pseudo-label is fixed (tape-free decode).  With speech
    present the speech synthesizer is teacher-forced on the pseudo-label
    against the real frames; with an image present the image generator is
    fit to the real image.  The transcriber itself is never touched here.
    """
    if x is None and z is None:
        raise ContractViolation("sp/img-to-text step needs at least one modality")
    y_hat = mdl.imgsp2txt_decode(state.params["imgsp2txt"], x, z, mcfg, beam=ccfg.beam)
    losses = {}
    if x is not None:
        spk = mdl.spk_embed(state.params["spkembed"], x)
        losses["tts"] = _apply(
            state, "tts",
            lambda: mdl.tts_forward(state.params["tts"], y_hat, spk, x, mcfg),
        )
    if z is not None:
        losses["ig"] = _apply(
            state, "ig",
            lambda: mdl.ig_loss(z, mdl.ig_generate(state.params["ig"], y_hat, mcfg)),
        )
    return y_hat, losses


def mmc2_text_to_sp_img_step(y: TextSeq, state: ChainState, mcfg, ccfg):
    """Text -> generated speech+image -> transcriber reconstruction update."""
    if y is None or len(y) == 0:
        raise ContractViolation("text-to-sp/img step needs text")
    if state.default_spk is None:
        raise ContractViolation("default speaker embedding not initialized")
    x_hat = mdl.tts_decode(state.params["tts"], y, state.default_spk, mcfg)
    z_hat = Image(pixels=mdl.ig_generate(state.params["ig"], y, mcfg).data[0])
    loss = _apply(
        state, "imgsp2txt",
        lambda: mdl.imgsp2txt_forward(state.params["imgsp2txt"], x_hat, z_hat, y, mcfg)[0],
    )
    return x_hat, z_hat, loss


def mmc1_speech_chain_step(direction: str, datum, state: ChainState, mcfg, ccfg) -> dict:
    """Speech chain: recognizer and synthesizer supervise each other."""
    if direction == "speech-only":
        x = datum
        y_hat = mdl.asr_decode(state.params["asr"], x, mcfg, beam=ccfg.beam)
        spk = mdl.spk_embed(state.params["spkembed"], x)
        loss = _apply(
            state, "tts",
            lambda: mdl.tts_forward(state.params["tts"], y_hat, spk, x, mcfg),
        )
        return {"tts": loss}
    if direction == "text-only":
        y = datum
        if state.default_spk is None:
            raise ContractViolation("default speaker embedding not initialized")
        x_hat = mdl.tts_decode(state.params["tts"], y, state.default_spk, mcfg)
        loss = _apply(
            state, "asr",
            lambda: mdl.asr_forward(state.params["asr"], x_hat, y, mcfg)[0],
        )
        return {"asr": loss}
    raise ContractViolation(f"unknown speech-chain direction {direction!r}")


def mmc1_visual_chain_step(direction: str, datum, state: ChainState, mcfg, ccfg) -> dict:
    """Visual chain: captioner and image generator supervise each other."""
    if direction == "image-only":
        z = datum
        y_hat = mdl.ic_decode(state.params["ic"], z, mcfg, beam=ccfg.beam)
        loss = _apply(
            state, "ig",
            lambda: mdl.ig_loss(z, mdl.ig_generate(state.params["ig"], y_hat, mcfg)),
        )
        return {"ig": loss}
    if direction == "text-only":
        y = datum
        z_hat = Image(pixels=mdl.ig_generate(state.params["ig"], y, mcfg).data[0])
        loss = _apply(
            state, "ic",
            lambda: mdl.ic_forward(state.params["ic"], z_hat, y, mcfg)[0],
        )
        return {"ic": loss}
    raise ContractViolation(f"unknown visual-chain direction {direction!r}")


def single_modality_composite_step(
    datum: MultimodalExample, mode: str, state: ChainState, mcfg, ccfg
) -> dict:
    """Both unrolled processes on one single-modality datum.

    Phase 1 transcribes to a pseudo-label and updates the generator whose
    ground truth exists; phase 2 feeds the same pseudo-label (no re-decode)
    through the text-to-speech/image process to update the text-direction
    models.
    """
    has_x, has_z = datum.x is not None, datum.z is not None
    if has_x == has_z:
        raise ContractViolation("composite step needs exactly one of speech or image")
    losses: dict[str, float] = {}
    if mode == "mmc2":
        if has_x:
            y_hat = mdl.imgsp2txt_decode(state.params["imgsp2txt"], datum.x, None, mcfg, beam=ccfg.beam)
            spk = mdl.spk_embed(state.params["spkembed"], datum.x)
            losses["tts"] = _apply(
                state, "tts",
                lambda: mdl.tts_forward(state.params["tts"], y_hat, spk, datum.x, mcfg),
            )
        else:
            y_hat = mdl.imgsp2txt_decode(state.params["imgsp2txt"], None, datum.z, mcfg, beam=ccfg.beam)
            losses["ig"] = _apply(
                state, "ig",
                lambda: mdl.ig_loss(datum.z, mdl.ig_generate(state.params["ig"], y_hat, mcfg)),
            )
        x_hat = mdl.tts_decode(state.params["tts"], y_hat, state.default_spk, mcfg)
        z_hat = Image(pixels=mdl.ig_generate(state.params["ig"], y_hat, mcfg).data[0])
        losses["imgsp2txt"] = _apply(
            state, "imgsp2txt",
            lambda: mdl.imgsp2txt_forward(state.params["imgsp2txt"], x_hat, z_hat, y_hat, mcfg)[0],
        )
        return losses
    if mode == "mmc1":
        if has_x:
            y_hat = mdl.asr_decode(state.params["asr"], datum.x, mcfg, beam=ccfg.beam)
            spk = mdl.spk_embed(state.params["spkembed"], datum.x)
            losses["tts"] = _apply(
                state, "tts",
                lambda: mdl.tts_forward(state.params["tts"], y_hat, spk, datum.x, mcfg),
            )
        else:
            y_hat = mdl.ic_decode(state.params["ic"], datum.z, mcfg, beam=ccfg.beam)
            losses["ig"] = _apply(
                state, "ig",
                lambda: mdl.ig_loss(datum.z, mdl.ig_generate(state.params["ig"], y_hat, mcfg)),
            )
        x_hat = mdl.tts_decode(state.params["tts"], y_hat, state.default_spk, mcfg)
        losses["asr"] = _apply(
            state, "asr",
            lambda: mdl.asr_forward(state.params["asr"], x_hat, y_hat, mcfg)[0],
        )
        z_gen = Image(pixels=mdl.ig_generate(state.params["ig"], y_hat, mcfg).data[0])
        losses["ic"] = _apply(
            state, "ic",
            lambda: mdl.ic_forward(state.params["ic"], z_gen, y_hat, mcfg)[0],
        )
        return losses
    raise ContractViolation(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# chain stages


def _stage_stream(seed: int, stage_idx: int):
    return np.random.default_rng(np.random.SeedSequence([52, seed, stage_idx]))


def run_unpaired_multimodal_stage(
    state: ChainState, ds: PartitionedDataset, mode: str, epochs: int, mcfg, ccfg, seed: int
) -> int:
    """Stage 2: each unpaired modality list drives its unrolled process."""
    items = (
        [("x", ex) for ex in ds.unpaired_speech]
        + [("y", ex) for ex in ds.unpaired_text]
        + [("z", ex) for ex in ds.unpaired_image]
    )
    rng = _stage_stream(seed, 1)
    steps = 0
    for _ in range(epochs):
        for i in rng.permutation(len(items)):
            tag, ex = items[i]
            if mode == "mmc2":
                if tag == "x":
                    mmc2_sp_img_to_text_step(ex.x, None, state, mcfg, ccfg)
                elif tag == "z":
                    mmc2_sp_img_to_text_step(None, ex.z, state, mcfg, ccfg)
                else:
                    mmc2_text_to_sp_img_step(ex.y, state, mcfg, ccfg)
            else:
                if tag == "x":
                    mmc1_speech_chain_step("speech-only", ex.x, state, mcfg, ccfg)
                elif tag == "z":
                    mmc1_visual_chain_step("image-only", ex.z, state, mcfg, ccfg)
                else:
                    mmc1_speech_chain_step("text-only", ex.y, state, mcfg, ccfg)
                    mmc1_visual_chain_step("text-only", ex.y, state, mcfg, ccfg)
            steps += 1
    return steps


def run_single_modality_stage(
    state: ChainState,
    examples: list[MultimodalExample],
    mode: str,
    epochs: int,
    mcfg,
    ccfg,
    seed: int,
    stage_idx: int,
) -> int:
    rng = _stage_stream(seed, stage_idx)
    steps = 0
    for _ in range(epochs):
        for i in rng.permutation(len(examples)):
            single_modality_composite_step(examples[i], mode, state, mcfg, ccfg)
            steps += 1
    return steps


# ---------------------------------------------------------------------------
# label propagation baseline


@dataclass
class PseudoPairs:
    """Component-wise supervised items produced by filling in modalities.

    Generators (speech and image synthesis) only receive items whose target
    modality is real; text-target models also self-train on real inputs.
    """

    asr: list[tuple] = field(default_factory=list)  # (SpeechSeq, TextSeq)
    ic: list[tuple] = field(default_factory=list)  # (Image, TextSeq)
    imgsp2txt: list[tuple] = field(default_factory=list)  # (x|None, z|None, TextSeq)
    tts: list[tuple] = field(default_factory=list)  # (TextSeq, real SpeechSeq)
    ig: list[tuple] = field(default_factory=list)  # (TextSeq, real Image)
    count: int = 0


def generate_pseudo_pairs(
    state: ChainState, examples: list[MultimodalExample], mcfg, ccfg
) -> PseudoPairs:
    """Fill in missing modalities with the current models (one pass).

    A component receives a pseudo-pair only when its target side is real,
    or, for the text-target models, when the input side is real
    (self-training); generators are never fit to generated targets.
    """
    out = PseudoPairs()
    for ex in examples:
        if ex.y is not None and ex.x is None and ex.z is None:
            x_hat = mdl.tts_decode(state.params["tts"], ex.y, state.default_spk, mcfg)
            z_hat = Image(pixels=mdl.ig_generate(state.params["ig"], ex.y, mcfg).data[0])
            out.asr.append((x_hat, ex.y))
            out.ic.append((z_hat, ex.y))
            out.imgsp2txt.append((x_hat, z_hat, ex.y))
            out.count += 1
        elif ex.x is not None and ex.y is None:
            y_hat = mdl.asr_decode(state.params["asr"], ex.x, mcfg, beam=ccfg.beam) \
                if "asr" in state.params else \
                mdl.imgsp2txt_decode(state.params["imgsp2txt"], ex.x, None, mcfg, beam=ccfg.beam)
            out.asr.append((ex.x, y_hat))
            out.tts.append((y_hat, ex.x))
            out.imgsp2txt.append((ex.x, None, y_hat))
            out.count += 1
        elif ex.z is not None and ex.y is None:
            y_hat = mdl.ic_decode(state.params["ic"], ex.z, mcfg, beam=ccfg.beam) \
                if "ic" in state.params else \
                mdl.imgsp2txt_decode(state.params["imgsp2txt"], None, ex.z, mcfg, beam=ccfg.beam)
            out.ic.append((ex.z, y_hat))
            out.ig.append((y_hat, ex.z))
            out.imgsp2txt.append((None, ex.z, y_hat))
            out.count += 1
    return out


def _lp_items_from_paired(paired: list[MultimodalExample]) -> PseudoPairs:
    base = PseudoPairs()
    for ex in paired:
        base.asr.append((ex.x, ex.y))
        base.ic.append((ex.z, ex.y))
        base.imgsp2txt.append((ex.x, ex.z, ex.y))
        base.tts.append((ex.y, ex.x))
        base.ig.append((ex.y, ex.z))
    return base


def lp_retrain(
    state: ChainState,
    pool: PseudoPairs,
    epochs: int,
    mcfg,
    ccfg,
    seed: int,
    stage_idx: int,
) -> None:
    """Supervised retraining of every component on paired + pseudo pairs.

    Items are wrapped as examples and routed through ``supervised_step``, so
    with an empty pseudo set this is exactly continued supervised training
    (the speaker embedder stays frozen after its stage-1 pretraining).
    """

    def as_examples(items, build):
        return [build(it) for it in items]

    tables = {
        "asr": as_examples(
            pool.asr, lambda it: MultimodalExample(x=it[0], y=it[1], scene_id=-1)
        ),
        "ic": as_examples(
            pool.ic, lambda it: MultimodalExample(z=it[0], y=it[1], scene_id=-1)
        ),
        "tts": as_examples(
            pool.tts, lambda it: MultimodalExample(x=it[1], y=it[0], scene_id=-1)
        ),
        "ig": as_examples(
            pool.ig, lambda it: MultimodalExample(z=it[1], y=it[0], scene_id=-1)
        ),
    }
    for kind, items in tables.items():
        if kind not in state.params or not items:
            continue
        rng = _component_stream(seed, stage_idx, kind)
        for _ in range(epochs):
            order = rng.permutation(len(items))
            for lo in range(0, len(order), ccfg.batch_size):
                batch = [items[i] for i in order[lo : lo + ccfg.batch_size]]
                supervised_step(state, kind, batch, mcfg, ccfg)

    if "imgsp2txt" not in state.params or not pool.imgsp2txt:
        return
    groups = {
        "xz": [it for it in pool.imgsp2txt if it[0] is not None and it[1] is not None],
        "x": [it for it in pool.imgsp2txt if it[0] is not None and it[1] is None],
        "z": [it for it in pool.imgsp2txt if it[0] is None and it[1] is not None],
    }
    rng = _component_stream(seed, stage_idx, "imgsp2txt")
    for _ in range(epochs):
        for name in ("xz", "x", "z"):
            items = groups[name]
            if not items:
                continue
            order = rng.permutation(len(items))
            for lo in range(0, len(order), ccfg.batch_size):
                batch = [
                    MultimodalExample(x=it[0], z=it[1], y=it[2], scene_id=-1)
                    for it in (items[i] for i in order[lo : lo + ccfg.batch_size])
                ]
                supervised_step(state, "imgsp2txt", batch, mcfg, ccfg)


def label_propagation_round(
    state: ChainState,
    base_pool: PseudoPairs,
    examples: list[MultimodalExample],
    mcfg,
    ccfg,
    seed: int,
    stage_idx: int,
) -> PseudoPairs:
    """One generate-then-retrain pass over ``examples``; returns new pairs."""
    pseudo = generate_pseudo_pairs(state, examples, mcfg, ccfg)
    merged = PseudoPairs(
        asr=base_pool.asr + pseudo.asr,
        ic=base_pool.ic + pseudo.ic,
        imgsp2txt=base_pool.imgsp2txt + pseudo.imgsp2txt,
        tts=base_pool.tts + pseudo.tts,
        ig=base_pool.ig + pseudo.ig,
        count=base_pool.count + pseudo.count,
    )
    lp_retrain(state, merged, ccfg.lp_retrain_epochs, mcfg, ccfg, seed, stage_idx)
    return merged


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class StageReport:
    stage: str
    mode: str
    values: dict[tuple[str, str], float]  # (component, metric) -> value
    seed: int
    config_hash: str
    wall_seconds: float = 0.0

    def rows(self) -> list[tuple]:
        return [
            (self.stage, self.mode, comp, metric, val, self.seed, self.config_hash)
            for (comp, metric), val in sorted(self.values.items())
        ]


@dataclass
class EvalContext:
    dev: list[MultimodalExample]
    scene_refs: dict[int, list[TextSeq]]
    scene_caption: dict[int, TextSeq]
    scene_image: dict[int, Image]
    classifier: met.WorldClassifier


def make_eval_context(ds: PartitionedDataset, split: str = "dev") -> EvalContext:
    examples = getattr(ds, split)
    world = ds.world
    scene_refs, scene_caption, scene_image = {}, {}, {}
    for ex in examples:
        if ex.scene_id in scene_refs:
            continue
        scene = world.scene_from_id(ex.scene_id)
        scene_refs[ex.scene_id] = world.all_captions_of(scene)
        scene_caption[ex.scene_id] = world.caption_of(scene)
        scene_image[ex.scene_id] = world.render_image(scene)
    # the IS classifier is a frozen artifact of the world itself (trained on
    # the full deterministic scene universe), so scores are comparable across
    # datasets and partition sizes
    universe = range(ds.world_cfg.scene_capacity)
    images = [world.render_image(world.scene_from_id(s)) for s in universe]
    labels = [world.scene_from_id(s).object_class for s in universe]
    clf = met.train_world_classifier(images, labels, num_classes=ds.world_cfg.num_classes)
    return EvalContext(
        dev=examples,
        scene_refs=scene_refs,
        scene_caption=scene_caption,
        scene_image=scene_image,
        classifier=clf,
    )


def evaluate(
    state: ChainState, ectx: EvalContext, mcfg, beam: int = 3
) -> dict[tuple[str, str], float]:
    """Dev metrics for every component present in the state."""
    vals: dict[tuple[str, str], float] = {}
    params = state.params
    if "asr" in params:
        pairs = [
            (mdl.asr_decode(params["asr"], ex.x, mcfg, beam=beam), ex.y)
            for ex in ectx.dev
            if ex.x is not None and ex.y is not None
        ]
        vals[("asr", "cer")] = met.corpus_cer(pairs)
        vals[("asr", "wer")] = met.corpus_wer(pairs)
    if "ic" in params:
        scores = [
            met.bleu4(mdl.ic_decode(params["ic"], img, mcfg, beam=beam), ectx.scene_refs[sid])
            for sid, img in sorted(ectx.scene_image.items())
        ]
        vals[("ic", "b4")] = float(np.mean(scores))
    if "imgsp2txt" in params:
        pairs = []
        scores = []
        for ex in ectx.dev:
            if ex.x is None or ex.z is None or ex.y is None:
                continue
            hyp = mdl.imgsp2txt_decode(params["imgsp2txt"], ex.x, ex.z, mcfg, beam=beam)
            pairs.append((hyp, ex.y))
            scores.append(met.bleu4(hyp, ectx.scene_refs[ex.scene_id]))
        vals[("imgsp2txt", "cer")] = met.corpus_cer(pairs)
        vals[("imgsp2txt", "wer")] = met.corpus_wer(pairs)
        vals[("imgsp2txt", "b4")] = float(np.mean(scores))
    if "tts" in params:
        errs = [
            met.l2sq_speech(
                ex.x,
                mdl.tts_decode(
                    params["tts"], ex.y, mdl.spk_embed(params["spkembed"], ex.x), mcfg
                ),
            )
            for ex in ectx.dev
            if ex.x is not None and ex.y is not None
        ]
        vals[("tts", "l2sq")] = float(np.mean(errs))
    if "ig" in params:
        images = [
            Image(pixels=mdl.ig_generate(params["ig"], cap, mcfg).data[0])
            for _, cap in sorted(ectx.scene_caption.items())
        ]
        vals[("ig", "is")] = met.inception_score(images, ectx.classifier, splits=2)
    return vals


# ---------------------------------------------------------------------------
# full schedules


def schedule_stages(ds: PartitionedDataset, mode: str, mcfg, ccfg, seed: int):
    """Ordered (stage_name, runner) list for a mode; runners mutate state.

    Each runner depends only on (state, dataset, config, seed), never on how
    earlier stages were executed, so a run can resume from any stage
    checkpoint bit-identically.
    """
    def stage0(state: ChainState) -> None:
        kinds = tuple(k for k in state.params if k in mdl.COMPONENT_KINDS)
        epochs = {k: ccfg.stage1_epochs_for(k) for k in kinds}
        train_supervised(state, kinds, ds.paired, epochs, mcfg, ccfg, seed, 0)
        state.default_spk = compute_default_speaker(state, ds.paired)

    if mode == "supervised-topline":

        def topline(state: ChainState) -> None:
            examples = make_topline_examples(ds)
            kinds = tuple(k for k in state.params if k in mdl.COMPONENT_KINDS)
            epochs = {k: ccfg.topline_epochs_for(k) for k in kinds}
            train_supervised(state, kinds, examples, epochs, mcfg, ccfg, seed, 0)
            state.default_spk = compute_default_speaker(state, examples)

        return [(STAGES[0], topline)]

    if mode in ("mmc1", "mmc2"):

        def stage1(state):
            run_unpaired_multimodal_stage(
                state, ds, mode, ccfg.unpaired_epochs, mcfg, ccfg, seed
            )

        def stage2(state):
            run_single_modality_stage(
                state, ds.speech_only, mode, ccfg.speech_only_epochs, mcfg, ccfg, seed, 2
            )

        def stage3(state):
            run_single_modality_stage(
                state, ds.image_only, mode, ccfg.image_only_epochs, mcfg, ccfg, seed, 3
            )

        return list(zip(STAGES, (stage0, stage1, stage2, stage3)))

    if mode == "labelprop":
        # pseudo data are regenerated cumulatively with the current models at
        # every stage, so a stage depends only on the incoming state
        def lp_stage(examples_fn, stage_idx):
            def run(state):
                pool = _lp_items_from_paired(ds.paired)
                pool = label_propagation_round(
                    state, pool, examples_fn(), mcfg, ccfg, seed, stage_idx
                )

            return run

        unpaired = lambda: ds.unpaired_speech + ds.unpaired_text + ds.unpaired_image
        with_speech = lambda: unpaired() + ds.speech_only
        with_image = lambda: with_speech() + ds.image_only
        return [
            (STAGES[0], stage0),
            (STAGES[1], lp_stage(unpaired, 1)),
            (STAGES[2], lp_stage(with_speech, 2)),
            (STAGES[3], lp_stage(with_image, 3)),
        ]

    raise ContractViolation(f"unknown training mode {mode!r}")


def train_schedule(
    ds: PartitionedDataset,
    mode: str,
    mcfg: mdl.ModelConfig,
    ccfg: ChainConfig,
    seed: int,
    ectx: EvalContext | None = None,
    config_hash: str = "",
    log=None,
    resume_state: ChainState | None = None,
    start_stage: int = 0,
    after_stage=None,
) -> tuple[ChainState, list[StageReport]]:
    """Run the full protocol for one mode and report dev metrics per stage.

    Modes: ``mmc1`` / ``mmc2`` (chain), ``labelprop`` (baseline over the same
    four stages), ``supervised-topline`` (all training scenes paired, one
    stage).  ``resume_state``/``start_stage`` continue an interrupted run
    from a stage boundary.
    """
    if mode not in MODE_COMPONENTS:
        raise ContractViolation(f"unknown training mode {mode!r}")
    if ectx is None:
        ectx = make_eval_context(ds)
    kinds = MODE_COMPONENTS[mode]
    state = resume_state if resume_state is not None else init_state(ccfg, mcfg, seed, kinds)
    reports: list[StageReport] = []
    stages = schedule_stages(ds, mode, mcfg, ccfg, seed)
    for idx, (name, runner) in enumerate(stages):
        if idx < start_stage:
            continue
        t0 = time.time()
        runner(state)
        vals = evaluate(state, ectx, mcfg, beam=ccfg.beam)
        report = StageReport(
            stage=name,
            mode=mode,
            values=vals,
            seed=seed,
            config_hash=config_hash,
            wall_seconds=time.time() - t0,
        )
        reports.append(report)
        if log:
            log(
                f"[{mode}] {name}: "
                + "  ".join(f"{c}.{m}={v:.3f}" for (c, m), v in sorted(vals.items()))
            )
        if after_stage is not None:
            after_stage(idx, name, state, report)
    return state, reports


def make_topline_examples(ds: PartitionedDataset) -> list[MultimodalExample]:
    """Fully paired examples over every training scene (the ceiling run)."""
    world = ds.world
    cfg = ds.world_cfg
    rng = np.random.default_rng(np.random.SeedSequence([13, ds.seed]))
    out = []
    for sid in sorted(ds.training_scene_ids()):
        scene = world.scene_from_id(sid)
        speakers = rng.choice(cfg.num_speakers, size=cfg.utterances_per_scene, replace=False)
        for k in range(cfg.utterances_per_scene):
            y = world.caption_of(scene, variant=k % cfg.captions_per_scene)
            x = world.synth_speech(y, int(speakers[k]), seed=int(rng.integers(2**31)))
            z = world.render_image(scene)
            out.append(
                MultimodalExample(
                    x=x, y=y, z=z, speaker=int(speakers[k]), scene_id=sid, pairing="paired"
                )
            )
    return out
