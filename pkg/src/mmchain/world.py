"""Deterministic synthetic multimodal world.

A Scene (object class, attribute, grid position) is the hidden ground truth
from which all three modalities derive: a templated character caption, a
frame sequence of per-character spectral patterns passed through a
per-speaker mixing transform, and a glyph-on-grid grayscale image.  The
corpus generator carves the scene space into pairwise-disjoint partitions
mirroring a paired / unpaired / speech-only / image-only split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DataError

# character inventory: specials + letters + space
PAD, SOS, EOS = 0, 1, 2
_LETTERS = "abcdefghijklmnopqrstuvwxyz"
CHARS = {c: i + 3 for i, c in enumerate(_LETTERS)}
CHARS[" "] = 3 + len(_LETTERS)
VOCAB_SIZE = 3 + len(_LETTERS) + 1  # 30
_ID_TO_CHAR = {i: c for c, i in CHARS.items()}

ATTR_WORDS = ["red", "wet", "old", "big", "shy", "icy", "raw", "tan"]
CLASS_WORDS = [
    "cat", "dog", "fox", "owl", "bug", "hen", "elk", "bat",
    "eel", "ant", "koi", "ram", "cod", "emu", "jay", "sow",
]
ROW_WORDS = ["top", "mid", "low", "end", "far", "off", "rim", "gap"]
COL_WORDS = ["ace", "bay", "cue", "dew", "elm", "fig", "gum", "hay"]

_CAPTION_TEMPLATES = [
    "{attr} {cls} at {row} {col}",
    "{cls} at {row} {col} is {attr}",
    "a {attr} {cls} at {row} {col}",
    "{attr} {cls} near {row} {col}",
    "the {attr} {cls} at {row} {col}",
]

_PATTERN_SEED = 1405
_STENCIL_SEED = 2718


def encode_text(text: str) -> np.ndarray:
    """Characters -> token ids, with a single trailing EOS."""
    try:
        ids = [CHARS[c] for c in text]
    except KeyError as e:
        raise ContractViolation(f"character {e.args[0]!r} not in vocabulary")
    return np.asarray(ids + [EOS], dtype=np.int64)


def decode_text(tokens) -> str:
    out = []
    for t in np.asarray(tokens).tolist():
        if t == EOS:
            break
        if t in (PAD, SOS):
            continue
        out.append(_ID_TO_CHAR[int(t)])
    return "".join(out)


@dataclass(frozen=True)
class Scene:
    object_class: int
    attribute: int
    position: int  # cell index on the G x G grid


@dataclass
class TextSeq:
    tokens: np.ndarray  # int64 ids, exactly one EOS at the end

    def __post_init__(self):
        toks = np.asarray(self.tokens, dtype=np.int64)
        if toks.size == 0 or toks[-1] != EOS or np.sum(toks == EOS) != 1:
            raise ContractViolation("TextSeq must end with exactly one EOS")
        if np.any(toks == PAD):
            raise ContractViolation("TextSeq must not contain PAD")
        self.tokens = toks

    @property
    def text(self) -> str:
        return decode_text(self.tokens)

    def __len__(self) -> int:
        return int(self.tokens.size)


@dataclass
class SpeechSeq:
    frames: np.ndarray  # (T, F) float64 in [-1, 1]
    stop_flags: np.ndarray  # (T,) bool, True exactly at the final frame
    speaker: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.stop_flags = np.asarray(self.stop_flags, dtype=bool)

    def __len__(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class Image:
    pixels: np.ndarray  # (H, W, C) float64 in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)


@dataclass
class SpeakerTransform:
    mix: np.ndarray  # (F, F), invertible
    offset: np.ndarray  # (F,)


@dataclass
class MultimodalExample:
    x: SpeechSeq | None = None
    y: TextSeq | None = None
    z: Image | None = None
    speaker: int | None = None
    scene_id: int = -1
    pairing: str = "paired"  # paired | unpaired | speech_only | image_only

    def __post_init__(self):
        if self.x is None and self.y is None and self.z is None:
            raise ContractViolation("example must carry at least one modality")


@dataclass
class WorldConfig:
    num_classes: int = 8
    num_attrs: int = 6
    grid: int = 4
    frame_dim: int = 8
    num_speakers: int = 8
    frames_per_char: int = 3
    noise_sigma: float = 0.02
    utterances_per_scene: int = 2
    captions_per_scene: int = 1
    image_size: int = 16
    image_channels: int = 1
    max_text_len: int = 24
    max_frames: int = 96

    def validate(self) -> None:
        if not (1 <= self.num_classes <= len(CLASS_WORDS)):
            raise ContractViolation(f"num_classes must be in [1, {len(CLASS_WORDS)}]")
        if not (1 <= self.num_attrs <= len(ATTR_WORDS)):
            raise ContractViolation(f"num_attrs must be in [1, {len(ATTR_WORDS)}]")
        if not (1 <= self.grid <= len(ROW_WORDS)):
            raise ContractViolation(f"grid must be in [1, {len(ROW_WORDS)}]")
        if self.image_size % self.grid != 0:
            raise ContractViolation("image_size must be divisible by grid")
        if self.utterances_per_scene > self.num_speakers:
            raise ContractViolation("utterances_per_scene exceeds speaker count")
        if self.captions_per_scene > len(_CAPTION_TEMPLATES):
            raise ContractViolation(
                f"captions_per_scene must be <= {len(_CAPTION_TEMPLATES)}"
            )

    @property
    def scene_capacity(self) -> int:
        return self.num_classes * self.num_attrs * self.grid * self.grid


def _char_pattern_table(frames_per_char: int, frame_dim: int) -> dict[int, np.ndarray]:
    """Canonical per-character frame patterns.

    Sign patterns (0.3 +/- 0.5 per element) with at least a third of the
    elements differing between any two characters, so nearest-neighbor
    readability survives speaker transforms, noise, and imperfect synthesis.
    """
    used = sorted(CHARS.values())
    n_el = frames_per_char * frame_dim
    min_hamming = max(2, n_el // 3)
    rng = np.random.default_rng(_PATTERN_SEED)
    rows: list[np.ndarray] = []
    while len(rows) < len(used):
        cand = rng.integers(0, 2, size=n_el).astype(np.float64) * 2.0 - 1.0
        if all(np.sum(cand != r) >= min_hamming for r in rows):
            rows.append(cand)
    return {
        c: (0.3 + 0.5 * rows[i]).reshape(frames_per_char, frame_dim)
        for i, c in enumerate(used)
    }


def _glyph_stencils(n: int) -> np.ndarray:
    """n distinct 4x4 binary stencils with pairwise Hamming distance >= 4."""
    rng = np.random.default_rng(_STENCIL_SEED)
    chosen: list[np.ndarray] = []
    while len(chosen) < n:
        cand = (rng.random((4, 4)) < 0.5).astype(np.float64)
        if cand.sum() < 4:
            continue
        if all(np.sum(cand != c) >= 4 for c in chosen):
            chosen.append(cand)
    return np.stack(chosen)


class World:
    """Holds the deterministic generative tables for one configuration."""

    def __init__(self, cfg: WorldConfig, speaker_seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.char_patterns = _char_pattern_table(cfg.frames_per_char, cfg.frame_dim)
        self.stencils = _glyph_stencils(cfg.num_classes)
        self.intensities = np.linspace(0.35, 1.0, cfg.num_attrs)
        self.speakers = self._make_speakers(speaker_seed)

    def _make_speakers(self, seed: int) -> list[SpeakerTransform]:
        rng = np.random.default_rng(np.random.SeedSequence([77, seed]))
        F = self.cfg.frame_dim
        speakers = []
        while len(speakers) < self.cfg.num_speakers:
            mix = np.eye(F) + 0.04 * rng.uniform(-1.0, 1.0, size=(F, F))
            if np.linalg.cond(mix) >= 100.0:
                continue
            offset = rng.uniform(-0.1, 0.1, size=F)
            speakers.append(SpeakerTransform(mix=mix, offset=offset))
        return speakers

    # -- scenes ------------------------------------------------------------

    def scene_from_id(self, scene_id: int) -> Scene:
        g2 = self.cfg.grid * self.cfg.grid
        pos = scene_id % g2
        rest = scene_id // g2
        attr = rest % self.cfg.num_attrs
        cls = rest // self.cfg.num_attrs
        return Scene(object_class=cls, attribute=attr, position=pos)

    def scene_id(self, scene: Scene) -> int:
        g2 = self.cfg.grid * self.cfg.grid
        return (scene.object_class * self.cfg.num_attrs + scene.attribute) * g2 + scene.position

    def _check_scene(self, scene: Scene) -> None:
        c = self.cfg
        ok = (
            0 <= scene.object_class < c.num_classes
            and 0 <= scene.attribute < c.num_attrs
            and 0 <= scene.position < c.grid * c.grid
        )
        if not ok:
            raise ContractViolation(f"scene out of range: {scene}")

    # -- modalities --------------------------------------------------------

    def caption_of(self, scene: Scene, variant: int = 0) -> TextSeq:
        self._check_scene(scene)
        row, col = divmod(scene.position, self.cfg.grid)
        text = _CAPTION_TEMPLATES[variant].format(
            attr=ATTR_WORDS[scene.attribute],
            cls=CLASS_WORDS[scene.object_class],
            row=ROW_WORDS[row],
            col=COL_WORDS[col],
        )
        seq = encode_text(text)
        if seq.size > self.cfg.max_text_len:
            raise ContractViolation(f"caption exceeds max_text_len: {text!r}")
        return TextSeq(tokens=seq)

    def synth_speech(
        self,
        y: TextSeq,
        speaker: int,
        seed: int,
        sigma: float | None = None,
    ) -> SpeechSeq:
        """Render a caption as per-character frame patterns for one speaker."""
        if not (0 <= speaker < len(self.speakers)):
            raise ContractViolation(f"speaker id {speaker} out of range")
        sigma = self.cfg.noise_sigma if sigma is None else sigma
        chars = [t for t in y.tokens.tolist() if t != EOS]
        canon = np.concatenate([self.char_patterns[c] for c in chars], axis=0)
        if canon.shape[0] > self.cfg.max_frames:
            raise DataError(
                f"utterance of {canon.shape[0]} frames exceeds max_frames={self.cfg.max_frames}"
            )
        tr = self.speakers[speaker]
        frames = canon @ tr.mix.T + tr.offset
        if sigma > 0:
            rng = np.random.default_rng(np.random.SeedSequence([104729, seed]))
            frames = frames + rng.normal(0.0, sigma, size=frames.shape)
        frames = np.clip(frames, -1.0, 1.0)
        stops = np.zeros(frames.shape[0], dtype=bool)
        stops[-1] = True
        return SpeechSeq(frames=frames, stop_flags=stops, speaker=speaker)

    def render_image(self, scene: Scene) -> Image:
        self._check_scene(scene)
        c = self.cfg
        cell = c.image_size // c.grid
        canvas = np.zeros((c.image_size, c.image_size, c.image_channels))
        glyph = self.stencils[scene.object_class]
        if cell != 4:
            rep = cell // 4
            if rep * 4 != cell:
                raise ContractViolation("cell size must be a multiple of 4")
            glyph = np.kron(glyph, np.ones((rep, rep)))
        glyph = glyph * self.intensities[scene.attribute]
        row, col = divmod(scene.position, c.grid)
        r0, c0 = row * cell, col * cell
        canvas[r0 : r0 + cell, c0 : c0 + cell, :] = glyph[:, :, None]
        return Image(pixels=canvas)

    def all_captions_of(self, scene: Scene) -> list[TextSeq]:
        return [
            self.caption_of(scene, variant=v)
            for v in range(self.cfg.captions_per_scene)
        ]


@dataclass
class PartitionSpec:
    paired: int = 80
    unpaired: int = 150
    speech_only: int = 185
    image_only: int = 185
    dev: int = 16
    test: int = 16

    def total_scenes(self) -> int:
        return (
            self.paired
            + self.unpaired
            + self.speech_only
            + self.image_only
            + self.dev
            + self.test
        )


@dataclass
class PartitionedDataset:
    world_cfg: WorldConfig
    spec: PartitionSpec
    seed: int
    paired: list[MultimodalExample] = field(default_factory=list)
    unpaired_speech: list[MultimodalExample] = field(default_factory=list)
    unpaired_text: list[MultimodalExample] = field(default_factory=list)
    unpaired_image: list[MultimodalExample] = field(default_factory=list)
    speech_only: list[MultimodalExample] = field(default_factory=list)
    image_only: list[MultimodalExample] = field(default_factory=list)
    dev: list[MultimodalExample] = field(default_factory=list)
    test: list[MultimodalExample] = field(default_factory=list)

    _world: World | None = None

    @property
    def world(self) -> World:
        if self._world is None:
            self._world = World(self.world_cfg, speaker_seed=self.seed)
        return self._world

    def partitions(self) -> dict[str, list[MultimodalExample]]:
        return {
            "paired": self.paired,
            "unpaired_speech": self.unpaired_speech,
            "unpaired_text": self.unpaired_text,
            "unpaired_image": self.unpaired_image,
            "speech_only": self.speech_only,
            "image_only": self.image_only,
            "dev": self.dev,
            "test": self.test,
        }

    def scene_sets(self) -> dict[str, set[int]]:
        groups = {
            "paired": self.paired,
            "unpaired_speech": self.unpaired_speech,
            "unpaired_text": self.unpaired_text,
            "unpaired_image": self.unpaired_image,
            "speech_only": self.speech_only,
            "image_only": self.image_only,
            "dev": self.dev,
            "test": self.test,
        }
        return {k: {ex.scene_id for ex in v} for k, v in groups.items()}

    def training_scene_ids(self) -> set[int]:
        ids: set[int] = set()
        for name, exs in self.partitions().items():
            if name in ("dev", "test"):
                continue
            ids |= {ex.scene_id for ex in exs}
        return ids


def gen_corpus(cfg: WorldConfig, spec: PartitionSpec, seed: int) -> PartitionedDataset:
    """Sample disjoint scene sets per partition and materialize examples.

    Counts are in scenes (Table-1-style units): a paired, dev, test, or
    speech-only scene contributes ``utterances_per_scene`` examples, text and
    image bearing scenes contribute one each.
    """
    cfg.validate()
    demand = spec.total_scenes()
    if demand > cfg.scene_capacity:
        raise DataError(
            f"partition demand of {demand} scenes exceeds scene-space capacity "
            f"{cfg.scene_capacity} (= classes x attrs x grid^2)"
        )
    world = World(cfg, speaker_seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([11, seed]))
    order = rng.permutation(cfg.scene_capacity)

    u_sp = spec.unpaired // 3
    u_img = spec.unpaired // 3
    u_txt = spec.unpaired - u_sp - u_img
    blocks = [
        ("paired", spec.paired),
        ("unpaired_speech", u_sp),
        ("unpaired_text", u_txt),
        ("unpaired_image", u_img),
        ("speech_only", spec.speech_only),
        ("image_only", spec.image_only),
        ("dev", spec.dev),
        ("test", spec.test),
    ]
    ds = PartitionedDataset(world_cfg=cfg, spec=spec, seed=seed, _world=world)
    noise_counter = 0
    cursor = 0

    def next_noise() -> int:
        nonlocal noise_counter
        noise_counter += 1
        return seed * 1_000_003 + noise_counter

    for name, count in blocks:
        scene_ids = [int(s) for s in order[cursor : cursor + count]]
        cursor += count
        out = getattr(ds, name if name != "paired" else "paired")
        for sid in scene_ids:
            scene = world.scene_from_id(sid)
            if name in ("paired", "dev", "test"):
                speakers = rng.choice(
                    cfg.num_speakers, size=cfg.utterances_per_scene, replace=False
                )
                for k in range(cfg.utterances_per_scene):
                    y = world.caption_of(scene, variant=k % cfg.captions_per_scene)
                    x = world.synth_speech(y, int(speakers[k]), next_noise())
                    z = world.render_image(scene)
                    out.append(
                        MultimodalExample(
                            x=x, y=y, z=z, speaker=int(speakers[k]),
                            scene_id=sid, pairing="paired",
                        )
                    )
            elif name in ("unpaired_speech", "speech_only"):
                speakers = rng.choice(
                    cfg.num_speakers, size=cfg.utterances_per_scene, replace=False
                )
                tag = "unpaired" if name == "unpaired_speech" else "speech_only"
                for k in range(cfg.utterances_per_scene):
                    y = world.caption_of(scene, variant=k % cfg.captions_per_scene)
                    x = world.synth_speech(y, int(speakers[k]), next_noise())
                    out.append(
                        MultimodalExample(
                            x=x, speaker=int(speakers[k]), scene_id=sid, pairing=tag
                        )
                    )
            elif name == "unpaired_text":
                y = world.caption_of(scene, variant=0)
                out.append(MultimodalExample(y=y, scene_id=sid, pairing="unpaired"))
            elif name == "unpaired_image":
                z = world.render_image(scene)
                out.append(MultimodalExample(z=z, scene_id=sid, pairing="unpaired"))
            elif name == "image_only":
                z = world.render_image(scene)
                out.append(MultimodalExample(z=z, scene_id=sid, pairing="image_only"))

    sets = ds.scene_sets()
    names = list(sets)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            inter = sets[a] & sets[b]
            if inter:
                raise DataError(f"partition scene overlap between {a} and {b}: {inter}")
    return ds
