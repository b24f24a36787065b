"""Synthetic world: captions, speech, images, corpus partitioning."""

import numpy as np
import pytest

from mmchain.errors import ContractViolation, DataError
from mmchain.world import (
    CHARS,
    EOS,
    PAD,
    VOCAB_SIZE,
    PartitionSpec,
    Scene,
    SpeakerTransform,
    TextSeq,
    World,
    WorldConfig,
    decode_text,
    encode_text,
    gen_corpus,
)

SMALL_SPEC = PartitionSpec(paired=10, unpaired=9, speech_only=8, image_only=8, dev=4, test=4)


@pytest.fixture(scope="module")
def world():
    return World(WorldConfig(), speaker_seed=0)


@pytest.fixture(scope="module")
def small_corpus():
    return gen_corpus(WorldConfig(), SMALL_SPEC, seed=7)


def test_vocab_size_and_text_roundtrip():
    assert VOCAB_SIZE == 30
    toks = encode_text("red fox at top ace")
    assert toks[-1] == EOS
    assert decode_text(toks) == "red fox at top ace"


def test_textseq_invariants():
    with pytest.raises(ContractViolation):
        TextSeq(tokens=np.array([3, 4]))  # no EOS
    with pytest.raises(ContractViolation):
        TextSeq(tokens=np.array([3, EOS, 4, EOS]))  # two EOS
    with pytest.raises(ContractViolation):
        TextSeq(tokens=np.array([PAD, 3, EOS]))  # PAD inside


def test_canonical_first_caption_is_fixed(world):
    y = world.caption_of(Scene(0, 0, 0))
    assert y.text == "red cat at top ace"
    y2 = World(WorldConfig(), speaker_seed=99).caption_of(Scene(0, 0, 0))
    assert y2.text == y.text


def test_captions_injective_over_full_scene_space(world):
    seen = {}
    for sid in range(world.cfg.scene_capacity):
        text = world.caption_of(world.scene_from_id(sid)).text
        assert text not in seen, f"collision between scenes {seen[text]} and {sid}"
        seen[text] = sid
    assert len(seen) == world.cfg.scene_capacity


def test_caption_lengths_bounded(world):
    for sid in range(world.cfg.scene_capacity):
        for v in range(len(world.all_captions_of(world.scene_from_id(sid)))):
            assert len(world.caption_of(world.scene_from_id(sid), variant=v)) <= world.cfg.max_text_len


def test_caption_variants_distinct(world):
    cfg = WorldConfig(captions_per_scene=5)
    w = World(cfg, speaker_seed=0)
    caps = [c.text for c in w.all_captions_of(Scene(2, 1, 7))]
    assert len(set(caps)) == 5
    for c in caps:
        assert len(encode_text(c)) <= cfg.max_text_len


def test_scene_id_roundtrip(world):
    for sid in (0, 1, 17, world.cfg.scene_capacity - 1):
        assert world.scene_id(world.scene_from_id(sid)) == sid


def test_synth_speech_deterministic(world):
    y = world.caption_of(Scene(1, 2, 3))
    a = world.synth_speech(y, speaker=2, seed=5)
    b = world.synth_speech(y, speaker=2, seed=5)
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.stop_flags, b.stop_flags)
    c = world.synth_speech(y, speaker=2, seed=6)
    assert not np.array_equal(a.frames, c.frames)


def test_synth_speech_noise_free_identity_transform_equals_patterns(world):
    w = World(WorldConfig(), speaker_seed=0)
    F = w.cfg.frame_dim
    w.speakers[0] = SpeakerTransform(mix=np.eye(F), offset=np.zeros(F))
    y = w.caption_of(Scene(0, 1, 2))
    sp = w.synth_speech(y, speaker=0, seed=0, sigma=0.0)
    chars = [t for t in y.tokens.tolist() if t != EOS]
    expected = np.concatenate([w.char_patterns[c] for c in chars], axis=0)
    assert np.array_equal(sp.frames, expected)


def test_synth_speech_shape_and_bounds(world):
    y = world.caption_of(Scene(3, 2, 9))
    sp = world.synth_speech(y, speaker=1, seed=11)
    assert sp.frames.shape == ((len(y) - 1) * world.cfg.frames_per_char, world.cfg.frame_dim)
    assert np.all(sp.frames >= -1.0) and np.all(sp.frames <= 1.0)
    assert sp.stop_flags.sum() == 1 and sp.stop_flags[-1]


def test_char_patterns_pairwise_distance(world):
    flat = np.stack([p.reshape(-1) for p in world.char_patterns.values()])
    d = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= 0.5


def test_speaker_transforms_well_conditioned(world):
    for tr in world.speakers:
        assert np.linalg.cond(tr.mix) < 100.0


def test_render_image_deterministic_and_bounded(world):
    a = world.render_image(Scene(4, 3, 6))
    b = world.render_image(Scene(4, 3, 6))
    assert np.array_equal(a.pixels, b.pixels)
    assert np.all(a.pixels >= 0.0) and np.all(a.pixels <= 1.0)


def test_render_image_translation_equality(world):
    cell = world.cfg.image_size // world.cfg.grid
    a = world.render_image(Scene(2, 1, 0)).pixels
    b = world.render_image(Scene(2, 1, 5)).pixels  # row 1, col 1
    block_a = a[0:cell, 0:cell]
    block_b = b[cell : 2 * cell, cell : 2 * cell]
    assert np.array_equal(block_a, block_b)
    mask = np.ones_like(b, dtype=bool)
    mask[cell : 2 * cell, cell : 2 * cell] = False
    assert np.all(b[mask] == 0.0)


def test_nearest_neighbor_round_trip_identifiability(small_corpus):
    """A plain NN listener reads >= 99% of characters from noisy speech."""
    world = small_corpus.world
    d = world.cfg.frames_per_char
    chars = sorted(world.char_patterns)
    table = np.stack([world.char_patterns[c].reshape(-1) for c in chars])
    total = correct = 0
    examples = [ex for p in ("paired", "speech_only", "dev") for ex in getattr(small_corpus, p)]
    for ex in examples:
        if ex.x is None or ex.y is None:
            continue
        truth = [t for t in ex.y.tokens.tolist() if t != EOS]
        for i, c, in enumerate(truth):
            g = ex.x.frames[i * d : (i + 1) * d].reshape(-1)
            pick = chars[int(((table - g) ** 2).sum(axis=1).argmin())]
            correct += pick == c
            total += 1
    assert total > 500
    assert correct / total >= 0.99


def test_gen_corpus_counts_follow_config(small_corpus):
    u = small_corpus.cfg_counts if hasattr(small_corpus, "cfg_counts") else None
    cfg = small_corpus.world_cfg
    per = cfg.utterances_per_scene
    assert len(small_corpus.paired) == SMALL_SPEC.paired * per
    assert len(small_corpus.speech_only) == SMALL_SPEC.speech_only * per
    assert len(small_corpus.image_only) == SMALL_SPEC.image_only
    assert len(small_corpus.dev) == SMALL_SPEC.dev * per
    assert len(small_corpus.test) == SMALL_SPEC.test * per
    n_sp = len({e.scene_id for e in small_corpus.unpaired_speech})
    n_tx = len(small_corpus.unpaired_text)
    n_im = len(small_corpus.unpaired_image)
    assert n_sp + n_tx + n_im == SMALL_SPEC.unpaired


def test_gen_corpus_partitions_scene_disjoint(small_corpus):
    sets = small_corpus.scene_sets()
    names = list(sets)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            assert not (sets[a] & sets[b]), f"{a} and {b} share scenes"


def test_dev_test_scenes_never_in_training(small_corpus):
    train = small_corpus.training_scene_ids()
    for ex in small_corpus.dev + small_corpus.test:
        assert ex.scene_id not in train


def test_gen_corpus_deterministic_and_seed_sensitive():
    a = gen_corpus(WorldConfig(), SMALL_SPEC, seed=3)
    b = gen_corpus(WorldConfig(), SMALL_SPEC, seed=3)
    c = gen_corpus(WorldConfig(), SMALL_SPEC, seed=4)
    ax, bx = a.paired[0], b.paired[0]
    assert np.array_equal(ax.x.frames, bx.x.frames)
    assert np.array_equal(ax.y.tokens, bx.y.tokens)
    assert {e.scene_id for e in a.paired} != {e.scene_id for e in c.paired}


def test_gen_corpus_infeasible_counts_error_names_capacity():
    cfg = WorldConfig()
    bad = PartitionSpec(paired=800, unpaired=150, speech_only=185, image_only=185)
    with pytest.raises(DataError, match=str(cfg.scene_capacity)):
        gen_corpus(cfg, bad, seed=0)


def test_paired_examples_are_scene_consistent(small_corpus):
    world = small_corpus.world
    for ex in small_corpus.paired[:6]:
        scene = world.scene_from_id(ex.scene_id)
        assert ex.y.text in {c.text for c in world.all_captions_of(scene)}
        assert np.array_equal(ex.z.pixels, world.render_image(scene).pixels)
        assert ex.x is not None and ex.speaker is not None


def test_example_requires_a_modality():
    from mmchain.world import MultimodalExample

    with pytest.raises(ContractViolation):
        MultimodalExample()


def test_world_config_validation():
    with pytest.raises(ContractViolation):
        WorldConfig(num_classes=99).validate()
    with pytest.raises(ContractViolation):
        WorldConfig(image_size=15).validate()
    with pytest.raises(ContractViolation):
        WorldConfig(utterances_per_scene=20).validate()
