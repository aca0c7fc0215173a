"""Template rendering, closed-vocabulary tokenization, and the text encoder."""

from pathlib import Path

import numpy as np
import pytest

from fmqs.text import (
    CLASS_NAMES,
    GroundTruthRecord,
    OutOfVocabularyError,
    SceneObject,
    TextEncoder,
    build_vocabulary,
    default_vocabulary,
    detokenize,
    load_vocabulary,
    render_template,
    tokenize,
)

from fd import FD_TOL, max_rel_error


def random_record(rng, three_d: bool = False, sample_id: int = 0) -> GroundTruthRecord:
    objs = []
    for _ in range(rng.integers(0, 4)):
        objs.append(
            SceneObject(
                class_name=str(rng.choice(CLASS_NAMES)),
                center=tuple(np.round(rng.uniform(0, 99, size=2), 2)),
                size=tuple(np.round(rng.uniform(0.1, 20, size=2), 2)),
                yaw=float(np.round(rng.uniform(0, 3.14), 2)) if three_d else None,
            )
        )
    return GroundTruthRecord(sample_id, None if three_d else 0, objs)


# ----------------------------------------------------------------- template


def test_empty_record_template():
    assert render_template(GroundTruthRecord(0, 0, [])) == "scene with 0 objects."


def test_single_car_template():
    rec = GroundTruthRecord(0, 0, [SceneObject("car", (1.0, 2.0), (4.5, 1.8))])
    assert render_template(rec) == "scene with 1 objects. car at 1.00 2.00 size 4.50 1.80."


def test_yaw_clause():
    rec = GroundTruthRecord(0, None, [SceneObject("truck", (3.0, 4.0), (6.0, 2.5), yaw=0.79)])
    assert render_template(rec) == (
        "scene with 1 objects. truck at 3.00 4.00 size 6.00 2.50 yaw 0.79."
    )


def test_permutation_invariance():
    rng = np.random.default_rng(0)
    for _ in range(25):
        rec = random_record(rng, three_d=True)
        text = render_template(rec)
        shuffled = list(rec.objects)
        rng.shuffle(shuffled)
        assert render_template(GroundTruthRecord(rec.sample_id, None, shuffled)) == text


def test_unknown_class_rejected():
    rec = GroundTruthRecord(0, 0, [SceneObject("spaceship", (0, 0), (1, 1))])
    with pytest.raises(OutOfVocabularyError, match="spaceship"):
        render_template(rec)


def test_record_dict_round_trip():
    rng = np.random.default_rng(1)
    rec = random_record(rng, three_d=True, sample_id=7)
    back = GroundTruthRecord.from_dict(rec.to_dict())
    assert render_template(back) == render_template(rec)
    assert back.camera_id is None


# ---------------------------------------------------------------- tokenizer


def test_vocab_file_matches_generator():
    assert load_vocabulary() == build_vocabulary()


def test_empty_text_is_all_pad():
    tok = tokenize("", max_len=16)
    assert tok.length == 0
    assert (tok.ids == default_vocabulary().pad_id).all()


def test_token_ids_against_shipped_vocab_file():
    # independent lookup straight from the packaged file
    vocab_path = Path(__file__).resolve().parents[1] / "src" / "fmqs" / "data" / "vocab.txt"
    lines = vocab_path.read_text().splitlines()
    idx = {t: i for i, t in enumerate(lines)}
    tok = tokenize("car at 1.00 2.00", max_len=12)
    want = [idx[t] for t in
            ["car", "at", "1", ".", "0", "0", "2", ".", "0", "0"]] + [idx["<pad>"]] * 2
    assert tok.ids.tolist() == want


def test_round_trip_on_template_language():
    rng = np.random.default_rng(2)
    for i in range(50):
        rec = random_record(rng, three_d=bool(i % 2))
        text = render_template(rec)
        assert detokenize(tokenize(text)) == text


def test_closed_language_never_oov():
    rng = np.random.default_rng(3)
    for _ in range(50):
        rec = random_record(rng, three_d=True)
        tokenize(render_template(rec))  # must not raise


def test_oov_token_rejected():
    with pytest.raises(OutOfVocabularyError):
        tokenize("scene with zebra")
    with pytest.raises(OutOfVocabularyError):
        tokenize("scene @ home")


def test_overflow_rejected():
    with pytest.raises(ValueError, match="max_len"):
        tokenize("scene with 1 objects.", max_len=3)


# ------------------------------------------------------------------ encoder


def test_encoder_deterministic():
    tok = tokenize("scene with 0 objects.", max_len=16)
    v1 = TextEncoder(default_vocabulary().size, 16, seed=3).encode(tok).data
    v2 = TextEncoder(default_vocabulary().size, 16, seed=3).encode(tok).data
    assert v1.shape == (512,)
    assert (v1 == v2).all()


def test_encoder_distinct_records_distinct_vectors():
    rng = np.random.default_rng(4)
    enc = TextEncoder(default_vocabulary().size, 112, seed=0)
    seen = set()
    texts = []
    while len(texts) < 30:
        rec = random_record(rng, three_d=True)
        t = render_template(rec)
        if t not in seen:
            seen.add(t)
            texts.append(t)
    toks = [tokenize(t) for t in texts]
    vecs = enc.encode_batch(toks).data
    vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    sims = vecs @ vecs.T
    off_diag = sims[~np.eye(len(texts), dtype=bool)]
    assert off_diag.max() < 1.0 - 1e-8


def test_encode_batch_matches_single_and_handles_mixed_lengths():
    enc = TextEncoder(default_vocabulary().size, 64, seed=1)
    texts = ["scene with 0 objects.",
             "scene with 1 objects. car at 1.00 2.00 size 4.50 1.80.",
             "scene with 0 objects."]
    toks = [tokenize(t, max_len=64) for t in texts]
    batch = enc.encode_batch(toks).data
    for i, tok in enumerate(toks):
        single = enc.encode(tok).data
        np.testing.assert_allclose(batch[i], single, atol=1e-12)
    # identical strings encode identically
    np.testing.assert_array_equal(batch[0], batch[2])


def test_six_camera_block_shape():
    enc = TextEncoder(default_vocabulary().size, 64, seed=2)
    toks = [tokenize("scene with 0 objects.", max_len=64) for _ in range(6)]
    block = enc.encode_batch(toks)
    assert block.data.shape == (6, 512)


def test_encoder_gradient_vs_finite_differences():
    enc = TextEncoder(default_vocabulary().size, 32, seed=5, out_dim=8)
    tok = tokenize("scene with 1 objects. car at 1.00 2.00 size 4.50 1.80.", max_len=32)
    rng = np.random.default_rng(6)
    readout = rng.standard_normal(8)

    def loss_fn():
        from fmqs.autodiff import Tensor, matmul
        return matmul(enc.encode(tok), Tensor(readout))

    params = [enc.token_emb, enc.pos_emb, enc.blocks[0]["qkv_w"],
              enc.blocks[1]["ff1_w"], enc.proj_w, enc.final_g]
    worst = max_rel_error(loss_fn, params, rng, coords_per_tensor=4)
    assert worst < FD_TOL, f"text encoder FD error {worst:.3e}"
