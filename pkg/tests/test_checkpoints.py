import numpy as np
import pytest

from dplbench import checkpoints as ck
from dplbench import numkit as nk
from dplbench import promptlab as pl
from dplbench import worldgen as wg
from dplbench.errors import FingerprintMismatch, FormatError

CFG = "ab" * 32


@pytest.fixture
def gen(tiny_enc):
    return pl.init_generator(nk.Rng(1), tiny_enc.emb_dim, 6, 2, tiny_enc.tok_dim)


def test_encoder_roundtrip_bit_exact(tmp_path, tiny_world, tiny_enc):
    ck.save_encoders(tiny_enc, tmp_path / "e.dple", CFG, tiny_world.vocab)
    again = ck.load_encoders(tmp_path / "e.dple", CFG)
    assert again.fingerprint == tiny_enc.fingerprint and again.frozen
    assert again.logit_scale == tiny_enc.logit_scale
    assert all(a.tobytes() == b.tobytes() for a, b in zip(again.arrays(), tiny_enc.arrays()))
    assert ck.read_vocab(tmp_path / "e.dple") == tiny_world.vocab
    assert ck.read_config_fingerprint(tmp_path / "e.dple") == CFG


def test_generator_roundtrip(tmp_path, tiny_enc, gen):
    ck.save_generator(gen, tmp_path / "g.dplg", CFG, tiny_enc.fingerprint)
    again = ck.load_generator(tmp_path / "g.dplg", CFG, tiny_enc.fingerprint)
    assert again.fingerprint == gen.fingerprint
    assert (again.n_ctx, again.tok_dim) == (gen.n_ctx, gen.tok_dim)
    assert ck.read_vocab(tmp_path / "g.dplg") is None


def test_save_is_deterministic(tmp_path, tiny_enc):
    ck.save_encoders(tiny_enc, tmp_path / "a", CFG)
    ck.save_encoders(tiny_enc, tmp_path / "b", CFG)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_config_mismatch(tmp_path, tiny_enc, gen):
    ck.save_encoders(tiny_enc, tmp_path / "e", CFG)
    with pytest.raises(FingerprintMismatch):
        ck.load_encoders(tmp_path / "e", "cd" * 32)
    ck.save_generator(gen, tmp_path / "g", CFG, tiny_enc.fingerprint)
    with pytest.raises(FingerprintMismatch):
        ck.load_generator(tmp_path / "g", encoder_fingerprint="00" * 32)


def test_flipped_payload_byte_is_caught(tmp_path, tiny_enc):
    p = tmp_path / "e"
    ck.save_encoders(tiny_enc, p)
    raw = bytearray(p.read_bytes())
    raw[-3] ^= 0x01
    p.write_bytes(bytes(raw))
    with pytest.raises(FingerprintMismatch):
        ck.load_encoders(p)


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:4] + b"\x07" + b[5:],
                                    lambda b: b[:-8], lambda b: b + b"\0", lambda b: b[:10]])
def test_structural_corruption(tmp_path, tiny_enc, mutate):
    p = tmp_path / "e"
    ck.save_encoders(tiny_enc, p)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(FormatError):
        ck.load_encoders(p)


def test_wrong_container_kind(tmp_path, tiny_enc, gen):
    ck.save_generator(gen, tmp_path / "g")
    with pytest.raises(FormatError, match="magic"):
        ck.load_encoders(tmp_path / "g")


def test_loaded_generator_predicts_identically(tmp_path, tiny_world, tiny_enc, gen):
    x = wg.sample_domain_dataset(tiny_world, 3, 16, 0).x
    ck.save_generator(gen, tmp_path / "g")
    again = ck.load_generator(tmp_path / "g")
    assert np.array_equal(pl.dpl_predict_batch(tiny_enc, gen, x, tiny_world.vocab),
                          pl.dpl_predict_batch(tiny_enc, again, x, tiny_world.vocab))
