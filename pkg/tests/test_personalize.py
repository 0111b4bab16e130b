"""Surgeon-identity fine-tuning: warm-start equivalence, backbone
freeze and the delta artifact."""

import numpy as np
import pytest

from fedsurg import model as M
from fedsurg import personalize as P
from fedsurg.federation import TrainConfig
from conftest import SMALL_ARCH, random_batch


VOCAB = 12


def _setup(n=48, seed=3):
    params = M.init_params(SMALL_ARCH, 1)
    batch = random_batch(SMALL_ARCH, n, seed, surgeon_vocab=VOCAB)
    return params, batch


def test_warm_start_reproduces_global_predictions():
    params, batch = _setup()
    pm = P.warm_start(params, SMALL_ARCH, VOCAB)
    personalized = P.predict_personalized(pm, batch)
    global_probs = M.predict(params, SMALL_ARCH, batch)
    assert np.max(np.abs(personalized - global_probs)) < 1e-12


def test_warm_start_surgeon_slice_zero_merge_slice_copied():
    params, _ = _setup()
    pm = P.warm_start(params, SMALL_ARCH, VOCAB, embed_dim=8)
    m = SMALL_ARCH.merge_hidden
    for k in range(SMALL_ARCH.n_outcomes):
        w = pm.heads[f"phead{k}.W"]
        assert w.shape == (m + 8, 1)
        assert np.array_equal(w[:m], params[f"head{k}.W"])
        assert np.all(w[m:] == 0.0)
        assert np.array_equal(pm.heads[f"phead{k}.b"], params[f"head{k}.b"])
    assert pm.surgeon_table.shape == (VOCAB + 1, 8)
    assert np.any(pm.surgeon_table != 0.0)  # random init, ready to learn


def test_fine_tune_freezes_backbone_and_reduces_loss():
    params, batch = _setup(n=96)
    cfg = TrainConfig(lr=0.05, batch_size=32)
    before = P.personalized_loss(P.warm_start(params, SMALL_ARCH, VOCAB), batch)
    pm = P.fine_tune(params, SMALL_ARCH, batch, cfg, seed=0,
                     surgeon_vocab_size=VOCAB, epochs=4)
    assert M.params_digest(pm.backbone) == M.params_digest(params)
    after = P.personalized_loss(pm, batch)
    assert after <= before


def test_fine_tune_moves_only_table_and_heads():
    params, batch = _setup(n=64)
    cfg = TrainConfig(lr=0.05, batch_size=64)
    pm0 = P.warm_start(params, SMALL_ARCH, VOCAB, seed=0)
    # the surgeon slice of each head starts at zero, so the table only
    # receives gradient from the second step onward
    pm = P.fine_tune(params, SMALL_ARCH, batch, cfg, seed=0,
                     surgeon_vocab_size=VOCAB, epochs=2)
    assert not np.array_equal(pm.surgeon_table, pm0.surgeon_table)
    assert any(not np.array_equal(pm.heads[k], pm0.heads[k]) for k in pm.heads)


def test_fine_tune_is_deterministic():
    params, batch = _setup(n=64)
    cfg = TrainConfig(lr=0.05, batch_size=32)
    pm1 = P.fine_tune(params, SMALL_ARCH, batch, cfg, seed=7,
                      surgeon_vocab_size=VOCAB, epochs=2)
    pm2 = P.fine_tune(params, SMALL_ARCH, batch, cfg, seed=7,
                      surgeon_vocab_size=VOCAB, epochs=2)
    assert np.array_equal(pm1.surgeon_table, pm2.surgeon_table)
    for k in pm1.heads:
        assert np.array_equal(pm1.heads[k], pm2.heads[k])


def test_unknown_surgeon_uses_row_zero():
    params, batch = _setup()
    pm = P.warm_start(params, SMALL_ARCH, VOCAB)
    b0 = batch.take(np.arange(len(batch)))
    b0.surgeon[:] = 0  # index 0 = unknown/unseen surgeon
    probs = P.predict_personalized(pm, b0)
    assert probs.shape == (len(batch), SMALL_ARCH.n_outcomes)
    assert np.all(np.isfinite(probs))


def test_predict_requires_surgeon_ids():
    params, batch = _setup()
    pm = P.warm_start(params, SMALL_ARCH, VOCAB)
    import dataclasses
    no_surgeon = dataclasses.replace(batch, surgeon=None)
    with pytest.raises(ValueError):
        P.predict_personalized(pm, no_surgeon)


def test_delta_roundtrip(tmp_path):
    params, batch = _setup(n=64)
    cfg = TrainConfig(lr=0.05, batch_size=32)
    pm = P.fine_tune(params, SMALL_ARCH, batch, cfg, seed=2,
                     surgeon_vocab_size=VOCAB, epochs=2)
    path = tmp_path / "site.delta"
    P.save_delta(path, pm)
    back = P.load_delta(path, params, SMALL_ARCH)
    assert np.array_equal(back.surgeon_table, pm.surgeon_table)
    assert np.array_equal(
        P.predict_personalized(back, batch), P.predict_personalized(pm, batch))
    with pytest.raises(ValueError):
        bad = tmp_path / "bad.delta"
        bad.write_bytes(b"NOPE" + b"\x00" * 8)
        P.load_delta(bad, params, SMALL_ARCH)
