import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blackmarks.encoding import EncodingScheme, decode
from blackmarks.engine import (Batch, CrossEntropy, Model, OptimizerConfig, Topology, forward,
                               train)
from blackmarks.embedding import (EmbedConfig, RegularizedLoss, cluster_mass_loss, embed,
                                  hamming, wm_loss)
from blackmarks.extraction import extract

from conftest import finite_difference, rel_err

SCHEME = EncodingScheme(6, (0, 1, 0, 1, 1, 0), np.zeros((2, 6)))


def scalar_wm_loss(logits, bits, table) -> float:
    """Loop oracle: mean over rows of -log(sum of softmax over the bit's cluster)."""
    total = 0.0
    for row, bit in zip(logits, bits):
        m = max(row)
        exps = [math.exp(v - m) for v in row]
        z = sum(exps)
        mass = 0.0
        for c, e in enumerate(exps):
            if table[c] == bit:
                mass += e / z
        total += -math.log(mass)
    return total / len(logits)


def test_saturated_correct_cluster():
    logits = np.zeros((1, 6))
    logits[0, 3] = 20.0  # class 3 -> bit 1
    assert wm_loss(logits, [1], SCHEME) < 1e-3


def test_uniform_logits_balanced_scheme():
    assert wm_loss(np.zeros((4, 6)), [0, 1, 0, 1], SCHEME) == pytest.approx(math.log(2), abs=1e-12)


def test_empty_batch_is_zero():
    assert wm_loss(np.zeros((0, 6)), [], SCHEME) == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.1, 30))
def test_matches_scalar_oracle(seed, scale):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=scale, size=(7, 6))
    bits = rng.integers(0, 2, size=7)
    assert wm_loss(logits, bits, SCHEME) == pytest.approx(scalar_wm_loss(logits, bits, SCHEME.table), rel=1e-9)


def test_logit_gradient_finite_differences():
    rng = np.random.default_rng(3)
    logits = rng.normal(scale=2, size=(5, 6))
    bits = rng.integers(0, 2, size=5)
    _, grad = cluster_mass_loss(logits, bits, SCHEME)
    fd = finite_difference(lambda z: cluster_mass_loss(z, bits, SCHEME)[0].sum(), logits, range(logits.size))
    assert rel_err(grad.ravel(), fd).max() < 1e-3


def test_regularized_parameter_gradient_finite_differences():
    from blackmarks.engine import grad_params, loss_value, loss_and_grad

    topo = Topology.mlp(5, [7], 6)
    model = Model.init(topo, 4)
    rng = np.random.default_rng(5)
    batch = Batch(rng.random((6, 5)), rng.integers(0, 6, size=6),
                  extra=np.array([0, 0, 0, 1, 1, 1], bool), bits=rng.integers(0, 2, size=6))
    loss = RegularizedLoss(SCHEME, lam=0.5)
    _, g = loss_and_grad(model, batch, loss)
    coords = rng.choice(model.params.size, size=min(100, model.params.size), replace=False)
    p0 = model.params.astype(np.float64)
    fd = finite_difference(lambda p: loss_value(model, batch, loss, params=p), p0, coords)
    assert rel_err(g[coords], fd).max() < 1e-3


def test_regularized_value_decomposes():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(6, 6))
    labels = rng.integers(0, 6, size=6)
    bits = rng.integers(0, 2, size=6)
    extra = np.array([1, 0, 1, 0, 0, 0], bool)
    value, _ = RegularizedLoss(SCHEME, lam=0.7)(logits, Batch(None, labels, extra, bits))
    ce, _ = CrossEntropy()(logits, Batch(None, labels))
    assert value == pytest.approx(ce + 0.7 * scalar_wm_loss(logits[extra], bits[extra], SCHEME.table))


def test_surrogate_consistency_on_saturated_rows():
    # rows whose correct-cluster mass exceeds 1/2 decode to the key bit
    rng = np.random.default_rng(7)
    bits = rng.integers(0, 2, size=200)
    logits = rng.normal(size=(200, 6))
    for i, b in enumerate(bits):
        members = SCHEME.cluster(b)
        logits[i, members[rng.integers(len(members))]] += 15.0
    losses, _ = cluster_mass_loss(logits, bits, SCHEME)
    assert np.all(losses < math.log(2))
    np.testing.assert_array_equal(decode(logits, SCHEME), bits)
    assert hamming(logits, bits, SCHEME) == 0


def test_embed_config_invariants():
    with pytest.raises(ValueError):
        EmbedConfig(lam=-0.1)
    with pytest.raises(ValueError):
        EmbedConfig(epochs=0)
    opt = EmbedConfig().optimizer(OptimizerConfig("sgd", 0.05, epochs=30))
    assert opt.learning_rate == pytest.approx(0.005) and opt.epochs == 15


def test_lambda_zero_without_keys_is_plain_finetune(blob_model, blobs):
    model, base = blob_model
    cfg = EmbedConfig(lam=0.0, epochs=2, seed=8)
    scheme = EncodingScheme(10, (0, 1) * 5, np.zeros((2, 10)))
    marked = embed(model, blobs[0], None, cfg, scheme, base, monitor=False).model
    plain, _ = train(model, blobs[0], cfg.optimizer(base), CrossEntropy())
    assert marked.params.tobytes() == plain.params.tobytes()


def test_blob_embedding_extracts_exactly(wm_blob):
    _, wm, _, _ = wm_blob
    report = extract(wm.marked, wm.keys, wm.scheme, wm.signature)
    assert report.ber == 0.0 and report.detected


def test_blob_embedding_ber_mostly_monotone(wm_blob):
    _, wm, _, _ = wm_blob
    ber = [row["hamming"] / len(wm.candidates) for row in wm.embedded.history]
    assert len(ber) == 15
    assert np.mean(np.diff(ber) <= 0) >= 0.9


def test_embed_history_fields(wm_blob):
    _, wm, _, _ = wm_blob
    row = wm.embedded.history[-1]
    assert set(row) >= {"epoch", "loss", "wm_loss", "hamming", "clean_loss", "test_accuracy"}
    assert wm.embedded.seconds > 0


def test_embed_rejects_final_keys(wm_blob, blobs):
    base, wm, opt, _ = wm_blob
    with pytest.raises(ValueError):
        embed(base, blobs[0], wm.keys, EmbedConfig(epochs=1), wm.scheme, opt)
