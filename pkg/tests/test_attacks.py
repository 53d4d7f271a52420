import csv

import numpy as np
import pytest

from blackmarks.attacks import (AttackError, Owner, PruneConfig, adv_robustness, attack_finetune,
                                attack_overwrite, attack_prune, build_zoo, integrity_suite,
                                prune_weights, write_sweep, zoo_topologies)
from blackmarks.engine import Dense, Model, Topology, accuracy
from blackmarks.keygen import AttackConfig, fgsm, momentum_iterative
from blackmarks.pipeline import derive_seed


@pytest.fixture(scope="module")
def owner(wm_blob):
    _, wm, _, _ = wm_blob
    return Owner(wm.keys, wm.scheme, wm.signature)


# -- fine-tuning -------------------------------------------------------------------

def test_finetune_zero_epochs_rejected(wm_blob, owner, blobs):
    _, wm, opt, _ = wm_blob
    with pytest.raises(ValueError):
        attack_finetune(wm.marked, blobs[0], 0, 1, owner, opt, blobs[1])


def test_finetune_descriptor_and_rate(wm_blob, owner, blobs):
    _, wm, opt, _ = wm_blob
    out = attack_finetune(wm.marked, blobs[0], 2, 1, owner, opt, blobs[1], lr_factor=0.1)
    assert out.descriptor == {"kind": "finetune", "epochs": 2, "lr": pytest.approx(opt.learning_rate * 0.1),
                              "seed": 1}
    assert out.model.params.tobytes() != wm.marked.params.tobytes()
    assert 0 <= out.report.ber <= 1 and out.test_accuracy > 0.9


# -- pruning -------------------------------------------------------------------------

def test_prune_two_by_two_example():
    topo = Topology(2, (Dense(2, 2),), 2)
    model = Model(topo, np.array([0.1, -0.2, 0.3, -0.4, 0.05, 0.01]))
    pruned, mask, warnings = prune_weights(model, 0.5)
    np.testing.assert_array_equal(pruned.params[:4], np.float32([0, 0, 0.3, -0.4]))
    np.testing.assert_array_equal(pruned.params[4:], model.params[4:])  # biases exempt
    assert mask.tolist() == [True, True, False, False, False, False]
    assert not warnings  # each output unit still has one incoming weight


def test_prune_clamps_dead_output_units():
    topo = Topology(2, (Dense(2, 2),), 2)
    model = Model(topo, np.array([0.1, -0.2, 0.3, -0.4, 0.0, 0.0]))
    pruned, mask, warnings = prune_weights(model, 0.75)
    # W = [[0.1, -0.2], [0.3, -0.4]] with inputs on rows; dropping 0.1, -0.2, 0.3 would
    # leave output unit 0 (first column) empty, so its largest weight 0.3 is kept
    np.testing.assert_array_equal(pruned.params[:4], np.float32([0, 0, 0.3, -0.4]))
    assert warnings and "layer 0" in warnings[0]


def test_prune_alpha_zero_unchanged(wm_blob, owner, blobs):
    _, wm, opt, _ = wm_blob
    out = attack_prune(wm.marked, PruneConfig(0.0), blobs[0], owner, opt, blobs[1])
    assert out.model.params.tobytes() == wm.marked.params.tobytes()
    assert out.report.ber == 0.0


def test_prune_alpha_range():
    with pytest.raises(ValueError):
        PruneConfig(1.0)


def test_prune_fraction_per_layer(wm_blob):
    _, wm, _, _ = wm_blob
    _, mask, _ = prune_weights(wm.marked, 0.6)
    for _, w, b in wm.marked.topology.dense_slices():
        assert abs(mask[w].mean() - 0.6) < 0.01
        assert not mask[b].any()


def test_sparse_finetune_respects_mask(wm_blob, owner, blobs):
    _, wm, opt, _ = wm_blob
    out = attack_prune(wm.marked, PruneConfig(0.7, epochs=2, seed=1), blobs[0], owner, opt, blobs[1])
    _, mask, _ = prune_weights(wm.marked, 0.7)
    assert np.all(out.model.params[mask] == 0.0)
    assert out.descriptor["sparsity"] == pytest.approx(mask.mean())


def test_global_pruning_threshold(wm_blob):
    _, wm, _, _ = wm_blob
    pruned, mask, _ = prune_weights(wm.marked, 0.5, global_threshold=True)
    weights = np.concatenate([np.arange(w.start, w.stop) for _, w, _ in wm.marked.topology.dense_slices()])
    kept = np.abs(wm.marked.params[weights][~mask[weights]])
    cut = np.abs(wm.marked.params[weights][mask[weights]])
    assert cut.max() <= kept.min() or not len(cut)


# -- overwriting ---------------------------------------------------------------------

def test_overwrite_seed_collision_rejected(wm_blob, owner, blobs):
    _, wm, opt, settings = wm_blob
    # the fixture watermark was built with master seed 0
    assert owner.keys.attack["seed"] == derive_seed(0, "keygen")
    with pytest.raises(ValueError):
        attack_overwrite(wm.marked, blobs[0], 16, 0, owner, opt, settings, blobs[1])


@pytest.mark.slow
def test_overwrite_embeds_attacker_mark(wm_blob, owner, blobs):
    _, wm, opt, settings = wm_blob
    out = attack_overwrite(wm.marked, blobs[0], 12, 1, owner, opt, settings, blobs[1])
    assert out.attacker_report.detected
    assert len(out.attacker.signature) == 12
    assert out.attacker.keys.attack["seed"] != owner.keys.attack["seed"]
    assert out.report.query_count == len(owner.keys)


def test_owner_artifacts_tamper_guard(wm_blob):
    _, wm, _, _ = wm_blob
    own = Owner(wm.keys.subset(np.arange(len(wm.keys))), wm.scheme, wm.signature)
    own.keys.images[0, 0] += 0.25
    with pytest.raises(AttackError):
        own.verify(wm.marked)


# -- integrity -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def zoo(wm_blob, blobs):
    base, _, opt, _ = wm_blob
    return build_zoo(blobs[0], base.topology, opt, seed=11)


def test_zoo_composition(zoo, wm_blob):
    base = wm_blob[0]
    assert len(zoo) == 6
    assert sum(m.topology == base.topology for _, m in zoo) == 3
    assert [m.topology for _, m in zoo[3:]] == zoo_topologies(base.topology)
    assert zoo_topologies(base.topology)[0].hidden == [128, 64]


def test_integrity_all_positive(zoo, owner):
    result = integrity_suite(owner, zoo, zoo[0][1].topology)
    assert result.passed
    assert min(r.ber for r in result.reports) > 0


def test_integrity_flags_marked_model(zoo, owner, wm_blob):
    _, wm, _, _ = wm_blob
    rigged = [("marked", wm.marked)] + zoo[1:]
    result = integrity_suite(owner, rigged, wm.marked.topology)
    assert result.violations == ["marked"]


def test_integrity_rejects_small_zoo(zoo, owner):
    with pytest.raises(ValueError):
        integrity_suite(owner, zoo[:3], zoo[0][1].topology)


# -- adversarial robustness --------------------------------------------------------------

def test_zero_epsilon_equals_clean_accuracy(blob_model, blobs):
    model, _ = blob_model
    clean = accuracy(model, blobs[1].images, blobs[1].labels)
    for attack in ("fgsm_untargeted", "mim_targeted"):
        assert adv_robustness(model, blobs[1], attack, AttackConfig(epsilon=0.0)) == clean


def test_fgsm_is_single_step_mim(blob_model, blobs):
    model, _ = blob_model
    x, y = blobs[1].images, blobs[1].labels
    a = fgsm(model, x, y, 0.1)
    b = momentum_iterative(model, x, y, AttackConfig(epsilon=0.1, iterations=1, decay=0.0), targeted=False)
    assert a.tobytes() == b.tobytes()


def test_attacks_reduce_accuracy(blob_model, blobs):
    model, _ = blob_model
    clean = accuracy(model, blobs[1].images, blobs[1].labels)
    assert adv_robustness(model, blobs[1], "mim_targeted", AttackConfig(epsilon=0.3, seed=2)) < clean


def test_unknown_attack(blob_model, blobs):
    with pytest.raises(ValueError):
        adv_robustness(blob_model[0], blobs[1], "jsma", AttackConfig())


def test_write_sweep(tmp_path):
    rows = [{"alpha": 0.1, "accuracy": 0.9, "ber": 0.0}, {"alpha": 0.5, "accuracy": 0.8, "ber": 0.1}]
    write_sweep(tmp_path / "sweep.csv", rows)
    with open(tmp_path / "sweep.csv") as f:
        back = list(csv.DictReader(f))
    assert back[1] == {"alpha": "0.5", "accuracy": "0.8", "ber": "0.1"}
