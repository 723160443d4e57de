import dataclasses

import numpy as np
import pytest

from eemda.eemio import make_loo_folds
from eemda.model import BackboneSpec, TrainablePolicy, build_regressor, set_trainable
from eemda.preprocess import preprocess_dataset
from eemda.synth import generate_dataset, standard_spec
from eemda.trainer import (
    ADAM_DEFAULTS,
    DomainAdaptationPlan,
    TrainingDivergedError,
    TrainPhaseConfig,
    load_checkpoint,
    read_manifest,
    run_domain_adaptation,
    run_loo,
    train_phase,
)

# short schedule used wherever the numbers themselves do not matter
QUICK = DomainAdaptationPlan("k268", TrainPhaseConfig(1e-2, 230, 3), TrainPhaseConfig(2e-3, 32, 2),
                             TrainablePolicy.partial_unfreeze(5))


@pytest.fixture(scope="module")
def tiny(tiny_dataset):
    return tiny_dataset, preprocess_dataset(tiny_dataset)


def arrays(ds, images, target="k268"):
    return np.stack([images[s.sample_id].pixels for s in ds]), ds.targets(target)


def test_phase_config_validation():
    for bad in (dict(learning_rate=0, batch_size=1, epochs=1), dict(learning_rate=1e-3, batch_size=0, epochs=1),
                dict(learning_rate=1e-3, batch_size=1, epochs=0)):
        with pytest.raises(ValueError):
            TrainPhaseConfig(**bad)
    with pytest.raises(ValueError):
        TrainPhaseConfig(1e-3, 1, 1, loss="mae")


def test_published_plans():
    k232, k268 = DomainAdaptationPlan.published("k232"), DomainAdaptationPlan.published("k268")
    for p in (k232, k268):
        assert (p.phase1.learning_rate, p.phase1.batch_size, p.phase1.epochs) == (1e-4, 230, 1000)
        assert p.phase2_policy == TrainablePolicy.partial_unfreeze(100)
    assert (k232.phase2.learning_rate, k232.phase2.batch_size, k232.phase2.epochs) == (1e-6, 230, 500)
    assert (k268.phase2.learning_rate, k268.phase2.batch_size, k268.phase2.epochs) == (1e-5, 32, 500)
    assert DomainAdaptationPlan.default_for("k232", BackboneSpec.pretrained()) == k232
    assert k232.digest() != k268.digest()
    assert k232.to_dict()["optimizer_settings"] == ADAM_DEFAULTS
    with pytest.raises(ValueError):
        DomainAdaptationPlan.published("k270")
    with pytest.raises(ValueError):
        DomainAdaptationPlan("k232", k232.phase1, k232.phase2, TrainablePolicy.head_only())


def test_history_length_and_frozen_invariance(tiny):
    ds, images = tiny
    x, y = arrays(ds, images)
    m = build_regressor(BackboneSpec.compact(), seed=1)
    backbone = m.backbone_digest()
    _, h = train_phase(m, x, y, TrainPhaseConfig(1e-3, 4, 3), seed=0)
    assert len(h) == 3 and [r.epoch for r in h.records] == [0, 1, 2]
    assert all(np.isfinite(h.train_losses))
    assert m.backbone_digest() == backbone


def test_partial_unfreeze_keeps_prefix_frozen(tiny):
    ds, images = tiny
    x, y = arrays(ds, images)
    m = build_regressor(BackboneSpec.compact(), seed=1)
    set_trainable(m, TrainablePolicy.partial_unfreeze(5))
    frozen = m.frozen_digest()
    before = m.backbone_digest()
    train_phase(m, x, y, TrainPhaseConfig(1e-2, 9, 2), seed=0)
    assert m.frozen_digest() == frozen
    assert m.backbone_digest() != before


def test_loss_halves_on_fifty_samples():
    ds = generate_dataset(standard_spec(seed=3, n_oils=5, n_stages=10))
    images = preprocess_dataset(ds)
    x, y = arrays(ds, images, "k232")
    assert len(x) == 50
    m = build_regressor(BackboneSpec.compact(), seed=0)
    set_trainable(m, TrainablePolicy.partial_unfreeze(5))
    _, h = train_phase(m, x, y, TrainPhaseConfig(1e-2, 50, 50), seed=0)
    assert h.train_losses[-1] < 0.5 * h.train_losses[0]


def test_empty_and_mismatched_sets(tiny):
    ds, images = tiny
    x, y = arrays(ds, images)
    m = build_regressor(BackboneSpec.compact(), seed=1)
    with pytest.raises(ValueError):
        train_phase(m, x[:0], y[:0], TrainPhaseConfig(1e-3, 4, 1), seed=0)
    with pytest.raises(ValueError):
        train_phase(m, x, y[:-1], TrainPhaseConfig(1e-3, 4, 1), seed=0)


def test_divergence_is_reported(tiny):
    ds, images = tiny
    x, _ = arrays(ds, images)
    y = np.full(len(x), np.inf)
    m = build_regressor(BackboneSpec.compact(), seed=1)
    with pytest.raises(TrainingDivergedError) as err:
        train_phase(m, x, y, TrainPhaseConfig(1e-3, 4, 2), seed=0)
    assert err.value.epoch == 0 and err.value.batch == 0


def test_training_is_deterministic(tiny):
    ds, images = tiny
    x, y = arrays(ds, images)
    digests = []
    for _ in range(2):
        m = build_regressor(BackboneSpec.compact(), seed=4)
        set_trainable(m, TrainablePolicy.partial_unfreeze(5))
        train_phase(m, x, y, TrainPhaseConfig(1e-2, 4, 3), seed=9)
        digests.append(m.weight_digest())
    assert digests[0] == digests[1]


def test_domain_adaptation_checkpoint(tiny, tmp_path):
    ds, images = tiny
    fold = make_loo_folds(ds)[1]
    ckpt, h1, h2 = run_domain_adaptation(fold, ds, QUICK, seed=3, images=images, out_dir=tmp_path / "B",
                                         config_digest="abc")
    assert (len(h1), len(h2)) == (3, 2)
    m = read_manifest(tmp_path / "B" / "manifest.txt")
    assert m["fold_oil"] == "B" and m["target"] == "k268" and m["config_digest"] == "abc"
    assert m["phase1_epochs"] == "3" and m["phase2_epochs"] == "2" and m["seed"] == "3"
    assert int(m["census_phase2_trainable"]) > int(m["census_phase1_trainable"])
    assert m["plan_digest"] == QUICK.digest()
    assert m["rayleigh_mode"] == "keep"
    history = (tmp_path / "B" / "history.csv").read_text().splitlines()
    assert history[0] == "phase,epoch,train_loss,val_loss" and len(history) == 1 + 5
    loaded = load_checkpoint(tmp_path / "B")
    assert loaded.weight_digest == ckpt.weight_digest
    x = np.stack([images[s].pixels for s in fold.val_sample_ids])
    assert np.array_equal(loaded.model.predict_pixels(x), ckpt.model.predict_pixels(x))
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]  # no temp dirs left


@pytest.mark.parametrize("target", ["k232", "k268"])
def test_default_plan_manifest_values(target, tiny):
    """Manifest records the published rates and batch sizes (epochs and prefix shrunk to fit the compact net)."""
    ds, images = tiny
    plan = DomainAdaptationPlan.published(target)
    short = dataclasses.replace(plan, phase1=dataclasses.replace(plan.phase1, epochs=1),
                                phase2=dataclasses.replace(plan.phase2, epochs=1),
                                phase2_policy=TrainablePolicy.partial_unfreeze(5))
    ckpt, _, _ = run_domain_adaptation(make_loo_folds(ds)[0], ds, short, seed=0, images=images)
    m = ckpt.manifest
    assert m["phase2_learning_rate"] == repr(plan.phase2.learning_rate)
    assert m["phase2_batch_size"] == plan.phase2.batch_size
    assert m["phase1_learning_rate"] == "0.0001" and m["phase1_batch_size"] == 230
    assert plan.phase1.epochs == 1000 and plan.phase2.epochs == 500


def test_checkpoint_digest_mismatch(tiny, tmp_path):
    ds, images = tiny
    run_domain_adaptation(make_loo_folds(ds)[0], ds, QUICK, seed=0, images=images, out_dir=tmp_path / "A")
    path = tmp_path / "A" / "manifest.txt"
    path.write_text(path.read_text().replace("weight_digest: ", "weight_digest: 00"))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "A")


def test_run_loo_two_oils(tmp_path):
    ds = generate_dataset(dataclasses.replace(standard_spec(seed=2, n_oils=2, n_stages=4)))
    ckpts, report = run_loo(ds, "k268", QUICK, seed_base=10, out_root=tmp_path)
    assert [c.fold_oil for c in ckpts] == ["A", "B"]
    assert len(report.rows) == 2 * 4
    assert report.leakage_violations() == []
    assert [c.manifest["seed"] for c in ckpts] == [10, 11]
    assert report.metadata["fold_seeds"] == "A=10,B=11"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["A", "B"]
    assert not report.incomplete


def test_run_loo_reproducible_and_jobs_equivalent(tiny, tmp_path):
    ds, images = tiny
    a_ckpts, a = run_loo(ds, "k268", QUICK, images=images)
    b_ckpts, b = run_loo(ds, "k268", QUICK, images=images)
    c_ckpts, c = run_loo(ds, "k268", QUICK, jobs=2, out_root=tmp_path)
    assert [k.weight_digest for k in a_ckpts] == [k.weight_digest for k in b_ckpts]
    assert [k.weight_digest for k in a_ckpts] == [k.weight_digest for k in c_ckpts]
    assert [r.prediction for r in a.rows] == [r.prediction for r in c.rows]


def test_run_loo_fold_subset_and_failures(tiny):
    ds, images = tiny
    ckpts, report = run_loo(ds, "k268", QUICK, images=images, oils=["C"])
    assert [c.fold_oil for c in ckpts] == ["C"] and ckpts[0].manifest["seed"] == 2
    with pytest.raises(KeyError):
        run_loo(ds, "k268", QUICK, images=images, oils=["Z"])
    bad = {k: v for k, v in images.items() if not k.startswith("B_")}
    _, report = run_loo(ds, "k268", QUICK, images=bad)
    assert report.incomplete and set(report.failed_folds) == {"A", "B", "C"}


def test_plan_target_mismatch(tiny):
    ds, images = tiny
    with pytest.raises(ValueError):
        run_loo(ds, "k232", QUICK, images=images)
