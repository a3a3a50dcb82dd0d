import math

import numpy as np
import pytest

from rumexda import tensor as T
from rumexda.adaptation import (
    AdaptationConfig,
    ClassifierPairSet,
    DomainDataset,
    M3sdaStepper,
    classifier_discrepancy,
    moment_distance_multi,
    moment_distance_single,
    predict_ensemble,
    read_history_jsonl,
    train_m2s2da,
    train_m3sda_beta,
    train_vanilla,
)
from rumexda.errors import ConfigError, DegenerateInputError, ShapeError
from rumexda.nn import ModelConfig, build_model
from rumexda.tensor import Tensor

from gradcheck import assert_gradients_match


# ----------------------------------------------------------------------
# moment distance


def test_md2_single_hand_value():
    md = moment_distance_single(Tensor([[1.0, 0.0]]), Tensor([[0.0, 0.0]]))
    assert abs(md.item() - 2.0) <= 1e-12


def test_md2_multi_hand_value():
    md = moment_distance_multi(
        [Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])], Tensor([[0.0, 0.0]])
    )
    assert abs(md.item() - 2.0 * (1.0 + math.sqrt(2.0))) <= 1e-12


def test_md2_zero_on_identical_batches():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(9, 5))
    assert moment_distance_single(Tensor(z), Tensor(z)).item() <= 1e-12


def test_md2_axioms_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a = rng.normal(size=(int(rng.integers(2, 12)), 4))
        b = rng.normal(size=(int(rng.integers(2, 12)), 4))
        ab = moment_distance_single(Tensor(a), Tensor(b)).item()
        ba = moment_distance_single(Tensor(b), Tensor(a)).item()
        assert ab >= 0.0
        assert abs(ab - ba) <= 1e-12


def test_md2_multi_reduces_to_single_for_one_source():
    rng = np.random.default_rng(2)
    for _ in range(20):
        zs, zt = rng.normal(size=(6, 3)), rng.normal(size=(8, 3))
        single = moment_distance_single(Tensor(zs), Tensor(zt)).item()
        multi = moment_distance_multi([Tensor(zs)], Tensor(zt)).item()
        assert abs(single - multi) <= 1e-12


def test_md2_multi_zero_when_everything_identical():
    z = np.random.default_rng(3).normal(size=(5, 4))
    md = moment_distance_multi([Tensor(z), Tensor(z), Tensor(z)], Tensor(z))
    assert md.item() <= 1e-12


def test_md2_gradients():
    rng = np.random.default_rng(4)
    z_t = rng.normal(size=(6, 4))
    assert_gradients_match(
        lambda t: moment_distance_single(t, Tensor(z_t)), rng.normal(size=(5, 4))
    )
    others = [rng.normal(size=(5, 4)), rng.normal(size=(7, 4))]
    assert_gradients_match(
        lambda t: moment_distance_multi([t, Tensor(others[0]), Tensor(others[1])], Tensor(z_t)),
        rng.normal(size=(4, 4)),
    )
    # and through the target argument
    z_s = rng.normal(size=(5, 4))
    assert_gradients_match(lambda t: moment_distance_single(Tensor(z_s), t), z_t)


def test_md2_shape_errors():
    with pytest.raises(ShapeError):
        moment_distance_single(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 5))))
    with pytest.raises(ConfigError):
        moment_distance_multi([], Tensor(np.zeros((3, 4))))


# ----------------------------------------------------------------------
# classifier discrepancy


def test_discrepancy_zero_for_equal_outputs():
    p = Tensor([[0.3, 0.7], [0.9, 0.1]])
    assert classifier_discrepancy(p, p).item() == 0.0


def test_discrepancy_of_opposite_certainty():
    d = classifier_discrepancy(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]))
    assert d.item() == 1.0


def test_discrepancy_bounded_by_one():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = rng.random((7, 2))
        a /= a.sum(axis=1, keepdims=True)
        b = rng.random((7, 2))
        b /= b.sum(axis=1, keepdims=True)
        v = classifier_discrepancy(Tensor(a), Tensor(b)).item()
        assert 0.0 <= v <= 1.0


def test_discrepancy_gradient():
    rng = np.random.default_rng(6)
    # keep |p1 - p2| away from the kink of |.|
    p2 = rng.random((5, 2)) * 0.4
    p1 = p2 + 0.2 + 0.3 * rng.random((5, 2))
    assert_gradients_match(lambda t: classifier_discrepancy(t, Tensor(p2)), p1)


# ----------------------------------------------------------------------
# synthetic fixtures


def _blobs(n=400, d=2, seed=0, gap=3.0):
    """Linearly separable two-class blobs with a known boundary."""
    rng = np.random.default_rng(seed)
    labels = (rng.random(n) < 0.5).astype(int)
    centers = np.where(labels[:, None] == 1, gap, -gap)
    x = 0.5 * rng.standard_normal((n, d))
    x[:, 0] += centers[:, 0]
    return DomainDataset("blobs", x, labels)


def _model_cfg(d=2, seed=0, pairs=0):
    return ModelConfig(
        input_dim=d, hidden_dims=(8,), feature_dim=8, unfreeze=2,
        classifier_pairs=pairs, seed=seed,
    )


# ----------------------------------------------------------------------
# vanilla trainer


def test_vanilla_learns_separable_blobs():
    train, val = _blobs(seed=1), _blobs(seed=2)
    bundle = build_model(_model_cfg(seed=1))
    cfg = AdaptationConfig(strategy="vanilla", epochs=50, batch_size=32, seed=0)
    history = train_vanilla(bundle, train, cfg, val=val, keep_snapshots=False)
    assert history.records[-1].source_val_f1 >= 0.99


def test_vanilla_lr_zero_keeps_parameters():
    train = _blobs(seed=3)
    bundle = build_model(_model_cfg(seed=2))
    before = bundle.snapshot()
    cfg = AdaptationConfig(strategy="vanilla", epochs=2, lr=0.0, optimizer="sgd", seed=0)
    train_vanilla(bundle, train, cfg, keep_snapshots=False)
    for name, arr in bundle.snapshot().items():
        assert arr.tobytes() == before[name].tobytes(), name


def test_vanilla_history_bitwise_deterministic(tmp_path):
    train, val = _blobs(seed=4), _blobs(seed=5)
    cfg = AdaptationConfig(strategy="vanilla", epochs=4, seed=9)

    def run(path):
        bundle = build_model(_model_cfg(seed=3))
        history = train_vanilla(bundle, train, cfg, val=val, keep_snapshots=False)
        history.to_jsonl(path)
        return path.read_bytes()

    assert run(tmp_path / "a.jsonl") == run(tmp_path / "b.jsonl")


def test_vanilla_warns_on_single_class_data():
    ds = DomainDataset("one", np.random.default_rng(0).normal(size=(50, 2)), np.zeros(50, dtype=int))
    bundle = build_model(_model_cfg(seed=4))
    cfg = AdaptationConfig(strategy="vanilla", epochs=1, seed=0)
    with pytest.warns(UserWarning, match="single class"):
        train_vanilla(bundle, ds, cfg, keep_snapshots=False)


def test_history_jsonl_roundtrip(tmp_path):
    train = _blobs(seed=6)
    bundle = build_model(_model_cfg(seed=5))
    cfg = AdaptationConfig(strategy="vanilla", epochs=3, seed=1)
    history = train_vanilla(bundle, train, cfg, val=_blobs(seed=7), eval_targets=[_blobs(seed=8)],
                            keep_snapshots=False)
    path = tmp_path / "history.jsonl"
    history.to_jsonl(path)
    loaded = read_history_jsonl(path)
    assert loaded.strategy == "vanilla"
    assert loaded.trainable_count == history.trainable_count
    assert [r.epoch for r in loaded.records] == [1, 2, 3]
    assert loaded.records[-1].losses == history.records[-1].losses


# ----------------------------------------------------------------------
# m2s2da


def _shifted_target(n=400, d=2, seed=10, shift=2.5):
    ds = _blobs(n=n, d=d, seed=seed)
    return DomainDataset("target", ds.features + np.array([shift] + [0.0] * (d - 1)), ds.labels)


def test_lambda_zero_reduces_to_vanilla():
    train = _blobs(seed=11)
    target = _shifted_target(seed=12)
    b_v = build_model(_model_cfg(seed=6))
    b_0 = build_model(_model_cfg(seed=6))
    cfg_v = AdaptationConfig(strategy="vanilla", epochs=3, seed=21)
    cfg_0 = AdaptationConfig(strategy="m2s2da", lam=0.0, epochs=3, seed=21)
    h_v = train_vanilla(b_v, train, cfg_v, keep_snapshots=False)
    h_0 = train_m2s2da(b_0, train, target.unlabeled(), cfg_0, keep_snapshots=False)
    assert [r.losses["ce"] for r in h_v.records] == [r.losses["ce"] for r in h_0.records]
    for (n1, p1), (n2, p2) in zip(b_v.parameters(), b_0.parameters()):
        assert p1.data.tobytes() == p2.data.tobytes(), (n1, n2)


def test_identical_domains_keep_md2_small_and_source_f1():
    source, val = _blobs(n=600, seed=13), _blobs(n=300, seed=14)
    target = _blobs(n=600, seed=15)  # same distribution, fresh draw
    cfg_v = AdaptationConfig(strategy="vanilla", epochs=8, seed=2)
    cfg_m = AdaptationConfig(strategy="m2s2da", lam=0.5, epochs=8, seed=2)
    b_v, b_m = build_model(_model_cfg(seed=7)), build_model(_model_cfg(seed=7))
    h_v = train_vanilla(b_v, source, cfg_v, val=val, keep_snapshots=False)
    h_m = train_m2s2da(b_m, source, target.unlabeled(), cfg_m, val=val, keep_snapshots=False)
    f1_gap = abs(h_v.records[-1].source_val_f1 - h_m.records[-1].source_val_f1)
    assert f1_gap < 0.05
    z_s = b_m.extract(Tensor(source.features))
    z_t = b_m.extract(Tensor(target.features))
    assert moment_distance_single(z_s, z_t).item() < 0.5


def test_shifted_target_md2_decreases():
    source = _blobs(n=500, seed=16)
    target = _shifted_target(n=500, seed=17)
    bundle = build_model(_model_cfg(seed=8))

    def full_md2():
        z_s = bundle.extract(Tensor(source.features))
        z_t = bundle.extract(Tensor(target.features))
        return moment_distance_single(z_s, z_t).item()

    before = full_md2()
    cfg = AdaptationConfig(strategy="m2s2da", lam=0.5, epochs=8, seed=3)
    train_m2s2da(bundle, source, target.unlabeled(), cfg, keep_snapshots=False)
    assert full_md2() < before


def test_m2s2da_requires_target():
    bundle = build_model(_model_cfg(seed=9))
    empty = DomainDataset("t", np.zeros((0, 2)))
    with pytest.raises(ConfigError):
        train_m2s2da(bundle, _blobs(seed=18), empty, AdaptationConfig(strategy="m2s2da", epochs=1))


def test_da_strategies_reject_batch_of_one():
    with pytest.raises(ConfigError):
        AdaptationConfig(strategy="m2s2da", batch_size=1).validate()
    AdaptationConfig(strategy="vanilla", batch_size=1).validate()  # fine for vanilla


# ----------------------------------------------------------------------
# m3sda-beta


def _three_sources(seed0=30):
    return [_blobs(n=300, seed=seed0 + i) for i in range(3)]


def test_m3sda_freeze_contracts_during_training():
    sources = _three_sources()
    target = _shifted_target(n=300, seed=40)
    bundle = build_model(_model_cfg(seed=10, pairs=3))
    cfg = AdaptationConfig(strategy="m3sda_beta", epochs=2, batch_size=50, seed=4)

    g_names = {name for name, _ in bundle.extractor_trainable_parameters()}
    head_names = {name for name, _ in bundle.head_trainable_parameters()}
    stash = {}
    violations = []

    def observer(phase, iteration, b):
        params = dict(b.parameters())
        if phase == "step2_pre":
            stash["g"] = {n: params[n].data.copy() for n in g_names}
        elif phase == "step2_post":
            for n in g_names:
                if params[n].data.tobytes() != stash["g"][n].tobytes():
                    violations.append((iteration, "G moved in step 2", n))
        elif phase == "step3_pre":
            stash["heads"] = {n: params[n].data.copy() for n in head_names}
        elif phase == "step3_post":
            for n in head_names:
                if params[n].data.tobytes() != stash["heads"][n].tobytes():
                    violations.append((iteration, "head moved in step 3", n))

    train_m3sda_beta(bundle, sources, target.unlabeled(), cfg, keep_snapshots=False,
                     step_observer=observer)
    assert violations == []


def test_m3sda_one_step_discrepancy_directions():
    # after the classify step has settled (the regime the alternation runs
    # in), step 2 raises the pair disagreement on a fixed target batch and
    # step 3 lowers it; the full 20-init sweep lives in the acceptance suite
    from rumexda.synthdata import default_benchmark, generate

    src_specs, tgt_spec = default_benchmark(n_samples=400)
    corpus = generate(src_specs, tgt_spec, seed=0)
    rng = np.random.default_rng(0)
    up2 = down3 = 0
    trials = 6
    for trial in range(trials):
        mc = ModelConfig(input_dim=16, hidden_dims=(32,), feature_dim=16, unfreeze=2,
                         classifier_pairs=3, dropout=0.0, seed=100 + trial)
        bundle = build_model(mc)
        warm = M3sdaStepper(bundle, AdaptationConfig(strategy="m3sda_beta", optimizer="adam",
                                                     lr=1e-3, seed=trial),
                            np.random.default_rng(trial))
        batches = []
        for ds in corpus.sources:
            idx = rng.integers(0, ds.n, size=64)
            batches.append((ds.features[idx], ds.labels[idx]))
        x_t = corpus.target.features[rng.integers(0, corpus.target.n, size=64)]
        for _ in range(150):
            warm.step_classify(batches, x_t)
        stepper = M3sdaStepper(bundle, AdaptationConfig(strategy="m3sda_beta", optimizer="sgd",
                                                        lr=1e-3, seed=trial),
                               np.random.default_rng(trial))
        before = stepper.discrepancy_eval(x_t)
        stepper.step_max_discrepancy(batches, x_t)
        mid = stepper.discrepancy_eval(x_t)
        stepper.step_min_discrepancy(x_t)
        after = stepper.discrepancy_eval(x_t)
        up2 += mid >= before
        down3 += after <= mid
    assert up2 == trials
    assert down3 == trials


def test_m3sda_pair_count_mismatch():
    sources = _three_sources(seed0=60)
    target = _shifted_target(seed=65)
    bundle = build_model(_model_cfg(seed=11, pairs=2))
    with pytest.raises(ConfigError, match="pairs"):
        train_m3sda_beta(bundle, sources, target.unlabeled(),
                         AdaptationConfig(strategy="m3sda_beta", epochs=1))


def test_m3sda_single_source_degrades_to_pairworthy_m2s2da():
    source = [_blobs(n=200, seed=70)]
    target = _shifted_target(n=200, seed=71)
    bundle = build_model(_model_cfg(seed=12, pairs=1))
    cfg = AdaptationConfig(strategy="m3sda_beta", epochs=2, batch_size=40, seed=5)
    history = train_m3sda_beta(bundle, source, target.unlabeled(), cfg, keep_snapshots=False)
    assert len(history.records) == 2


def test_m3sda_determinism():
    sources = _three_sources(seed0=80)
    target = _shifted_target(n=300, seed=85)
    cfg = AdaptationConfig(strategy="m3sda_beta", epochs=2, batch_size=60, seed=6)

    def run():
        bundle = build_model(_model_cfg(seed=13, pairs=3))
        train_m3sda_beta(bundle, sources, target.unlabeled(), cfg, keep_snapshots=False)
        return bundle.snapshot()

    a, b = run(), run()
    for name in a:
        assert a[name].tobytes() == b[name].tobytes(), name


# ----------------------------------------------------------------------
# ensemble prediction


def test_ensemble_of_identical_heads_equals_single():
    cfg = ModelConfig(input_dim=3, hidden_dims=(), feature_dim=4, classifier_pairs=2, seed=14)
    bundle = build_model(cfg)
    reference = bundle.heads[0]
    for head in bundle.heads[1:]:
        head.linear1.weight.data = reference.linear1.weight.data.copy()
        head.linear1.bias.data = reference.linear1.bias.data.copy()
        head.linear2.weight.data = reference.linear2.weight.data.copy()
        head.linear2.bias.data = reference.linear2.bias.data.copy()
    x = np.random.default_rng(1).normal(size=(6, 3))
    ens = predict_ensemble(bundle, x).data
    z = bundle.extract(Tensor(x))
    single = T.softmax(reference.forward(z, training=False)).data
    assert np.allclose(ens, single, atol=1e-12)


def test_ensemble_averages_opposite_heads():
    cfg = ModelConfig(input_dim=2, hidden_dims=(), feature_dim=2, classifier_pairs=1, seed=15)
    bundle = build_model(cfg)
    for head, big in zip(bundle.heads, (50.0, -50.0)):
        head.linear1.weight.data[:] = 0.0
        head.linear1.bias.data[:] = 0.0
        head.linear2.weight.data[:] = 0.0
        head.linear2.bias.data[:] = [big, -big]
    probs = predict_ensemble(bundle, np.zeros((3, 2))).data
    assert np.allclose(probs, 0.5, atol=1e-12)


def test_ensemble_rows_sum_to_one():
    cfg = ModelConfig(input_dim=4, hidden_dims=(6,), feature_dim=5, classifier_pairs=3, seed=16)
    bundle = build_model(cfg)
    x = np.random.default_rng(2).normal(size=(11, 4))
    probs = predict_ensemble(bundle, x).data
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_pair_set_from_bundle_validates():
    single = build_model(ModelConfig(input_dim=2, hidden_dims=(), feature_dim=2, seed=0))
    with pytest.raises(ConfigError):
        ClassifierPairSet.from_bundle(single)


# ----------------------------------------------------------------------
# dataset plumbing


def test_domain_dataset_split_rows():
    ds = DomainDataset(
        "d", np.arange(10, dtype=float).reshape(5, 2), np.array([0, 1, 0, 1, 1]),
        np.array(["train", "val", "train", "train", "val"]),
    )
    train = ds.rows("train")
    assert train.n == 3
    assert train.labels.tolist() == [0, 0, 1]
    with pytest.raises(DegenerateInputError):
        DomainDataset("x", np.zeros((2, 2))).rows("train")


def test_domain_dataset_validation():
    with pytest.raises(ShapeError):
        DomainDataset("d", np.zeros(5))
    with pytest.raises(ShapeError):
        DomainDataset("d", np.zeros((5, 2)), np.zeros(4))
