import json

import numpy as np
import pytest

from conftest import toy_config
from goldood.data import DatasetBundle, OodRecipe, apply_recipe, make_sbm_toy
from goldood.errors import ContractError
from goldood.evaluation import evaluate, score_nodes
from goldood.models import GcnModel, embed
from goldood.pipeline import (
    CONFIG_KEYS,
    TrainConfig,
    TrainingDivergence,
    extract_embeddings,
    train_baseline,
    train_gold,
    write_manifest,
)


def tiny(**kw):
    base = dict(rounds=2, M1=5, M2=3, hidden=8, det_hidden=8, generator="vae", vae_enc_hidden=16, vae_dec_hidden=16)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def graph():
    return make_sbm_toy(30, 0.2, 0.02, 6, 2, seed=0)


def test_config_round_trip_and_digest():
    cfg = TrainConfig(seed=3, mu=0.5)
    assert TrainConfig.from_flat(cfg.to_flat()) == cfg
    assert cfg.digest() == TrainConfig(seed=3, mu=0.5).digest() != TrainConfig(seed=4, mu=0.5).digest()
    assert set(cfg.to_flat()) == set(CONFIG_KEYS)


def test_config_coercion_and_rejection():
    cfg = TrainConfig.from_flat({"train.M1": "7", "weights.mu": 1, "prop.k": 2.0})
    assert cfg.M1 == 7 and cfg.mu == 1.0 and cfg.k == 2
    for bad in ({"bogus": 1}, {"train.M1": 2.5}, {"train.M1": 0}, {"prop.alpha": 2}, {"generator.kind": "gan"},
                {"weights.dreg_mode": "down"}, {"margins.t_id": 5}, {"ldm.beta1": 0.5}):
        with pytest.raises(ContractError):
            TrainConfig.from_flat(bad)


def test_gold_is_deterministic(graph):
    a, gen_a, hist_a = train_gold(graph, tiny(seed=5))
    b, gen_b, hist_b = train_gold(graph, tiny(seed=5))
    assert a.gcn.store.digest() == b.gcn.store.digest()
    assert a.detector.store.digest() == b.detector.store.digest()
    assert gen_a.store.digest() == gen_b.store.digest()
    assert hist_a.to_json() == hist_b.to_json()
    c, _, _ = train_gold(graph, tiny(seed=6))
    assert c.gcn.store.digest() != a.gcn.store.digest()


def test_callback_order(graph):
    events = []
    train_gold(graph, tiny(), callback=lambda ev, r, stores: events.append((ev, r)))
    expected = [(ev, r) for r in range(2) for ev in ("step1_start", "step1_end", "step2_start", "step2_end")]
    assert events == expected


def test_m2_zero_leaves_classifier_untouched(graph):
    cfg = tiny(M2=0)
    model, _, hist = train_gold(graph, cfg)
    init = GcnModel.init(graph.num_features, cfg.hidden, graph.num_classes, cfg.layers,
                         np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(5)[0]))
    assert model.gcn.store.digest() == init.store.digest()
    assert all(r.epochs_run == 0 for r in hist.rounds)


def test_history_records_each_round(graph):
    _, _, hist = train_gold(graph, tiny(rounds=3, M1=4))
    assert [r.round for r in hist.rounds] == [0, 1, 2]
    for r in hist.rounds:
        assert len(r.gen_loss) == 4 and r.epochs_run == len(r.step2) == 3
        assert set(r.step2[0]) == {"total", "cls", "ereg", "unc", "dreg", "acc"}
    json.dumps(hist.to_json())


def test_accuracy_drop_stops_step_two(graph):
    # a huge GNN learning rate wrecks accuracy, which must end the epoch loop early
    _, _, hist = train_gold(graph, tiny(M2=8, warmup_epochs=30, lr_gnn=5.0, delta_acc=1.0))
    assert any(r.early_stopped for r in hist.rounds)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(graph):
    with pytest.raises(TrainingDivergence):
        train_gold(graph, tiny(lr_gnn=1e200))


def test_baselines(graph):
    bundle = apply_recipe(DatasetBundle(graph), OodRecipe("structure", seed=1))
    cfg = tiny(baseline_epochs=40)
    for kind in ("msp", "energy", "gnnsafe"):
        model = train_baseline(graph, kind, cfg)
        assert model.detector is None and model.method == kind
        assert evaluate(model, bundle).id_accuracy > 60
    exposed = train_baseline(graph, "gnnsafe_pp", cfg, exposure=bundle.ood_sets["structure"])
    assert exposed.method == "gnnsafe_pp"
    with pytest.raises(ContractError):
        train_baseline(graph, "gnnsafe_pp", cfg)
    with pytest.raises(ContractError):
        train_baseline(graph, "energy", cfg, exposure=bundle.ood_sets["structure"])
    with pytest.raises(ContractError):
        train_baseline(graph, "odin", cfg)


def test_manifest_isolates_timing(tmp_path):
    cfg = TrainConfig(seed=1)
    write_manifest(tmp_path, cfg, "energy", wall_clock=1.5, extra={"dataset_digest": "x"})
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["config_hash"] == cfg.digest() and m["dataset_digest"] == "x"
    assert set(m["timing"]) == {"timestamp", "wall_clock_seconds"}


def test_zero_weights_reduce_to_plain_classification(sbm_bundle):
    g = sbm_bundle.id_graph
    cfg = TrainConfig(mu=0.0, lam=0.0, gamma=0.0, rounds=3, M1=5, M2=10, generator="vae", delta_acc=100.0)
    gold, _, hist = train_gold(g, cfg)
    plain = train_baseline(g, "energy", cfg)
    train = g.masks["train"]
    acc = lambda m: 100.0 * np.mean(embed(m.gcn, g)[1][train].argmax(axis=1) == g.labels[train])
    assert abs(acc(gold) - acc(plain)) <= 1.0
    assert hist.rounds[-1].train_acc == pytest.approx(acc(gold))


def test_msp_and_energy_share_weights_and_gnnsafe_k0_is_energy(graph):
    cfg = tiny(baseline_epochs=20, k=0)
    msp, energy = train_baseline(graph, "msp", cfg), train_baseline(graph, "energy", cfg)
    assert msp.gcn.store.digest() == energy.gcn.store.digest()
    np.testing.assert_array_equal(score_nodes(energy, graph, "gnnsafe", k=0), score_nodes(energy, graph, "energy"))


def test_exposure_helps_the_energy_regulariser(sbm_bundle):
    g = sbm_bundle.id_graph
    cfg = TrainConfig(baseline_epochs=150)
    plain = evaluate(train_baseline(g, "gnnsafe", cfg), sbm_bundle)
    exposed = evaluate(train_baseline(g, "gnnsafe_pp", cfg, sbm_bundle.ood_sets["feature"]), sbm_bundle, method="gnnsafe")
    assert exposed.average["fpr95"] <= plain.average["fpr95"]


def test_extract_embeddings_matches_forward(graph):
    gcn = GcnModel.init(graph.num_features, 5, graph.num_classes, 2, 0)
    H = extract_embeddings(gcn, graph)
    assert H.shape == (graph.masks["train"].size, 5)
    np.testing.assert_array_equal(H, embed(gcn, graph)[0][graph.masks["train"]])
    blank = graph.replace(features=np.zeros_like(graph.features))
    assert not extract_embeddings(gcn, blank).any()


@pytest.mark.xfail(reason="measured: the e' gap peaks in the first rounds and then narrows on this fixture", strict=False)
def test_transformed_gap_widens_every_round(sbm_bundle):
    _, _, hist = train_gold(sbm_bundle.id_graph, toy_config())
    gaps = [r.mean_e_prime_pood - r.mean_e_prime_id for r in hist.rounds]
    assert all(b > a for a, b in zip(gaps, gaps[1:])), gaps
