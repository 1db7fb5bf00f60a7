import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midaslab import effects as fx
from midaslab.attribution import ALL, INTERACTION_TYPES, interaction_masks
from midaslab.effects import (
    EmptyInputError,
    OracleModel,
    bootstrap_ci,
    filter_correct,
    miate,
    miate_from_probs,
    midas,
    midas_from_scores,
    relation_check,
)
from midaslab.synth import GenConfig, build_triples, generate

from conftest import SMALL
from midaslab.model import MultimodalTransformer


class TableModel:
    def __init__(self, table, default=0.5):
        self.table = table
        self.default = default

    def predict_prob(self, sample):
        return self.table.get(sample.id, self.default)


class ConstantModel:
    def __init__(self, c):
        self.c = c

    def predict_probs(self, samples):
        return np.full(len(samples), self.c)


@pytest.fixture(scope="module")
def triples():
    data = generate(GenConfig(text_groups=3, image_groups=3, both_groups=2, extra_00=12, seed=7))
    return build_triples(data, k=3, seed=0)


def test_perfect_model_has_unit_miate(triples):
    for analysis in ("image", "text"):
        assert miate(OracleModel(), triples, analysis).mean == 1.0


@pytest.mark.parametrize("c", [0.0, 0.2, 0.5, 0.9])
def test_constant_model_has_minus_c(triples, c):
    est = miate(ConstantModel(c), triples, "image")
    assert est.mean == pytest.approx(-c, abs=1e-15)


def test_hand_built_theta_table(triples):
    chosen = fx.select(triples, "image")[:3]
    table = {}
    values = [(0.9, 0.2, 0.1), (0.6, 0.5, 0.4), (0.3, 0.0, 0.8)]
    for t, (h, ib, tb) in zip(chosen, values):
        table.update({t.hateful.id: h, t.image_benign.id: ib, t.text_benign.id: tb})
    est = miate(TableModel(table), chosen, "image")
    assert est.mean == pytest.approx(((0.9 - 0.3) + (0.6 - 0.9) + (0.3 - 0.8)) / 3, abs=1e-15)


def test_analysis_selection_uses_original_confounders(triples):
    image = fx.select(triples, "image")
    text = fx.select(triples, "text")
    assert all(t.image_benign_provenance == "original" for t in image)
    assert all(t.text_benign_provenance == "original" for t in text)
    # 3 image-only groups x 3 picks + 2 complete groups; same for text
    assert (len(image), len(text)) == (11, 11)
    with pytest.raises(ValueError):
        fx.select(triples, "audio")


def test_empty_input_errors():
    with pytest.raises(EmptyInputError):
        miate(OracleModel(), [], "image")
    with pytest.raises(EmptyInputError):
        midas_from_scores([], {}, "text")


def test_bootstrap_is_seeded_and_ordered():
    x = np.random.default_rng(0).normal(size=50)
    assert bootstrap_ci(x, seed=3) == bootstrap_ci(x, seed=3)
    lo, hi = bootstrap_ci(x, seed=3)
    assert lo <= x.mean() <= hi
    assert bootstrap_ci(np.ones(5)) == (1.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=24, max_size=24), st.integers(1, 10))
def test_per_triple_effects_bounded_and_union_is_weighted_mean(thetas, cut):
    data = generate(GenConfig(both_groups=12, seed=1))
    triples = build_triples(data)
    probs = {s.id: p for s, p in zip(data, thetas + thetas[:12])}
    effects = fx.triple_effects(triples, lambda s: probs[s.id])
    assert np.all(effects >= -2) and np.all(effects <= 1)
    est = miate_from_probs(triples, probs, "image", n_boot=50)
    assert -2 <= est.ci_low <= est.ci_high <= 1
    a = miate_from_probs(triples[:cut], probs, "image", n_boot=10).mean
    b = miate_from_probs(triples[cut:], probs, "image", n_boot=10).mean
    assert est.mean == pytest.approx((cut * a + (12 - cut) * b) / 12, abs=1e-12)


def test_aggregate_picks_switch(triples):
    probs = {s.id: float(i % 7) / 7 for i, s in enumerate(fx._unique_members(triples))}
    indiv = miate_from_probs(triples, probs, "image", n_boot=10)
    grouped = miate_from_probs(triples, probs, "image", n_boot=10, aggregate_picks=True)
    assert (indiv.n, grouped.n) == (11, 5)


def _scores(triples, fn):
    return {s.id: fn(s) for s in fx._unique_members(triples)}


def test_midas_identical_records_cancel(triples):
    rec = {"within_text": 0.3, "within_image": -0.2, "cross_modal": 0.7, ALL: 0.1}
    out = midas_from_scores(triples, _scores(triples, lambda s: rec), "text")
    assert {k: v.mean for k, v in out.items()} == pytest.approx({k: -v for k, v in rec.items()})


def test_midas_unit_case(triples):
    one = {k: 1.0 for k in (ALL,) + INTERACTION_TYPES}
    zero = {k: 0.0 for k in one}
    out = midas_from_scores(triples, _scores(triples, lambda s: one if s.label == 1 else zero), "image")
    assert all(v.mean == 1.0 for v in out.values())


def test_midas_all_is_mask_weighted_combination(triples):
    model = MultimodalTransformer.init(SMALL.__class__(**{**SMALL.__dict__, "max_text": 6, "region_dim": 16,
                                                          "vocab_size": 64, "max_regions": 4}))
    sel = fx.select(triples, "image")[:2]
    out = midas(model, sel, "image", "attattr", m_steps=4, n_boot=10)
    sizes = interaction_masks(model.layout(sel[0].hateful)).sizes()
    combined = sum(out[t].mean * sizes[t] for t in INTERACTION_TYPES) / sum(sizes.values())
    assert out[ALL].mean == pytest.approx(combined, abs=1e-12)


def test_midas_rejects_unknown_variant(triples):
    with pytest.raises(ValueError):
        midas(OracleModel(), triples, "image", variant="magnitude")


def test_filter_correct_cases(triples):
    assert filter_correct(OracleModel(), triples) == triples
    assert filter_correct(ConstantModel(0.5), triples) == []
    t0, t1, t2 = triples[:3]
    table = {
        t0.hateful.id: 0.9, t0.text_benign.id: 0.1, t0.image_benign.id: 0.2,
        t1.hateful.id: 0.9, t1.text_benign.id: 0.6, t1.image_benign.id: 0.2,
        t2.hateful.id: 0.4, t2.text_benign.id: 0.1, t2.image_benign.id: 0.1,
    }
    assert filter_correct(TableModel(table), [t0, t1, t2]) == [t0]


def test_relation_uniform_weights_exact():
    rng = np.random.default_rng(0)
    for n in (1, 5, 100):
        a1, a0 = rng.uniform(size=(n, 3)), rng.uniform(size=(n, 3))
        g = np.full((n, 3), 1.0 / n)
        rep = relation_check(a1, g, a0, g)
        assert rep.max_discrepancy <= 1e-12


def test_relation_single_sample_exact():
    rep = relation_check([0.7], [1.0], [0.25], [1.0])
    assert rep.midas_sum[()] == 0.7 - 0.25
    assert rep.discrepancy[()] == 0.0


def test_relation_perturbed_weights_bounded():
    rng = np.random.default_rng(1)
    n = 40
    a1, a0 = rng.uniform(size=n), rng.uniform(size=n)
    for _ in range(20):
        g1 = np.full(n, 1 / n) * (1 + rng.uniform(-0.1, 0.1, size=n))
        g0 = np.full(n, 1 / n) * (1 + rng.uniform(-0.1, 0.1, size=n))
        g1, g0 = g1 / g1.sum(), g0 / g0.sum()
        rep = relation_check(a1, g1, a0, g0)
        bound = max(np.abs(a1).max(), np.abs(a0).max()) * (np.abs(g1 - 1 / n).sum() + np.abs(g0 - 1 / n).sum())
        assert rep.max_discrepancy <= bound + 1e-15
        assert rep.max_discrepancy > 0


def test_relation_rejects_unnormalized_weights():
    with pytest.raises(ValueError):
        relation_check([0.1, 0.2], [0.5, 0.6], [0.1, 0.2], [0.5, 0.5])
    with pytest.raises(ValueError):
        relation_check([0.1], [1.0], [0.1, 0.2], [0.5, 0.5])


def test_report_rows_and_csv(tmp_path, triples):
    report = fx.effect_report(OracleModel(), triples, name="oracle", variants=(), n_boot=20)
    rows = report.rows()
    assert [(r["analysis"], r["measure"], r["mean"]) for r in rows] == [("image", "miate", "1.0"), ("text", "miate", "1.0")]
    path = tmp_path / "e.csv"
    fx.write_reports([report], path, tmp_path / "e.json")
    back = fx.read_report_csv(path)
    assert list(back[0]) == list(fx.CSV_FIELDS)
    assert back[0]["n"] == "11"
