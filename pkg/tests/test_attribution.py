import json

import numpy as np
import pytest

from midaslab.attribution import (
    ALL,
    INTERACTION_TYPES,
    AttributionRecord,
    LinearAttentionProbe,
    attattr_by_type,
    attattr_head,
    attention_only_score,
    attribute,
    gradient_only_score,
    interaction_masks,
    load_attribution_means,
    local_explain,
    quadrature_nodes,
    save_attributions,
    type_means,
)
from midaslab.model import SequenceLayout

from conftest import random_sample
from gradcheck import central_diff


def record_from(layout, attattr, n_heads=2):
    S = layout.length
    zeros = np.zeros((n_heads, S, S))
    return AttributionRecord("r", layout, np.asarray(attattr, dtype=float), zeros, zeros, 1, 1)


def test_mask_sizes_three_by_two():
    sizes = interaction_masks(SequenceLayout(3, 2)).sizes()
    assert sizes == {"within_text": 9, "within_image": 4, "cross_modal": 12}


def test_mask_sizes_smallest_case():
    sizes = interaction_masks(SequenceLayout(1, 1)).sizes()
    assert sizes == {"within_text": 1, "within_image": 1, "cross_modal": 2}


@pytest.mark.parametrize("n_text,n_regions", [(1, 1), (3, 2), (6, 4), (2, 5)])
def test_masks_partition_grid(n_text, n_regions):
    lay = SequenceLayout(n_text, n_regions)
    m = interaction_masks(lay)
    stacked = np.stack([m.within_text, m.within_image, m.cross_modal, m.excluded]).astype(int)
    assert np.array_equal(stacked.sum(axis=0), np.ones((lay.length, lay.length), dtype=int))
    for p in lay.markers:
        assert m.excluded[p].all() and m.excluded[:, p].all()


def test_type_means_zero_and_constant_cases():
    lay = SequenceLayout(3, 2)
    S = lay.length
    assert all(v == 0 for v in type_means(np.zeros((2, S, S)), interaction_masks(lay)).values())
    ones = np.where(interaction_masks(lay).excluded, 123.0, 1.0)[None].repeat(2, axis=0)
    assert all(v == 1 for v in type_means(ones, interaction_masks(lay)).values())


def test_type_means_hand_built_two_head_record():
    lay = SequenceLayout(1, 1)  # S = 4: start, t, sep, r
    x = np.zeros((2, 4, 4))
    x[0, 1, 1], x[1, 1, 1] = 2.0, 4.0  # within text
    x[0, 3, 3] = 6.0  # within image
    x[0, 1, 3], x[1, 3, 1] = 1.0, -3.0  # cross modal
    means = type_means(x, interaction_masks(lay))
    assert means == {"within_text": 3.0, "within_image": 3.0, "cross_modal": -0.5, ALL: (6 + 6 - 2) / 8}


def test_all_is_mask_size_weighted_combination():
    lay = SequenceLayout(4, 3)
    x = np.random.default_rng(0).normal(size=(3, lay.length, lay.length))
    masks = interaction_masks(lay)
    means = type_means(x, masks)
    sizes = masks.sizes()
    combined = sum(means[t] * sizes[t] for t in INTERACTION_TYPES) / sum(sizes.values())
    assert means[ALL] == pytest.approx(combined, abs=1e-14)
    total = sum(x[:, m].sum() for m in masks.by_type().values())
    assert sum(means[t] * sizes[t] * 3 for t in INTERACTION_TYPES) == pytest.approx(total, abs=1e-12)


def test_quadrature_nodes():
    assert np.allclose(quadrature_nodes(4, "midpoint"), [0.125, 0.375, 0.625, 0.875])
    assert np.allclose(quadrature_nodes(4, "right"), [0.25, 0.5, 0.75, 1.0])
    with pytest.raises(ValueError):
        quadrature_nodes(0)
    with pytest.raises(ValueError):
        quadrature_nodes(3, "left")


def test_linear_model_attattr_is_exact_for_any_m(small_model, rng):
    s = random_sample(rng)
    coeffs = rng.normal(size=(2, 7, 7))
    probe = LinearAttentionProbe(small_model, coeffs)
    A = small_model.last_attention(s)
    for m in (1, 3, 17):
        for rule in ("midpoint", "right"):
            assert np.abs(attribute(probe, s, m, rule).attattr - A * coeffs).max() <= 1e-12


def test_single_step_is_attention_times_gradient(small_model, rng):
    s = random_sample(rng)
    A = small_model.last_attention(s)
    _, grad = small_model.objective_with_attention(s, A[None])
    rec = attribute(small_model, s, m_steps=1, rule="right")
    assert np.array_equal(rec.attattr, A * grad[0])


def test_attattr_head_selects_head_and_validates(small_model, rng):
    s = random_sample(rng)
    rec = attribute(small_model, s, 5)
    assert np.array_equal(attattr_head(small_model, s, 1, 5), rec.attattr[1])
    with pytest.raises(IndexError):
        attattr_head(small_model, s, 2, 5)


def test_completeness_on_random_model(small_model, rng):
    s = random_sample(rng)
    rec = attribute(small_model, s, 300)
    A = small_model.last_attention(s)
    values, _ = small_model.objective_with_attention(s, np.stack([A, 0 * A]))
    gap = values[0] - values[1]
    assert abs(rec.attattr.sum() - gap) <= 1e-3 * abs(gap)


def test_m_step_convergence_is_monotone(small_model, rng):
    s = random_sample(rng)
    diffs = []
    for m in (10, 50, 150, 300):
        diffs.append(np.abs(attribute(small_model, s, 2 * m).attattr - attribute(small_model, s, m).attattr).max())
    assert all(b < a for a, b in zip(diffs, diffs[1:])), diffs


def test_record_means_match_type_means(small_model, rng):
    s = random_sample(rng)
    rec = attattr_by_type(small_model, s, 10)
    masks = interaction_masks(rec.layout)
    assert rec.type_means == type_means(rec.attattr, masks)
    assert rec.layer == small_model.config.n_layers - 1 and rec.m_steps == 10


def test_attention_only_score_uniform_case(small_model, rng):
    s = random_sample(rng, n_text=1, n_regions=1)
    probe = LinearAttentionProbe(small_model, np.zeros((2, 4, 4)))
    probe.last_attention = lambda sample: np.full((2, 4, 4), 0.25)
    means = attention_only_score(probe, s)
    assert all(v == 0.25 for v in means.values())


def test_attention_only_partition_of_unity(small_model, rng):
    s = random_sample(rng, n_text=3, n_regions=2)
    A = small_model.last_attention(s)
    lay = small_model.layout(s)
    masks = interaction_masks(lay)
    # per content row, the masked entries plus the two marker columns carry the full unit mass
    for row in [*lay.text, *lay.image]:
        inside = sum(A[:, row, m[row]].sum() for m in masks.by_type().values())
        markers = A[:, row, list(lay.markers)].sum()
        assert inside + markers == pytest.approx(2.0, abs=1e-12)


def test_attention_only_matches_forward_and_ignores_head(small_model, rng):
    s = random_sample(rng)
    expected = type_means(small_model.forward(s).attention[-1], interaction_masks(small_model.layout(s)))
    assert attention_only_score(small_model, s) == expected
    params = dict(small_model.params)
    params["w_cls"] = params["w_cls"] * -3.0
    assert attention_only_score(small_model.with_params(params), s) == expected


def test_gradient_only_zero_when_values_are_zero(small_model, rng):
    params = dict(small_model.params)
    last = small_model.config.n_layers - 1
    params[f"l{last}.wv"] = np.zeros_like(params[f"l{last}.wv"])
    means = gradient_only_score(small_model.with_params(params), random_sample(rng))
    assert all(v == 0 for v in means.values())


def test_gradient_only_linear_case(small_model, rng):
    s = random_sample(rng)
    coeffs = rng.normal(size=(2, 7, 7))
    probe = LinearAttentionProbe(small_model, coeffs)
    assert gradient_only_score(probe, s) == pytest.approx(type_means(coeffs, interaction_masks(probe.layout(s))))


def test_gradient_only_finite_differences_on_entries(small_model, rng):
    s = random_sample(rng)
    A = small_model.last_attention(s)
    _, grad = small_model.objective_with_attention(s, A[None])
    for h, i, j in [(0, 1, 2), (1, 4, 5), (0, 6, 1)]:

        def f(x, h=h, i=i, j=j):
            B = A.copy()
            B[h, i, j] = x[0]
            return float(np.diff(small_model.logits_with_attention(s, B))[0])

        numeric = central_diff(f, np.array([A[h, i, j]]))[0]
        assert abs(grad[0, h, i, j] - numeric) <= 1e-4 * max(abs(numeric), 1e-8)


def test_local_explain_single_spike():
    lay = SequenceLayout(3, 2)
    x = np.zeros((2, lay.length, lay.length))
    x[0, lay.text[1], lay.image[1]] = 5.0
    out = local_explain(record_from(lay, x))
    assert out["cross_modal"]["tokens"][0] == 1
    assert out["cross_modal"]["regions"][0] == 1


def test_local_explain_ties_follow_position_order():
    lay = SequenceLayout(4, 3)
    out = local_explain(record_from(lay, np.zeros((2, lay.length, lay.length))))
    assert out["within_text"]["tokens"] == [0, 1, 2, 3]
    assert out["within_image"]["regions"] == [0, 1, 2]
    assert out["within_text"]["regions"] == []


def test_local_explain_hand_ranking():
    lay = SequenceLayout(3, 2)  # text at 1..3, image at 5..6
    x = np.zeros((1, lay.length, lay.length))
    x[0, 1, 2] = 1.0   # text0 -> text1
    x[0, 3, 3] = 3.0   # text2 self
    x[0, 2, 1] = -0.5  # text1 -> text0
    x[0, 5, 6] = 2.0   # region0 -> region1
    x[0, 6, 6] = 0.5
    out = local_explain(record_from(lay, x, n_heads=1), top_tokens=2, top_regions=1)
    # scores: text0 = 1 - 0.5 + (-0.5 + 1) = 1.0, text1 = 1.0, text2 = 6.0; region1 = 2 + 1 = 3
    assert out["within_text"]["tokens"] == [2, 0]
    assert out["within_image"]["regions"] == [1]


def test_local_explain_truncates_and_validates():
    lay = SequenceLayout(2, 1)
    rec = record_from(lay, np.zeros((2, lay.length, lay.length)))
    assert local_explain(rec, top_tokens=50)["within_text"]["tokens"] == [0, 1]
    with pytest.raises(ValueError):
        local_explain(rec, top_tokens=0)


def test_attribution_dump_round_trip(tmp_path, small_model, rng):
    samples = [random_sample(rng, sid=f"s{k}") for k in range(3)]
    records = [attribute(small_model, s, 4) for s in samples]
    path = tmp_path / "attr.jsonl"
    save_attributions(records, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 3 and "explanation" in json.loads(lines[0])
    means = load_attribution_means(path)
    assert means["s1"] == records[1].means
