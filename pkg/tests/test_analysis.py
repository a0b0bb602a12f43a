import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxnmt import analysis as an
from ctxnmt import evaluation as ev
from ctxnmt import synthetic


def _record(ctx_tokens, rows, src_tokens=None, eid="r0"):
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    src = src_tokens or [f"s{i}" for i in range(rows.shape[0])]
    return an.AttentionRecord(eid, src, ctx_tokens, rows)


# ---------------------------------------------------------------------------
# punctuation and record validation
# ---------------------------------------------------------------------------


def test_punctuation_classes():
    for tok in [".", ",", "!", "?", ";", '"', "(", "-", "--", "..."]:
        assert an.is_punctuation(tok)
    for tok in ["cat", "it's", "x1", ""]:
        assert not an.is_punctuation(tok)


def test_record_shape_validation():
    with pytest.raises(an.AnalysisError, match="shape"):
        an.AttentionRecord("x", ["a"], ["b", "c"], np.ones((1, 3)))


def test_record_row_sum_validation():
    with pytest.raises(an.AnalysisError, match="sum"):
        an.AttentionRecord("x", ["a"], ["b", "c"], [[0.7, 0.7]])


def test_records_file_roundtrip(tmp_path):
    records = [
        _record(["<bos>", "the", "<eos>"], [[0.25, 0.5, 0.25], [0.1, 0.8, 0.1]],
                src_tokens=["it", "fell"], eid="a"),
        _record(["x"], [[1.0]], eid="b"),
    ]
    path = str(tmp_path / "dump.jsonl")
    an.write_records(path, records)
    loaded = an.read_records(path)
    assert [r.example_id for r in loaded] == ["a", "b"]
    assert loaded[0].src_tokens == ["it", "fell"]
    assert loaded[0].ctx_tokens == ["<bos>", "the", "<eos>"]
    np.testing.assert_allclose(loaded[0].weights, records[0].weights, atol=1e-7)


# ---------------------------------------------------------------------------
# useful mass
# ---------------------------------------------------------------------------


def test_useful_mass_hand_fixture():
    record = _record(["<bos>", "the", "cat", ".", "<eos>"],
                     [0.6, 0.1, 0.2, 0.05, 0.05])
    assert an.useful_mass(record) == pytest.approx(0.30)


def test_useful_mass_all_on_role_token():
    record = _record(["<bos>", "word", "<eos>"], [1.0, 0.0, 0.0])
    assert an.useful_mass(record) == 0.0


def test_useful_mass_content_only_context():
    record = _record(["aa", "bb"], [[0.5, 0.5], [0.9, 0.1]])
    per = an.useful_mass(record, per_source_token=True)
    assert per == pytest.approx([1.0, 1.0])


def test_useful_mass_no_content_positions():
    record = _record(["<bos>", "<eos>"], [[0.5, 0.5], [0.2, 0.8]])
    assert an.useful_mass(record) == 0.0


@given(st.lists(st.sampled_from(["<bos>", "<eos>", ".", "cat", "dog", "ran"]),
                min_size=1, max_size=6),
       st.integers(min_value=0, max_value=2**31 - 1))
def test_useful_mass_complements_excluded_mass(ctx_tokens, seed):
    rng = np.random.default_rng(seed)
    row = rng.random(len(ctx_tokens)) + 1e-6
    row /= row.sum()
    record = _record(ctx_tokens, row)
    mask = an.included_context_positions(record)
    per = an.useful_mass(record, per_source_token=True)
    assert 0.0 <= per[0] <= 1.0 + 1e-12
    assert per[0] == pytest.approx(1.0 - row[~mask].sum())


# ---------------------------------------------------------------------------
# word tables
# ---------------------------------------------------------------------------


def _word_records(n, masses):
    """n identical records; source words with fixed per-word useful mass."""
    ctx = ["<bos>", "thing", "<eos>"]
    records = []
    for i in range(n):
        rows = [[1.0 - m, m, 0.0] for m in masses.values()]
        records.append(an.AttentionRecord(str(i), list(masses), ctx, rows))
    return records


def test_top_context_words_ranking():
    records = _word_records(3, {"alpha": 0.9, "beta": 0.5, "gamma": 0.1})
    stats = an.top_context_words(records, min_count=2, k=10)
    assert [s.word for s in stats] == ["alpha", "beta", "gamma"]
    assert stats[0].mean_mass == pytest.approx(0.9)
    assert stats[0].mean_position == pytest.approx(1.0)
    assert stats[1].mean_position == pytest.approx(2.0)
    assert all(s.count == 3 for s in stats)


def test_top_context_words_min_count_threshold():
    records = _word_records(9, {"rare": 0.99})
    assert an.top_context_words(records, min_count=10) == []
    assert len(an.top_context_words(records, min_count=9)) == 1


def test_top_context_words_k_truncates():
    records = _word_records(2, {f"w{i}": 0.1 * i for i in range(8)})
    stats = an.top_context_words(records, min_count=1, k=3)
    assert len(stats) == 3
    assert stats[0].word == "w7"


def test_top_context_words_after_first_filter():
    # "it" sits at position 1 in one record, position 2 in the other
    ctx = ["<bos>", "thing", "<eos>"]
    r1 = an.AttentionRecord("0", ["it", "fell"], ctx,
                            [[0.2, 0.8, 0.0], [1.0, 0.0, 0.0]])
    r2 = an.AttentionRecord("1", ["he", "it"], ctx,
                            [[1.0, 0.0, 0.0], [0.6, 0.4, 0.0]])
    all_stats = {s.word: s for s in an.top_context_words([r1, r2], min_count=1)}
    assert all_stats["it"].count == 2
    assert all_stats["it"].mean_mass == pytest.approx((0.8 + 0.4) / 2)
    assert all_stats["it"].mean_position == pytest.approx(1.5)
    late = {s.word: s for s in an.top_context_words([r1, r2], min_count=1,
                                                    position_filter="after_first")}
    assert late["it"].count == 1
    assert late["it"].mean_mass == pytest.approx(0.4)
    assert late["it"].mean_position == pytest.approx(2.0)
    assert "he" not in late


def test_top_context_words_merges_subword_pieces():
    ctx = ["<bos>", "thing", "<eos>"]
    record = an.AttentionRecord("0", ["hou@@", "se"], ctx,
                                [[0.0, 1.0, 0.0], [0.6, 0.4, 0.0]])
    (stat,) = an.top_context_words([record], min_count=1)
    assert stat.word == "house"
    assert stat.mean_mass == pytest.approx((1.0 + 0.4) / 2)
    assert stat.mean_position == pytest.approx(1.0)


def test_top_context_words_lowercases():
    records = _word_records(2, {"The": 0.5})
    (stat,) = an.top_context_words(records, min_count=2)
    assert stat.word == "the"


def test_top_context_words_bad_filter():
    with pytest.raises(an.AnalysisError):
        an.top_context_words([], position_filter="sometimes")


def test_word_table_rendering():
    # layout check for the ranked-words report
    stats = [an.WordStat("it", 0.376, 5.5, 578)]
    out = ev.render_table(["word", "attn", "pos"],
                          [[s.word, f"{s.mean_mass:.3f}", f"{s.mean_position:.1f}"]
                           for s in stats])
    assert "0.376" in out and "5.5" in out


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------


def test_curves_single_record():
    record = _record(["<bos>", "cat", "<eos>"], [[0.2, 0.6, 0.2], [0.5, 0.3, 0.2]],
                     src_tokens=["a", "b"])
    series = {s.name: s for s in an.curves([record], bleu_per_sentence=[41.0])}
    mass = an.useful_mass(record)
    assert series["mass_vs_source_length"].rows == [(2.0, pytest.approx(mass), 1)]
    assert series["mass_vs_context_length"].rows == [(3.0, pytest.approx(mass), 1)]
    assert series["bleu_vs_source_length"].rows == [(2.0, 41.0, 1)]
    pos_rows = series["mass_vs_source_position"].rows
    assert [r[0] for r in pos_rows] == [1.0, 2.0]
    assert pos_rows[0][1] == pytest.approx(0.6)
    assert pos_rows[1][1] == pytest.approx(0.3)


def test_curves_uniform_attention_is_flat():
    ctx = ["aa", "bb", "cc", "dd"]
    records = [an.AttentionRecord(str(i), ["w"] * 3, ctx, np.full((3, 4), 0.25))
               for i in range(5)]
    series = {s.name: s for s in an.curves(records)}
    means = [row[1] for row in series["mass_vs_source_position"].rows]
    assert means == pytest.approx([1.0, 1.0, 1.0])


def test_curves_bucket_means_hand_fixture():
    ctx = ["x"]
    def rec(eid, n_src):
        return an.AttentionRecord(eid, ["w"] * n_src, ctx, np.ones((n_src, 1)))
    records = [rec("a", 2), rec("b", 2), rec("c", 3), rec("d", 5)]
    series = {s.name: s for s in an.curves(records, bleu_per_sentence=[10, 30, 50, 70])}
    assert series["bleu_vs_source_length"].rows == [
        (2.0, pytest.approx(20.0), 2), (3.0, pytest.approx(50.0), 1),
        (5.0, pytest.approx(70.0), 1)]
    # position cohort defaults to the most common source length (2)
    assert len(series["mass_vs_source_position"].rows) == 2


def test_curves_empty_cohort_error():
    record = _record(["x"], [[1.0]])
    with pytest.raises(an.AnalysisError, match="length 9"):
        an.curves([record], cohort_length=9)


def test_curves_misaligned_bleu():
    record = _record(["x"], [[1.0]])
    with pytest.raises(an.AnalysisError, match="align"):
        an.curves([record], bleu_per_sentence=[1.0, 2.0])


def test_curves_no_records():
    with pytest.raises(an.AnalysisError):
        an.curves([])


def test_write_series_csv(tmp_path):
    path = str(tmp_path / "curve.csv")
    an.write_series(path, an.Series("m", [(2.0, 0.5, 3), (4.0, 0.25, 1)]))
    assert open(path).read() == "bucket,mean,count\n2,0.500000,3\n4,0.250000,1\n"


# ---------------------------------------------------------------------------
# antecedent picks
# ---------------------------------------------------------------------------


def _pick_ann(span=(1, 1), positions=(1, 2), count=None, eid="r0"):
    return ev.CorefAnnotation(
        example_id=eid, pronoun="it", pronoun_index=0, antecedent_span=span,
        antecedent_has_noun=True,
        context_noun_count=len(positions) if count is None else count,
        gender_label="fem", noun_positions=list(positions))


def test_attention_pick_hand_trace():
    record = _record(["the", "cat", "dog"], [0.2, 0.5, 0.3])
    ann = _pick_ann(span=(1, 1), positions=(1, 2))
    pick = an.attention_pick(record, ann)
    assert pick == 1
    assert an.in_span(pick, ann.antecedent_span)
    last = an.heuristic_pick(ann, "last")
    assert last == 2
    assert not an.in_span(last, ann.antecedent_span)


def test_attention_pick_strong_mass_agreement():
    record = _record(["<bos>", "the", "noun3", ".", "<eos>"],
                     [0.05, 0.03, 0.9, 0.01, 0.01])
    assert an.attention_pick(record, _pick_ann(span=(1, 2), positions=(2,))) == 2


def test_attention_pick_tie_takes_lower_index():
    record = _record(["aa", "bb"], [0.5, 0.5])
    assert an.attention_pick(record, _pick_ann()) == 0


def test_attention_pick_skips_excluded_positions():
    record = _record(["<bos>", "word", "."], [0.6, 0.1, 0.3])
    assert an.attention_pick(record, _pick_ann()) == 1


def test_attention_pick_abstains_without_content():
    record = _record(["<bos>", ".", "<eos>"], [0.4, 0.3, 0.3])
    assert an.attention_pick(record, _pick_ann()) is None


def test_attention_pick_bad_pronoun_index():
    record = _record(["x"], [[1.0]])
    ann = _pick_ann()
    ann = ev.CorefAnnotation(ann.example_id, ann.pronoun, 5, ann.antecedent_span,
                             True, 1, "fem", [1])
    with pytest.raises(an.AnalysisError, match="pronoun index"):
        an.attention_pick(record, ann)


def test_attention_pick_invariant_to_excluded_rescaling():
    ann = _pick_ann(span=(1, 2), positions=(1, 2))
    light = _record(["<bos>", "aa", "bb"], [0.2, 0.3, 0.5])
    heavy = _record(["<bos>", "aa", "bb"], [0.6, 0.15, 0.25])
    assert an.attention_pick(light, ann) == an.attention_pick(heavy, ann) == 2


def test_heuristic_picks():
    ann = _pick_ann(positions=(2, 5))
    assert an.heuristic_pick(ann, "first") == 2
    assert an.heuristic_pick(ann, "last") == 5
    rng = np.random.default_rng(0)
    picks = [an.heuristic_pick(ann, "random", np.random.default_rng(s)) for s in range(20)]
    assert set(picks) <= {2, 5}
    assert picks == [an.heuristic_pick(ann, "random", np.random.default_rng(s))
                     for s in range(20)]


def test_heuristic_single_noun_all_agree():
    ann = _pick_ann(positions=(3,))
    rng = np.random.default_rng(1)
    assert an.heuristic_pick(ann, "first") == an.heuristic_pick(ann, "last") == \
        an.heuristic_pick(ann, "random", rng) == 3


def test_heuristic_zero_nouns_abstains():
    ann = _pick_ann(positions=())
    assert an.heuristic_pick(ann, "last") is None


def test_heuristic_unknown_method():
    with pytest.raises(an.AnalysisError):
        an.heuristic_pick(_pick_ann(), "middle")


def test_heuristic_random_needs_rng():
    with pytest.raises(an.AnalysisError):
        an.heuristic_pick(_pick_ann(), "random")


def test_in_span_inclusive():
    assert an.in_span(1, (1, 2)) and an.in_span(2, (1, 2))
    assert not an.in_span(0, (1, 2)) and not an.in_span(3, (1, 2))
    assert not an.in_span(None, (1, 2))


# ---------------------------------------------------------------------------
# agreement reports
# ---------------------------------------------------------------------------


def _agreement_fixture(attention_hits):
    """10 single-noun examples; attention lands in the span for the given ids."""
    ctx = ["<bos>", "the", "noun1", "other", "<eos>"]
    records, annotations = [], []
    for i in range(10):
        hit = i in attention_hits
        row = [0.0, 0.1, 0.7, 0.2, 0.0] if hit else [0.0, 0.1, 0.2, 0.7, 0.0]
        records.append(an.AttentionRecord(str(i), ["it"], ctx, [row]))
        annotations.append(_pick_ann(span=(1, 2), positions=(2,), eid=str(i)))
    return records, annotations


def test_agreement_single_noun_heuristics_all_match():
    records, annotations = _agreement_fixture(attention_hits=range(8))
    report = an.agreement_report(records, annotations, min_nouns=0, seed=0)
    assert report.agreement["first"] == 100.0
    assert report.agreement["last"] == 100.0
    assert report.agreement["random"] == 100.0
    assert report.agreement["attention"] == pytest.approx(80.0)
    assert report.n_examples == 10
    assert report.abstains == {m: 0 for m in an.METHODS}


def test_agreement_attention_always_right():
    records, annotations = _agreement_fixture(attention_hits=range(10))
    report = an.agreement_report(records, annotations)
    assert report.agreement["attention"] == 100.0


def test_agreement_multi_noun_hand_fixture():
    # span covers the first noun only; attention hits in 7 of 10 examples
    ctx = ["<bos>", "nounA", "x", "nounB", "<eos>"]
    records, annotations = [], []
    for i in range(10):
        row = [0.0, 0.6, 0.1, 0.3, 0.0] if i < 7 else [0.0, 0.3, 0.1, 0.6, 0.0]
        records.append(an.AttentionRecord(str(i), ["it"], ctx, [row]))
        annotations.append(_pick_ann(span=(1, 1), positions=(1, 3), eid=str(i)))
    report = an.agreement_report(records, annotations, min_nouns=2, seed=4)
    assert report.agreement["first"] == 100.0
    assert report.agreement["last"] == 0.0
    assert report.agreement["attention"] == pytest.approx(70.0)
    assert 0.0 <= report.agreement["random"] <= 100.0
    rerun = an.agreement_report(records, annotations, min_nouns=2, seed=4)
    assert rerun.agreement == report.agreement


def test_agreement_min_nouns_filters():
    records, annotations = _agreement_fixture(attention_hits=range(10))
    report = an.agreement_report(records, annotations, min_nouns=2)
    assert report.n_examples == 0


def test_agreement_abstains_leave_denominator():
    ctx = ["<bos>", "the", "word", "<eos>"]
    records = [an.AttentionRecord(str(i), ["it"], ctx, [[0.0, 0.2, 0.8, 0.0]])
               for i in range(4)]
    annotations = [
        _pick_ann(span=(2, 2), positions=(2,), eid="0"),
        _pick_ann(span=(2, 2), positions=(2,), eid="1"),
        _pick_ann(span=(2, 2), positions=(), count=0, eid="2"),
        _pick_ann(span=(2, 2), positions=(), count=0, eid="3"),
    ]
    report = an.agreement_report(records, annotations)
    assert report.abstains["last"] == 2
    assert report.agreement["last"] == 100.0       # 2 hits of 2 decided
    assert report.agreement["attention"] == 100.0  # never abstains here


def test_agreement_empty_join():
    records, annotations = _agreement_fixture(attention_hits=())
    for a in annotations:
        a.example_id = "zz" + a.example_id
    with pytest.raises(an.AnalysisError, match="no annotation"):
        an.agreement_report(records, annotations)


def test_agreement_synthetic_distractor_defeats_last_noun():
    # with a distractor present the gold antecedent is never the last noun
    spec = synthetic.SyntheticSpec(noun_inventory=8, distractor_prob=1.0,
                                   size=30, seed=5)
    triples, annotations = synthetic.generate(spec)
    records = []
    for (ctx, src, _), ann in zip(triples, annotations):
        ctx_tokens = ["<bos>"] + ctx.split() + ["<eos>"]
        src_tokens = src.split()
        w = np.full((len(src_tokens), len(ctx_tokens)), 1.0 / len(ctx_tokens))
        records.append(an.AttentionRecord(ann.example_id, src_tokens, ctx_tokens, w))
    report = an.agreement_report(records, annotations, min_nouns=2)
    assert report.agreement["last"] == 0.0
    assert report.agreement["first"] == 100.0
    assert report.n_examples == 30


def test_agreement_report_rendering():
    # layout check for the agreement table
    values = {"random": 40.0, "first": 36.0, "last": 52.0, "attention": 58.0}
    out = ev.render_table(["method", "agreement"],
                          [[m, f"{values[m]:.0f}"] for m in an.METHODS])
    for cell in ["40", "36", "52", "58"]:
        assert cell in out


# ---------------------------------------------------------------------------
# confusion tables
# ---------------------------------------------------------------------------


def test_confusion_both_always_right():
    spans = [(1, 2)] * 4
    table = an.confusion_table([1, 2, 1, 1], [2, 2, 1, 2], spans)
    np.testing.assert_allclose(table, [[100.0, 0.0], [0.0, 0.0]])


def test_confusion_hand_fixture():
    spans = [(1, 1)] * 8
    picks_a = [1, 1, 1, 1, 0, 0, 1, 0]        # right in 5 of 8
    picks_b = [1, 1, 0, 0, 1, 1, None, 0]     # right in 3, abstain counts wrong
    table = an.confusion_table(picks_a, picks_b, spans)
    np.testing.assert_allclose(table, [[25.0, 37.5], [25.0, 12.5]])
    assert table.sum() == pytest.approx(100.0)


def test_confusion_misaligned():
    with pytest.raises(an.AnalysisError):
        an.confusion_table([1], [1, 2], [(0, 1), (0, 1)])
    with pytest.raises(an.AnalysisError):
        an.confusion_table([], [], [])


def test_confusion_rendering():
    # layout check for the paired right/wrong table
    table = np.array([[53.0, 19.0], [24.0, 4.0]])
    out = ev.render_table(["", "b right", "b wrong"],
                          [["a right", "53", "19"], ["a wrong", "24", "4"]])
    assert "53" in out and "19" in out and "24" in out
    assert table.sum() == pytest.approx(100.0)


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------


def test_heatmap_single_cell(tmp_path):
    path = str(tmp_path / "map.svg")
    an.heatmap_export(_record(["word"], [[1.0]], src_tokens=["it"]), path)
    svg = open(path).read()
    assert 'fill-opacity="1.000000"' in svg
    assert svg.count("<rect") == 2                 # background + one cell
    assert ">word<" in svg and ">it<" in svg


def test_heatmap_regenerates_bit_identically(tmp_path):
    record = _record(["<bos>", "the", "cat", "<eos>"],
                     [[0.4, 0.3, 0.2, 0.1], [0.1, 0.2, 0.3, 0.4]],
                     src_tokens=["it", "fell"])
    p1, p2 = str(tmp_path / "a.svg"), str(tmp_path / "b.svg")
    an.heatmap_export(record, p1)
    an.heatmap_export(record, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_heatmap_renders_all_cells(tmp_path):
    record = _record(["a", "b", "c"], np.full((2, 3), 1 / 3), src_tokens=["x", "y"])
    path = str(tmp_path / "grid.svg")
    an.heatmap_export(record, path)
    svg = open(path).read()
    assert svg.count("<rect") == 2 * 3 + 1
    assert svg.count("<text") == 2 + 3


def test_heatmap_escapes_special_tokens(tmp_path):
    record = _record(["<bos>", "a&b"], [[0.5, 0.5]], src_tokens=["it"])
    path = str(tmp_path / "esc.svg")
    an.heatmap_export(record, path)
    svg = open(path).read()
    assert "&lt;bos&gt;" in svg and "a&amp;b" in svg


def test_heatmap_unwritable_path():
    with pytest.raises(OSError):
        an.heatmap_export(_record(["x"], [[1.0]]), "/nonexistent/dir/map.svg")
