import pytest
from hypothesis import given
from hypothesis import strategies as st

from entnorm.ann_index import ForestConfig
from entnorm.encoder import EncoderConfig, new_model
from entnorm.pairs import (
    PairSet,
    TrainingPair,
    generate_positive_pairs,
    generate_same_name_variants,
    generate_variation_pairs,
    initial_pairs,
    labeled_variant_pairs,
    mine_hard_negatives,
    parse_family_map,
    sample_negative_pairs,
)
from entnorm.refset import ParseError, ReferenceSet
from entnorm.retrieval import embed_reference
from entnorm.strsim import MEASURES, levenshtein_sim

REF = ReferenceSet.from_pairs([
    ("P1", "FOX P2"), ("P1", "FOX-P2"), ("P1", "forkhead box P2"),
    ("P2", "Ras"), ("P2", "RAS p21"),
    ("P3", "RAS"), ("P3", "kinase 3"),
    ("P4", "single"),
])


def test_positive_pairs_cross_product():
    pairs = generate_positive_pairs(REF)
    p1 = {(p.name_a, p.name_b) for p in pairs if p.name_a in REF["P1"].names}
    assert p1 == {("FOX P2", "FOX-P2"), ("FOX P2", "forkhead box P2"), ("FOX-P2", "forkhead box P2")}
    assert all(p.y == 1.0 and p.source == "positive" for p in pairs)
    assert not any("single" in (p.name_a, p.name_b) for p in pairs)


def test_positive_cap():
    big = ReferenceSet.from_pairs([("E", f"name {i}") for i in range(100)])
    pairs = generate_positive_pairs(big, cap_per_entity=50, seed=3)
    assert len(pairs) == 50
    assert pairs == generate_positive_pairs(big, cap_per_entity=50, seed=3)


def test_negative_sampling():
    two = ReferenceSet.from_pairs([("A", f"a{i}") for i in range(5)] + [("B", f"b{i}") for i in range(5)])
    negs = sample_negative_pairs(two, 10, seed=1)
    assert len(negs) == 10
    assert all(p.y == 0.0 and p.source == "random_negative" for p in negs)
    assert negs == sample_negative_pairs(two, 10, seed=1)
    for p in negs:
        assert two.entity_of(p.name_a).isdisjoint(two.entity_of(p.name_b))


def test_negative_rejects_shared_strings():
    shared = ReferenceSet.from_pairs([("A", "RAS"), ("A", "x"), ("B", "RAS"), ("B", "y")])
    negs = sample_negative_pairs(shared, 2, seed=0)
    assert all(p.name_a != p.name_b for p in negs)
    with pytest.raises(ValueError):
        sample_negative_pairs(ReferenceSet.from_pairs([("A", "x")]), 1)


def test_same_name_variants():
    assert "FOXP2" in generate_same_name_variants("FOX P2")
    assert "FOXP2" in generate_same_name_variants("FOX-P2")
    assert {"RAS", "ras"} <= set(generate_same_name_variants("Ras"))
    assert generate_same_name_variants("abc") == ["ABC"]
    assert generate_same_name_variants("--") == []


@given(st.text(min_size=1, max_size=15))
def test_variants_distinct_and_nonempty(name):
    vs = generate_same_name_variants(name)
    assert len(vs) == len(set(vs))
    assert name not in vs
    assert all(vs)


def test_variant_labels_come_from_measures():
    pairs = labeled_variant_pairs("FOX P2", "FOXP2", "same_name_variant")
    assert len(pairs) == 3
    assert sorted(p.y for p in pairs) == sorted(fn("FOX P2", "FOXP2") for fn in MEASURES.values())
    assert any(p.y == pytest.approx(1 - 1 / 6) and p.y == levenshtein_sim("FOX P2", "FOXP2") for p in pairs)


def test_variation_pairs_provenance():
    families = {"F": frozenset({"P2", "P3"})}
    pairs = generate_variation_pairs(REF, families, seed=0)
    counts = pairs.counts()
    assert counts["same_name_variant"] > 0 and counts["family_variant"] > 0
    for p in pairs:
        assert p.y in {fn(p.name_a, p.name_b) for fn in MEASURES.values()}
        if p.source == "family_variant":
            assert {next(iter(REF.entity_of(p.name_a))), next(iter(REF.entity_of(p.name_b)))} <= {"P2", "P3"}
    assert generate_variation_pairs(REF, {}).counts()["family_variant"] == 0


def test_family_pair_budget():
    names = [(f"E{e}", f"n{e} {i}") for e in range(4) for i in range(5)]
    ref = ReferenceSet.from_pairs(names)
    fam = {"F": frozenset({"E0", "E1", "E2", "E3"})}
    pairs = generate_variation_pairs(ref, fam, family_pairs_per_family=7)
    family = [p for p in pairs if p.source == "family_variant"]
    assert len({(p.name_a, p.name_b) for p in family}) == 7


def test_family_map_parsing():
    fams = parse_family_map("F1\tP1\nF1\tP2\n# c\nF2\tP3\n", REF)
    assert fams == {"F1": frozenset({"P1", "P2"}), "F2": frozenset({"P3"})}
    with pytest.raises(ParseError):
        parse_family_map("F1\tNOPE\n", REF)
    with pytest.raises(ParseError):
        parse_family_map("F1\n")


def test_training_pair_invariants():
    with pytest.raises(ValueError):
        TrainingPair("a", "b", 0.5, "positive")
    with pytest.raises(ValueError):
        TrainingPair("a", "b", 0.2, "hard_negative")
    with pytest.raises(ValueError):
        TrainingPair("a", "a", 0.5, "same_name_variant")
    with pytest.raises(ValueError):
        TrainingPair("a", "b", 1.5, "family_variant")
    with pytest.raises(ValueError):
        TrainingPair("a", "b", 0.0, "mystery")


def test_pairset_dedup_and_tsv():
    ps = PairSet()
    p = TrainingPair("a", "b", 0.25, "same_name_variant")
    assert ps.add(p) and not ps.add(p)
    ps.add(TrainingPair("a", "c", 0.0, "random_negative"))
    assert len(ps) == 2
    assert PairSet.from_tsv(ps.to_tsv()) == ps
    assert ps.counts()["random_negative"] == 1


def test_initial_pairs_ratio():
    d = initial_pairs(REF, negative_ratio=1.0, seed=0)
    c = d.counts()
    assert c["random_negative"] == c["positive"]


def _model_and_index(ref, seed=0):
    model = new_model(ref, EncoderConfig(4, 4, 1, 6, 16), seed=seed)
    return model, embed_reference(model, ref, ForestConfig(n_trees=3, max_leaf_size=4))


def test_mining_two_singletons():
    ref = ReferenceSet.from_pairs([("A", "alpha"), ("B", "beta")])
    model, index = _model_and_index(ref)
    mined = mine_hard_negatives(model, ref, index, k=1)
    assert len(mined) == 1
    (p,) = list(mined)
    assert {p.name_a, p.name_b} == {"alpha", "beta"} and p.source == "hard_negative"


def test_mining_skips_same_entity():
    ref = ReferenceSet.from_pairs([("A", "a1"), ("A", "a2"), ("A", "a3"), ("B", "zzzzzzzzzz")])
    model, index = _model_and_index(ref)
    mined = mine_hard_negatives(model, ref, index, k=3)
    for p in mined:
        assert ref.entity_of(p.name_a).isdisjoint(ref.entity_of(p.name_b))
    keys = [frozenset((p.name_a, p.name_b)) for p in mined]
    assert len(keys) == len(set(keys))


def test_mining_dimension_mismatch():
    model, index = _model_and_index(REF)
    other = new_model(REF, EncoderConfig(4, 4, 1, 9, 16), seed=0)
    with pytest.raises(ValueError, match="dimension"):
        mine_hard_negatives(other, REF, index, k=2)


def test_mining_pairs_are_cross_entity():
    model, index = _model_and_index(REF, seed=2)
    mined = mine_hard_negatives(model, REF, index, k=4)
    assert len(mined) > 0
    for p in mined:
        assert p.y == 0.0
        assert REF.entity_of(p.name_a).isdisjoint(REF.entity_of(p.name_b))
        assert p.name_a != p.name_b
