import io

import numpy as np
import pytest

from entnorm.ann_index import ForestConfig
from entnorm.encoder import EncoderConfig, new_model
from entnorm.refset import QueryRecord, ReferenceSet
from entnorm.retrieval import (
    EmbeddedReference,
    FingerprintMismatch,
    dump_embeddings,
    embed_reference,
    evaluate_hits_at_k,
    retrieve,
)

REF = ReferenceSet.from_pairs([
    ("P1", "FOXP2"), ("P1", "FOX-P2"), ("P1", "forkhead box P2"),
    ("P2", "RAS"), ("P2", "ras p21"),
    ("P3", "RAS"), ("P3", "kinase 3"),
    ("P4", "TP53"),
])
CFG = EncoderConfig(6, 6, 2, 8, 32)
FOREST = ForestConfig(n_trees=4, max_leaf_size=3)


@pytest.fixture(scope="module")
def setup():
    model = new_model(REF, CFG, seed=0)
    return model, embed_reference(model, REF, FOREST)


def test_every_name_pair_embedded(setup):
    _, emb = setup
    assert len(emb.store) == REF.pair_count() == 8
    assert [e for e, n in zip(emb.store.entity_ids, emb.store.names) if n == "RAS"] == ["P2", "P3"]


def test_embedding_is_reproducible(setup):
    model, emb = setup
    again = embed_reference(model, REF, FOREST)
    assert again.store == emb.store and again.forest == emb.forest and again.fingerprint == emb.fingerprint


def test_empty_reference_rejected():
    model = new_model(REF, CFG)
    with pytest.raises(ValueError):
        embed_reference(model, ReferenceSet(()), FOREST)


def test_exact_name_ranks_first(setup):
    model, emb = setup
    for eid, name in REF.name_pairs():
        res = retrieve(emb, model, name, k=1, search_budget=len(emb.store))
        assert res.candidates[0].distance <= 1e-9
        assert eid in REF.entity_of(res.candidates[0].name)


def test_entities_unique_and_sorted(setup):
    model, emb = setup
    res = retrieve(emb, model, "FOX P2", k=10)
    assert len(res.ids) == len(set(res.ids)) == 4  # k beyond the entity count
    d = [c.distance for c in res.candidates]
    assert d == sorted(d)


def test_entity_keeps_min_distance(setup):
    model, emb = setup
    res = retrieve(emb, model, "FOX P2", k=4, search_budget=100)
    q = model.embed_one("FOX P2")
    q = q / np.linalg.norm(q)
    for c in res.candidates:
        rows = [i for i, e in enumerate(emb.store.entity_ids) if e == c.entity_id]
        best = min(1.0 - float(emb.store.vectors[i] @ q) for i in rows)
        assert c.distance == pytest.approx(max(best, 0.0), abs=1e-12)


def test_empty_mention(setup):
    model, emb = setup
    with pytest.raises(ValueError):
        retrieve(emb, model, "", k=1)


def test_hits_on_exact_queries(setup):
    model, emb = setup
    queries = [QueryRecord(n, e) for e, n in REF.name_pairs() if len(REF.entity_of(n)) == 1]
    rep = evaluate_hits_at_k(emb, model, queries, ks=(1, 3))
    assert rep.hits[1] == 1.0
    assert rep.metrics_tsv().count("\n") == 2
    assert rep.detail_tsv().count("\n") == len(queries)


def test_unknown_gold_flagged(setup, caplog):
    model, emb = setup
    queries = [QueryRecord("TP53", "P4"), QueryRecord("TP53", "NOPE")]
    rep = evaluate_hits_at_k(emb, model, queries, ks=(1, 3, 5, 10))
    assert rep.unknown_gold == 1
    assert rep.hits[1] == 0.5
    assert [o.rank for o in rep.outcomes] == [1, -1]
    assert "NOPE" in caplog.text
    values = [rep.hits[k] for k in (1, 3, 5, 10)]
    assert values == sorted(values)
    assert rep.metrics_tsv().splitlines()[0].split("\t")[0] == "1"


def test_fingerprint_check(setup):
    model, emb = setup
    emb.check_model(model)
    other = new_model(REF, CFG, seed=1)
    with pytest.raises(FingerprintMismatch):
        emb.check_model(other)


def test_index_file_round_trip(setup):
    model, emb = setup
    buf = io.BytesIO()
    emb.save(buf)
    buf.seek(0)
    loaded = EmbeddedReference.load(buf)
    assert loaded.fingerprint == emb.fingerprint
    for m in ("FOXP2", "kinase", "p21"):
        assert retrieve(loaded, model, m, k=3) == retrieve(emb, model, m, k=3)


def test_dump_embeddings(setup):
    _, emb = setup
    out = io.StringIO()
    assert dump_embeddings(emb, out) == 8
    lines = out.getvalue().splitlines()
    assert len(lines) == 8
    for line, vec in zip(lines, emb.store.vectors):
        cols = line.split("\t")
        assert len(cols) == 3
        values = np.array([float(x) for x in cols[2].split(",")])
        assert len(values) == CFG.output_dim
        np.testing.assert_array_equal(values, vec)
