#!/usr/bin/env python3
"""Smoke test for the ultrank_py extension module.

Build the module first, then run this script:

    cargo build --release -p ultrank-py
    python3 python/smoke_test.py
"""

import math
import os
import shutil
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)


def load_module():
    """Copy the built cdylib next to this script under the importable name."""
    candidates = [
        os.path.join(ROOT, "target", "release", "libultrank_py.so"),
        os.path.join(ROOT, "target", "debug", "libultrank_py.so"),
        os.path.join(ROOT, "target", "release", "libultrank_py.dylib"),
        os.path.join(ROOT, "target", "debug", "libultrank_py.dylib"),
    ]
    built = next((c for c in candidates if os.path.exists(c)), None)
    if built is None:
        sys.exit("build the extension first: cargo build --release -p ultrank-py")
    dest = os.path.join(HERE, "ultrank_py.so")
    if not os.path.exists(dest) or os.path.getmtime(built) > os.path.getmtime(dest):
        shutil.copyfile(built, dest)
    sys.path.insert(0, HERE)
    import ultrank_py

    return ultrank_py


def main():
    up = load_module()

    # dataset generation and parsing round trip
    data = up.generate_synthetic(num_queries=60, docs_per_query=8, dim=6, teacher_seed=7)
    assert data.num_queries == 60
    assert data.num_documents == 480
    assert data.dim == 6
    reparsed = up.parse_libsvm(data.to_libsvm())
    assert reparsed.num_documents == data.num_documents
    assert reparsed.labels(0) == data.labels(0)

    # click model formula values
    assert up.click_prob(4, 1) == 1.0
    assert abs(up.click_prob(2, 2) - 0.14) < 1e-12
    assert abs(up.click_prob(0, 4) - 0.025) < 1e-12

    # simulation is deterministic and positions are permutations
    log = up.simulate_clicks(data, policy="oracle", policy_seed=11, click_seed=13, sessions=2)
    log2 = up.simulate_clicks(data, policy="oracle", policy_seed=11, click_seed=13, sessions=2)
    assert log.num_records == 120
    assert log.positions(0) == log2.positions(0)
    assert log.clicks(0) == log2.clicks(0)
    assert sorted(log.positions(0)) == list(range(1, 9))
    assert log.total_clicks > 0

    # metrics
    assert up.ndcg_at_k([4.0, 3.0, 2.0, 1.0, 0.0], 5) == 1.0
    assert abs(up.ndcg_at_k([2.0, 3.0, 0.0], 3) - 0.8340) < 1e-3
    t, p, significant = up.paired_t_test([0.7, 0.8, 0.9, 0.6], [0.4, 0.5, 0.6, 0.3])
    assert significant and p < 0.05

    # propensity estimation from a random-policy log approximates 1/p
    big = up.generate_synthetic(num_queries=3000, docs_per_query=10, dim=4, teacher_seed=3)
    biglog = up.simulate_clicks(big, policy="random", policy_seed=5, click_seed=6, sessions=1)
    props = biglog.estimate_propensities()
    for pos in (2, 5, 10):
        assert abs(props[pos - 1] - 1.0 / pos) < 0.12, (pos, props[pos - 1])

    # train a small two-tower model and score it
    train, valid, test = data.split([0.6, 0.2, 0.2], seed=9)
    tlog = up.simulate_clicks(train, policy="oracle", policy_seed=11, click_seed=13, sessions=3)
    model = up.train_model(
        "pal",
        train,
        tlog,
        valid=valid,
        epochs=8,
        batch_size=64,
        relevance_tower=[16, 1],
        observation_tower=[4, 1],
    )
    ndcg = model.mean_ndcg(test, 5)
    assert 0.0 < ndcg <= 1.0
    scores = model.predict([[0.0] * train.dim, [1.0] * train.dim])
    assert len(scores) == 2 and all(math.isfinite(s) for s in scores)

    # checkpoint round trip preserves predictions
    restored = up.load_model(model.checkpoint_json())
    assert restored.predict([[0.5] * train.dim]) == model.predict([[0.5] * train.dim])

    # config-driven experiment runner
    config = """
[dataset]
source = "synthetic"
split = [0.6, 0.2, 0.2]

[dataset.synthetic]
num_queries = 40
docs_per_query = 6
dim = 4
teacher_seed = 7
grade_quantiles = [0.5, 0.75, 0.9, 0.97]

[[policies]]
name = "oracle"
seed = 11

[clicks]
seed = 13
sessions = 2

[[models]]
name = "pal"
variant = "pal"
relevance_tower = [8, 1]
observation_tower = [4, 1]
position_embedding_dim = 3
max_position = 10

[train]
epochs = 2
batch_size = 32

[run]
seeds = [1]
"""
    out = tempfile.mkdtemp(prefix="ultrank_py_")
    agg = up.run_experiment(config, out)
    assert '"rows"' in agg
    assert os.path.exists(os.path.join(out, "aggregate.csv"))
    shutil.rmtree(out)

    print("ultrank_py smoke test: all checks passed")


if __name__ == "__main__":
    main()
