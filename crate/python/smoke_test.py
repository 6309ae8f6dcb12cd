"""Smoke test for the alignins_py extension.

Build and install first:
    pip install --no-build-isolation -e crates/py
then run:
    python3 python/smoke_test.py
"""

import json
import math

import alignins_py as al


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def check_vecops():
    assert close(al.cosine_similarity([1.0, 0.0], [1.0, 1.0]), 1 / math.sqrt(2))
    assert close(al.sign_alignment_ratio([1.0, -1.0, 0.0, 2.0], [1.0, 1.0, 0.0, -1.0]), 0.5)
    assert al.top_k_mask([0.1, -5.0, 3.0, 0.0], 2) == [False, True, True, False]
    z = al.mz_scores([1.0, 2.0, 3.0])
    assert close(z[1], 0.0) and close(z[0], -z[2])
    assert al.principal_sign([[1.0, -1.0], [2.0, -3.0], [-1.0, 4.0]]) == [1, -1]


def check_aggregation():
    benign = [[1.0 + 0.01 * i, 0.5, -0.2 + 0.01 * i, 0.1] for i in range(8)]
    attack = [[-40.0, 30.0, 25.0, -20.0], [-38.0, 31.0, 24.0, -21.0]]
    updates = attack + benign
    out = al.alignins(updates, [1.0, 0.4, -0.1, 0.1])
    assert 0 not in out.selected and 1 not in out.selected, out
    assert out.clip_threshold is not None and not out.flagged
    assert len(out.aggregated) == 4 and len(out.tda) == len(updates)

    star = al.aggregate("fedavg_star", updates, [0.0] * 4, malicious=[True, True] + [False] * 8)
    mean = [sum(col) / len(benign) for col in zip(*benign)]
    assert all(close(a, b) for a, b in zip(star.aggregated, mean))
    for name in ["fedavg", "multikrum", "rfa", "rlr", "foolsgold"]:
        o = al.aggregate(name, updates, [0.0] * 4, expected_malicious=2)
        assert len(o.aggregated) == 4, name


def check_attacks_and_bounds():
    assert al.scaling_attack([1.0, -2.0], 3.0) == [3.0, -6.0]
    p = al.pgd_project([3.0, 4.0], [0.0, 0.0], 1.0)
    assert close(math.hypot(*p), 1.0)
    v = al.ada_b([1, -1, 0, 1], 2.0)
    assert close(math.sqrt(sum(x * x for x in v)), 2.0)
    assert close(al.kappa_bound(10, 1, 1.0, 0.5, 0.0, 1.0), (1 + 1 / 8) * (3 * 1.0 + 8))
    assert close(al.propagation_error_bound([0.1], 1.0, 1.0, 1.0), 0.01 * 5 ** 0.01 * 3.0)
    report = al.kappa_check(trials=10, seed=3)
    assert report["violations"] == 0 and len(report["trials"]) == 10


def check_model():
    net = al.Mlp([3, 4, 2], seed=1)
    assert net.dim == 3 * 4 + 4 + 4 * 2 + 2
    label, probs = net.predict([0.1, 0.2, 0.3])
    assert label in (0, 1) and close(sum(probs), 1.0)
    xs, ys = [[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]], [0, 1]
    g = net.gradient(xs, ys)
    params = net.params
    h = 1e-6
    bumped = list(params)
    bumped[0] += h
    net.params = bumped
    up = net.loss(xs, ys)
    net.params = params
    fd = (up - net.loss(xs, ys)) / h
    assert abs(fd - g[0]) < 1e-4, (fd, g[0])


def check_simulation():
    cfg = {
        "dataset": {"kind": "synthetic", "num_classes": 4, "feat_dim": 784, "train_size": 400, "test_size": 100},
        "n_clients": 8,
        "rounds": 3,
        "hidden": [8],
        "attack": {"kind": "badnet", "attack_ratio": 0.25},
        "defense": {"name": "alignins"},
        "seed": 7,
    }
    sim = al.Simulation(json.dumps(cfg))
    assert sim.malicious_ids == [0, 1]
    metrics, outcome = sim.run_round()
    assert sim.round == 1 and metrics["round"] == 1
    assert 0.0 <= sim.evaluate()["ma"] <= 100.0
    record = al.run_experiment(json.dumps(cfg))
    assert len(record["rounds"]) == 3
    try:
        al.Simulation(json.dumps({**cfg, "bogus": 1}))
    except ValueError:
        pass
    else:
        raise AssertionError("unknown config key accepted")


if __name__ == "__main__":
    for check in [check_vecops, check_aggregation, check_attacks_and_bounds, check_model, check_simulation]:
        check()
        print(f"ok {check.__name__}")
