"""Smoke test for the pymisapp extension: synth -> preprocess -> train -> eval -> explain."""

import json
import math
import sys
import tempfile

import pymisapp


def main() -> int:
    corpus = {
        "users": 8,
        "apps": 12,
        "sessions_per_user": [15, 18],
        "routines": [{"apps": [0, 1, 2]}, {"apps": [3, 4, 5, 6]}, {"apps": [7, 1, 8]}],
        "noise_rate": 0.2,
        "stations": {"count": 10, "poi_dim": 4},
    }
    logs = pymisapp.synth(json.dumps(corpus), seed=3)
    data = pymisapp.Dataset.preprocess(
        logs["events"], logs["poi"], seed=3, config_json=json.dumps({"min_user_events": 20})
    )
    train_n, val_n, test_n = data.sizes
    assert train_n > 0 and test_n > 0, data.sizes
    print(f"apps {data.num_apps}, categories {data.num_categories}, sizes {data.sizes}")

    model_cfg = json.dumps({"dim": 8, "layers": 1, "heads": 2, "fusion_heads": 2, "dropout": 0.0})
    train_cfg = json.dumps({"batch_size": 32, "lr": 0.01, "epochs": 4, "seed": 1})
    model, history = pymisapp.train(data, model_cfg, train_cfg)
    assert len(history) == 4 and all(math.isfinite(h["train_loss"]) for h in history)

    metrics = pymisapp.evaluate(model, data)
    print("metrics:", json.dumps(metrics["methods"]))
    assert {"misapp", "mfu", "mru"} <= set(metrics["methods"])

    window, target, tau, rho = data.instances("test")[0]
    trace = model.forward(window, tau, rho)
    assert abs(sum(trace["probabilities"]) - 1.0) < 1e-9
    assert abs(sum(trace["hop_weights"]) - 1.0) < 1e-9
    assert len(model.scores(window, tau, rho)) == data.num_apps

    one_hop, _ = pymisapp.train(
        data, json.dumps({**json.loads(model_cfg), "use_multihop": False}), train_cfg
    )
    report = pymisapp.explain(model, one_hop, data, samples=5)
    assert -1.0 <= report["mean_tau"] <= 1.0

    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/model.ckpt"
        model.save(path)
        again = pymisapp.Model.load(path)
        assert again.scores(window, tau, rho) == model.scores(window, tau, rho)

    errors = pymisapp.gradcheck(
        json.dumps({"dim": 8, "layers": 1, "heads": 2, "fusion_heads": 2, "dropout": 0.0,
                    "num_apps": 12, "num_categories": 2})
    )
    worst = max(e for _, e in errors)
    assert worst < 1e-4, worst
    assert abs(pymisapp.kendall_tau([1, 2, 3], [1, 3, 2]) - 1 / 3) < 1e-12
    e1, e2, e3 = pymisapp.session_graphs([1, 2, 3, 1])
    assert (1, 2) in e1 and (1, 3) in e2
    print(f"gradcheck worst {worst:.2e}; smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
