"""Smoke test for the ordlab_py extension.

Build the module first, either with maturin
    pip install maturin && maturin develop -m crates/python/Cargo.toml
or with cargo, copying the shared library next to this script:
    cargo build -p ordlab-py --features extension-module --release
    cp target/release/libordlab_py.so python/ordlab_py.so
"""

import json
import math
import tempfile

import ordlab_py as ol


def main():
    for name, passed, detail in ol.oracle_suite():
        assert passed, f"{name}: {detail}"

    assert ol.predicted_fundamental(9973, 99) == 101
    assert ol.default_stride(97) == 9
    assert ol.harmonic_series(101, 9973, 7) == [101, 202, 404, 808, 1616, 3232, 3509]

    train, test = ol.dataset(13, 60, 50, 7)
    assert len(train) == 60 and len(test) == 50
    assert all((a + b) % 13 == c for a, b, c in train + test)
    order = ol.ordering("stride", 13, 60, 7, 0)
    assert sorted(order) == list(range(60))
    assert ol.ordering("random", 13, 60, 7, 0) != ol.ordering("random", 13, 60, 7, 1)

    wave = [math.cos(2 * math.pi * 5 * a / 31) for a in range(31)]
    assert ol.spectrum(wave, 31, 1)["peak_frequency"] == 5

    parts = ol.decompose([1.0, 2.0, 0.0], [[1.0, 0.0, 0.0], [1.0, 0.2, 0.0]])
    assert parts["partition_residual"] < 1e-10

    cfg = ol.ExperimentConfig.desk("stride", weight_decay=0.1, seed=1)
    cfg = ol.ExperimentConfig.from_json(
        json.dumps(
            {
                **json.loads(cfg.to_json()),
                "task": {"p": 13, "train_size": 80, "test_size": 89, "data_seed": 1},
                "model": {"p": 13, "d_model": 16, "n_heads": 2, "d_ff": 32, "n_layers": 1,
                          "dropout": 0.1, "precision": "f32"},
                "max_epochs": 3,
            }
        )
    )
    cfg.set_cadence("counterfactual", 1)
    session = ol.Session(cfg)
    first = session.run_epoch()
    assert first["epoch"] == 1 and math.isfinite(first["loss"])
    session.train()
    assert session.epochs_completed == 3
    assert "counterfactual" in session.hooks()
    losses = session.series("training_metrics", "loss")
    assert [e for e, _ in losses] == [1, 2, 3]
    cf = session.rows("counterfactual")
    assert all(r["partition_residual"] < 1e-10 for r in cf)
    assert len(session.parameters()) == sum(math.prod(s) for _, s in session.layout())

    try:
        ol.ExperimentConfig.from_json('{"bogus": 1}')
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")

    with tempfile.TemporaryDirectory() as tmp:
        cfg.output_dir = tmp + "/run"
        cfg.disable_hooks()
        out = ol.run_experiment(cfg)
        assert out["epochs_completed"] == 3 and out["status"] == "exhausted"
        again = ol.resume(tmp + "/run", 0)
        assert again["final_test_accuracy"] == out["final_test_accuracy"]

    print("ordlab_py smoke test passed")


if __name__ == "__main__":
    main()
