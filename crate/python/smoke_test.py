"""Smoke test for the finenet extension module.

Build and install first:
    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml
"""
import json
import math
import tempfile
from pathlib import Path

import finenet


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        train = finenet.generate_dataset(str(tmp / "train.json"), families=["translation"], count=64,
                                         side=8, constraint="train", seed=1, glyph_classes=8)
        test = finenet.generate_dataset(str(tmp / "test.json"), families=["translation"], count=32,
                                        side=8, constraint="train", split="test", seed=1, glyph_classes=8)
        assert len(train) == 64 and train.image_side == 8
        again = finenet.Dataset.load(str(tmp / "train.json"))
        assert again.digest == train.digest

        task = train.task(0)
        assert len(task["x"]) == 64 and len(task["choices"]) == 4
        shifted = finenet.apply_transform(task["x"], 8, task["rule"])
        assert shifted == task["y"]

        model = finenet.Model(image_side=8, embed_dim=8, nice_layers=2, memories=4, seed=3)
        probs, pred, phi = model.solve(test, 0)
        assert abs(sum(probs) - 1.0) < 1e-12 and 0 <= pred <= 3
        assert len(phi) == model.phi_len == 2 * 4 * 4

        curve = model.train(train, epochs=2, lr=1e-3, batch_size=16, seed=0)
        assert len(curve) == 2 and all(math.isfinite(loss) for _, loss, _ in curve)
        report = model.evaluate(test)
        assert 0.0 <= report["accuracy"] <= 1.0 and report["count"] == 32

        model.save(str(tmp / "ck.json"))
        loaded = finenet.Model.load(str(tmp / "ck.json"))
        assert loaded.evaluate(test)["csv"] == report["csv"]
        assert model.export_phi(test, str(tmp / "phi.bin")) == 32

    a = [[2.0, 0.0], [0.0, 4.0], [0.0, 0.0]]
    x, residual = finenet.pinv(a)
    assert abs(x[0][0] - 0.5) < 1e-10 and abs(x[1][1] - 0.25) < 1e-10 and residual < 1e-8
    q = finenet.build_query([3.0, 4.0], [1.0])
    assert abs(q[0][0] * 3.0 + q[0][1] * 4.0 - 1.0) < 1e-12
    print("finenet smoke test passed:", json.dumps({"accuracy": report["accuracy"]}))


if __name__ == "__main__":
    main()
