"""Smoke test for the compiled extension.

Build and run:
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/scarcekit-*.whl
    python python/smoke_test.py
"""

import math
import pathlib
import tempfile

import scarcekit

ROOT = pathlib.Path(__file__).resolve().parent.parent


def main():
    assert scarcekit.qwk([0, 1, 2, 2], [0, 1, 2, 2]) == 1.0
    assert scarcekit.qwk([0, 1, 2, 0], [2, 1, 0, 2]) < 0.0

    pred = [[1, 1, 0, 0]]
    gt = [[0, 1, 1, 0]]
    assert math.isclose(scarcekit.dice(pred, gt), 0.5)
    assert math.isclose(scarcekit.iou(pred, gt), 1.0 / 3.0)

    assert scarcekit.auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75
    assert scarcekit.auc([0.1, 0.2], [True, True]) is None

    assert [scarcekit.quality_decision(v) for v in (0.53, 0.54, 1.49, 1.5)] == [0, 1, 1, 2]

    grown = scarcekit.dilate([[0, 0, 0], [0, 1, 0], [0, 0, 0]], 3)
    assert grown == [[1, 1, 1], [1, 1, 1], [1, 1, 1]]

    feats, labels = scarcekit.gen_ordinal("grading", 611, 0)
    assert len(feats) == 611 and len(feats[0]) == 8
    assert [labels.count(c) for c in range(3)] == [329, 212, 70]

    try:
        scarcekit.dilate([[1]], 2)
    except ValueError:
        pass
    else:
        raise AssertionError("even kernel accepted")

    cfg = ROOT / "configs" / "grading.toml"
    assert len(scarcekit.config_digest(str(cfg))) == 16

    with tempfile.TemporaryDirectory() as tmp:
        small = pathlib.Path(tmp) / "seg.toml"
        small.write_text(
            'task = "segmentation"\n'
            "[synth]\nsize = 32\nseg_train = 4\nseg_dev = 2\n"
            "[train]\nepochs = 1\n"
            "[ensemble]\nmembers = 2\n"
        )
        csv = scarcekit.ablate(str(small), [1, 2])
        rows = csv.strip().splitlines()
        assert rows[0].startswith("row,ensemble,tta,post,mean_dsc_mean")
        assert [r.split(",")[0] for r in rows[1:]] == ["baseline", "+ensemble", "+TTA", "+post"]

    print("smoke test ok")


if __name__ == "__main__":
    main()
