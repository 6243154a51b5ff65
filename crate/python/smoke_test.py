"""End-to-end smoke test of the m2fn Python module.

Uses an installed module when there is one (`pip install ./crates/py`), otherwise the
library from `cargo build -p m2fn-py --release --features extension-module`.
"""

import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def import_m2fn():
    try:
        import m2fn

        return m2fn
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libm2fn.so"
        if lib.is_file():
            staging = Path(tempfile.mkdtemp(prefix="m2fn-ext-"))
            shutil.copy(lib, staging / "m2fn.so")
            sys.path.insert(0, str(staging))
            import m2fn

            return m2fn
    sys.exit("m2fn module not found; build it with cargo or install ./crates/py first")


def main():
    m2fn = import_m2fn()
    work = Path(tempfile.mkdtemp(prefix="m2fn-smoke-"))

    cfg = m2fn.synth(str(work / "data"), seed=3, instances=150)
    assert cfg.train_data is not None and cfg.test_data is not None
    cfg.epochs = 2
    cfg.out = str(work / "run")
    print(cfg)

    report = m2fn.train(cfg)
    print("test", report["test"])
    assert -1.0 <= report["test"]["sprc_mean"] <= 1.0

    ckpt = m2fn.Checkpoint.load(report["checkpoint"])
    assert ckpt.epoch == report["best_epoch"] and ckpt.loss == "wmse"
    assert "block5" in ckpt.layers()
    again = ckpt.evaluate(str(cfg.test_data))
    assert abs(again["sprc_mean"] - report["test"]["sprc_mean"]) < 1e-12

    cam = m2fn.gradcam(report["checkpoint"], str(cfg.test_data), layer="block3", out=str(work / "cam"))
    values = cam["heatmap"]["values"]
    # ndarray's serde form: {"v": 1, "dim": [h, w], "data": [...]}
    assert values["dim"] == [32, 32]
    flat = values["data"]
    assert flat and all(0.0 <= v <= 1.0 for v in flat)

    png = m2fn.plot(str(work / "run" / "epochs.jsonl"), str(work / "plots"))
    assert Path(png).is_file()

    try:
        m2fn.gradcam(report["checkpoint"], str(cfg.test_data), layer="head")
    except ValueError as e:
        assert "block5" in str(e)
    else:
        raise AssertionError("unknown layer accepted")

    assert abs(m2fn.spearman([1, 2, 3, 4], [10, 20, 30, 25]) - 0.8) < 1e-12
    shutil.rmtree(work)
    print("smoke test passed")


if __name__ == "__main__":
    main()
