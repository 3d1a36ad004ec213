"""Smoke test for the esc_py extension module.

Build first:  cargo build --release -p esc-python
Then run:     python3 python/smoke.py
"""
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_module():
    lib = os.path.join(ROOT, "target", "release", "libesc_py.so")
    if not os.path.exists(lib):
        sys.exit(f"missing {lib}; run `cargo build --release -p esc-python`")
    work = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(work, "esc_py.so"))
    sys.path.insert(0, work)
    import esc_py

    return esc_py


def main():
    esc = import_module()

    for erf in (7, 15, 31, 63):
        spec = esc.ArchitectureSpec.desk(erf, classes=4)
        assert spec.theoretical_erf() == erf, spec
    spec = esc.ArchitectureSpec.desk(7, classes=4)
    assert spec.theoretical_erf("one_by_one") == 7
    assert spec.theoretical_erf("aggregating") > 7
    assert spec.widened(1.5).param_count() > spec.param_count()

    assert esc.mirc_sides(224, 5) == [224, 168, 126, 94, 70, 52]
    assert esc.derive_seed(0, "a") == esc.derive_seed(0, "a") != esc.derive_seed(0, "b")

    w = esc.wilcoxon([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [0.0] * 6, "greater")
    assert abs(w["p_value"] - 1 / 64) < 1e-12, w

    a = esc.rdm([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0], [1.0, 2.0, 4.0]])
    assert abs(a[0][1] - 2.0) < 1e-12 and a[1][1] == 0.0
    assert abs(esc.r2(a, a) - 1.0) < 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        manifest = esc.generate("shape", data, classes=4, train_per_class=2, test_per_class=2, seed=1)
        assert len(manifest["class_names"]) == 4

        model = esc.Model(spec, seed=3)
        probs = model.predict([0.0] * (2 * 64 * 64), [2, 1, 64, 64])
        assert len(probs) == 2 and abs(sum(probs[0]) - 1.0) < 1e-5

        follow = model.compose("base_followup_scrambled", seed=4)
        assert follow.variant == "base_followup_scrambled"
        metrics = follow.evaluate(data, scramble="global", seed=5)
        assert 0.0 <= metrics["accuracy"] <= 1.0

        path = os.path.join(tmp, "m.ckpt")
        model.save(path)
        again = esc.Model.load(path)
        assert again.predict([0.5] * 4096, [1, 1, 64, 64]) == model.predict([0.5] * 4096, [1, 1, 64, 64])

        tree = model.mirc(data, 0, cap=2)
        assert isinstance(tree, dict)

        try:
            esc.ArchitectureSpec.desk(8)
        except ValueError:
            pass
        else:
            raise AssertionError("ERF 8 should be rejected")

    print("esc_py smoke test passed")


if __name__ == "__main__":
    main()
