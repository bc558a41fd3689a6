"""Smoke test for the kantize Python module.

Build and install first:
    pip install --no-build-isolation -e crates/python
then run:
    python python/smoke_test.py
"""

import os
import sys

import kantize


def main():
    g = kantize.GridSpec(3, 3)
    b = g.basis(0.1)
    assert len(b) == g.num_basis == 6
    assert abs(sum(b) - 1.0) < 1e-12

    qp = kantize.QuantParams.covering(-1.0, 1.0, 8)
    assert qp.quantize(qp.dequantize(7)) == 7

    lut = kantize.BsplineLut(3, 4, 8)
    assert len(lut.entries()) == 33 and lut.memory_bits == 256
    start, levels = lut.lookup(5, g)
    assert len(levels) == 4

    c = kantize.cost("kanmlp1", 8, 8, 3)
    assert c["bitops"] == 5_945_856 and c["param_count"] == 47_040
    assert kantize.cost("kanmlp1", 32, 4, 6, mode="spline-table")["spline_table_bits"] == 752_640

    assert kantize.pareto_front([(0.9, 10.0), (0.8, 20.0), (0.95, 30.0)]) == [0, 2]

    data = kantize.Dataset.synthetic("blobs", 200, seed=1)
    model = kantize.Model.kan_mlp([data.input_dim, data.n_classes], g, seed=0)
    report = kantize.train(model, data, lr=0.05, epochs=5)
    assert report["final_loss"] < report["initial_loss"]
    fp = kantize.evaluate(model, data)
    lut_acc = kantize.evaluate(model, data, "bspline-lut", bw_w=8, bw_a=4, bw_b=3)
    fq_acc = kantize.evaluate(model, data, "fake-quant", 8, 4, 3, act_policy="knot-lattice")
    assert lut_acc == fq_acc
    rows = kantize.sweep(model, data, [4, 32], [32], [3, 32], subset=None)
    assert len(rows) == 4 and rows[-1]["accuracy"] == fp
    assert len(model.predict(data.inputs()[:3])) == 3

    try:
        kantize.cost("vgg")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown architecture accepted")

    if os.environ.get("KANTIZE_DATA_DIR"):
        test = kantize.Dataset.mnist(split="test").subset(100)
        assert len(test) == 100 and test.input_dim == 784

    print(f"kantize {kantize.__version__}: smoke test passed (fp32 accuracy {fp:.3f})")


if __name__ == "__main__":
    sys.exit(main())
