"""Smoke test for the Python bindings: synth, pretrain, save/load, evaluate."""

import math
import sys
import tempfile
from pathlib import Path

import mixlink_py as ml

TINY = """
seed = 5
[data]
d_s = 10
[synth]
n_users = 8
n_decoys = 16
d_t = 12
d_s = 10
n_source = 80
[mixfusion]
d_c = 4
cap = 16
[transfer]
epochs = 2
target_stream = 30
classifier_hidden = [8]
[transfer.encoder]
d_model = 8
heads = 2
layers = 1
ffn = 16
pretrain_epochs = 2
[transfer.generator]
arch = "mlp"
hidden = [8]
[association]
hidden = [8]
steps = 20
"""


def main() -> int:
    assert ml.metrics([1, 0, 1, 0], [1, 0, 0, 0]) == (0.75, 0.5, 1.0, 2 / 3)
    assert abs(ml.degradation_rate(0.5, 0.4) - 0.2) < 1e-12
    x = [[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]]
    assert ml.mmd(x, x) == 0.0

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = ml.RunConfig(TINY)
        counts = ml.synth(cfg, str(tmp / "data"))
        print("synth", counts)
        cfg.use_corpus_dir(str(tmp / "data"))

        pipe, disc = ml.Pipeline.pretrain(cfg)
        assert len(disc) == 2 and all(math.isfinite(d) for d in disc)
        pipe.save(str(tmp / "ck"))
        back = ml.Pipeline.load(str(tmp / "ck"))
        assert back.generator_digest() == pipe.generator_digest()

        out = back.generate([[0.1] * 8, [0.2] * 8])
        assert len(out) == 2

        f1 = back.few_shot_f1(3, 2)
        assert f1 == pipe.few_shot_f1(3, 2)
        print("few-shot N=3 f1 %.4f +- %.4f" % f1)

        try:
            ml.RunConfig("bogus = 1")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown key accepted")
    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
