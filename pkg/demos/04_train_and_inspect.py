"""
Training a small model and reading its scanpath
===============================================

A reduced model is trained for a few epochs on a small synthetic set. The
best validation and final parameters are evaluated on held-out references, its
fixations on block-wise distortions are compared with random looking, and
one scanpath is rendered as SVG. Takes about a minute.
"""
from pathlib import Path

import numpy as np

from glimpse_iqa.data import SYNTH_KINDS, make_synthetic_dataset, split_by_reference, to_arrays
from glimpse_iqa.evaluation import attention_test, evaluate, predict
from glimpse_iqa.net import ModelConfig
from glimpse_iqa.train import TrainConfig, fit
from glimpse_iqa.visualize import scanpath_svg

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

index = make_synthetic_dataset(n_refs=10, size=96)
train, val, test = (to_arrays(p) for p in split_by_reference(index, seed=0))
model = ModelConfig(patch=12, scales=(12, 36, 84), conv_channels=(8, 16, 16, 32), hidden=32,
                    rnn_hidden=64, n_classes=4, T=5)
config = TrainConfig(epochs=120, batch_size=8, anneal_epochs=12, seed=0)


def show(row):
    print(f"epoch {row['epoch']:2d}  loss {row['mean_loss']:.3f}  reward {row['mean_reward']:.2f}"
          f"  val SROCC {row['val_srocc']}")


result = fit(train, val, model, config, on_epoch=show)

# With two validation references the best-SROCC epoch is a noisy pick, so
# the final parameters are reported next to it.
print(f"best validation epoch {result.best_epoch}")
print(evaluate(result.best_params, model, test, SYNTH_KINDS).summary())
report = evaluate(result.last_params, model, test, SYNTH_KINDS)
print("final epoch")
print(report.summary())
print(report.confusion_csv())

# Fresh references, block-wise distortions only.
held_out = make_synthetic_dataset(n_refs=5, size=96, kinds=("local_blockwise",), ref_offset=100)
att = attention_test(result.last_params, model, to_arrays(held_out.samples), n_resamples=999)
print("attention:", att.summary())

sample = test.samples[0]
_, _, locs = predict(result.last_params, model, test.images[:1])
(out / "scanpath.svg").write_text(scanpath_svg(sample.load(), locs[0], model.scales))
print("fixations", locs[0].round(3).tolist(), "-> out/scanpath.svg")
