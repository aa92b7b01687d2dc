"""
Learning one attribute from synthetic images
============================================

Vivid-color images are flat random hues whose saturation sets the label. A
desk-size network learns to rank them within a few epochs. Pass a number of
epochs as the first argument (default 10).
"""
import sys

import numpy as np

from attrmap.data import SynthSpec, synth_generate
from attrmap.evaluation import evaluate
from attrmap.model import TapNet, TapNetConfig
from attrmap.train import TrainConfig, fit

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10

train = synth_generate(SynthSpec("vivid_color", 512, seed=0))
test = synth_generate(SynthSpec("vivid_color", 128, seed=1000))
net = TapNet.build(TapNetConfig(), seed=0)
print(f"{net.parameter_count()} parameters, feature length {net.config.feature_dim}")

result = fit(net, train, test, TrainConfig(epochs=epochs), out_dir="demo_out/vivid")
for row in result.log.rows:
    vivid = row["rho"][net.config.attribute_names.index("vivid_color")]
    print(f"epoch {row['epoch']:2d}  train {row['train_loss']:.4f}  test {row['val_loss']:.4f}  "
          f"rho {vivid:.3f}  ({row['seconds']:.1f}s)")

# Only vivid_color and overall vary in this set, so the other rows are undefined.
print(evaluate(net, test).to_text())
np.save("demo_out/vivid/test_predictions.npy", evaluate(net, test).predictions)
