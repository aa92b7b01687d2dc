"""
Where does the network look?
============================

Object-emphasis images carry one ellipse whose colour contrast sets the
label. After training, the weight-projection map for that output should light
up the ellipse. The gradient-sum map is computed as well; with a linear head
over averaged taps the two are the same field.
"""
from pathlib import Path

import numpy as np

from attrmap.data import ATTRIBUTES, SynthSpec, synth_generate
from attrmap.evaluation import predict
from attrmap.maps import cam, grad_cam, render_overlay
from attrmap.model import TapNet, TapNetConfig
from attrmap.ppm import write_ppm
from attrmap.train import TrainConfig, fit

out = Path("demo_out/maps")
out.mkdir(parents=True, exist_ok=True)
a = ATTRIBUTES.index("object_emphasis")

train = synth_generate(SynthSpec("object_emphasis", 512, seed=60))
test = synth_generate(SynthSpec("object_emphasis", 128, seed=61))
net = TapNet.build(TapNetConfig(), seed=6)
fit(net, train, test, TrainConfig(epochs=6, seed=6))

preds = predict(net, np.stack([s.image for s in test]))
for rank, i in enumerate(np.argsort(-preds[:, a])[:5]):
    s = test[i]
    amap = cam(net, net.forward(s.image[None]), a)
    x0, y0, x1, y1 = s.meta["bbox"]
    inside = amap.upsampled[y0:y1, x0:x1].mean()
    ratio = inside / ((amap.upsampled.sum() - amap.upsampled[y0:y1, x0:x1].sum())
                      / (amap.upsampled.size - (y1 - y0) * (x1 - x0)))
    gap = np.abs(grad_cam(net, s.image, a).grid - amap.grid).max()
    print(f"#{rank}: score {amap.score:+.3f}  inside/outside {ratio:.2f}  |cam - gradcam| {gap:.1e}")
    write_ppm(out / f"top{rank}_input.ppm", s.image)
    (out / f"top{rank}_object_emphasis.ppm").write_bytes(render_overlay(s.image, amap))
print(f"overlays in {out}/")
