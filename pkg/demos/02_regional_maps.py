"""All six dependency maps for one patched image.

Trains the three models at a reduced size, segments one test image and
writes the image, its segment map, the true patch and a heat map per
method to ``demo_maps/``. For each method the script prints how much of
the highest-scoring region falls inside the patch.

Run from the repository root::

    python3 demos/02_regional_maps.py
"""
from pathlib import Path

import numpy as np

from regcomp.config import parse_config
from regcomp.pipeline import prepare_data, train_models
from regcomp.regional import (FillStrategy, combine_maps, cropping_map, gradient_map, masking_map,
                              perturbation_map, reconstruction_map)
from regcomp.render import render_heatmap, save_rgb_png, save_segment_png
from regcomp.segmentation import felzenszwalb_segment

cfg = parse_config({"seed": 1, "data": {"n_train": 300, "n_calibration": 100, "n_tune": 4, "n_test": 4},
                    "classifier": {"epochs": 6}, "inpainter": {"epochs": 8}})
data = prepare_data(cfg)
models = train_models(cfg, data)
test = data.subset("test")
image, truth = test.images[0], test.masks[0]
segmap = felzenszwalb_segment(image, cfg.segmentation)
print(f"{segmap.n_segments} segments, patch covers {truth.mean():.1%} of the image")

est = models.estimator
maps = {
    "cropping": cropping_map(est, image, 8, 8),
    "masking": masking_map(est, image, segmap, FillStrategy("blur")),
    "perturbation": perturbation_map(est, image, segmap, FillStrategy("mean")),
    "gradients": gradient_map(est, image, segmap),
    "reconstruction": reconstruction_map(models.decoder, models.model, image, segmap),
}
maps["combined"] = combine_maps(maps["gradients"], maps["reconstruction"])

out = Path("demo_maps")
out.mkdir(exist_ok=True)
save_rgb_png(out / "image.png", image)
save_rgb_png(out / "truth.png", np.repeat(truth[None].astype(float), 3, axis=0))
save_segment_png(out / "segments.png", segmap)
print(f"\n{'method':<15} {'seconds':>8} {'top region in patch':>20}")
for name, m in maps.items():
    save_rgb_png(out / f"{name}.png", render_heatmap(image, m))
    top = m.raw == m.raw.max()
    print(f"{name:<15} {m.seconds:>8.3f} {truth[top].mean():>20.1%}")
print(f"\nimages written to {out.resolve()}")
