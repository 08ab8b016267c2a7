"""Walk one synthetic utterance through the front-end, the windowing and the decision rule.

    python demos/frontend_tour.py
"""

import numpy as np

from lightslr import AudioClip, ModelConfig, build_model, count_params, decide, log_mel
from lightslr.evalbench import make_recipes, render
from lightslr.inference import clip_windows, window_activations

rng = np.random.default_rng(0)
targets, nontargets = make_recipes(5, 5)
print("target recipes:    ", [f"{r.center_hz:.0f} Hz / {r.am_rate_hz:.1f} Hz AM" for r in targets])
print("non-target recipes:", [f"{r.center_hz:.0f} Hz / {r.am_rate_hz:.1f} Hz AM" for r in nontargets])

clip = AudioClip(render(targets[2], rng, 23.0))
spec = log_mel(clip)
print(f"\n23 s clip -> log-mel {spec.shape}, range [{spec.min():.1f}, {spec.max():.1f}]")
print("loudest mel bin on average:", int(spec.mean(axis=0).argmax()))

windows = clip_windows(clip)
print(f"windows: {len(windows)} of {windows[0].duration:.0f} s (last one flush with the end)")

for arch in ("tc_resnet10", "tc_resnet14", "lecapat"):
    print(f"{arch:12s} {count_params(build_model(ModelConfig(arch, 11))):>8,d} parameters")

# untrained, so the activations mean nothing; the point is the shape of the pipeline
model = build_model(ModelConfig("tc_resnet14", 5, head="multilabel")).eval()
acts = window_activations(model, windows)
print("\nper-window activations:\n", np.round(acts, 3))
print("clip decision:", decide(acts.mean(axis=0), model.head).label([f"lang{i}" for i in range(5)]))

print("\nthreshold rule on hand-made activations:")
for a in ([0.9, 0.1, 0.0], [0.5, 0.2, 0.1], [0.49, 0.3, 0.2]):
    print(f"  {a} -> {decide(a, 'multilabel').label(['en', 'es', 'ca'])}")
