"""Scratch: longer training + sampler-quality diagnostics."""
import sys, time
sys.path.insert(0, "src")
import numpy as np
from cdpipe.synthdata import generate_scene, SCENARIOS
from cdpipe.train import (Config, prepare_example, train_model,
                          inverse_frequency_weights, save_checkpoint)
from cdpipe.classify import class_head, argmax_labels
from cdpipe.evalcli import (infer, confusion, collapse_binary,
                            metrics_from_confusion, baseline_differencing)

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2500
lr = float(sys.argv[2]) if len(sys.argv) > 2 else 1e-2
n_eval = int(sys.argv[3]) if len(sys.argv) > 3 else 9
gamma1 = float(sys.argv[4]) if len(sys.argv) > 4 else 20.0

cfg = Config(seed=7, learning_rate=lr, batch_size=2, gamma1=gamma1)
scenes = [generate_scene(5000 + i, size=32, scenario=SCENARIOS[i % 3])
          for i in range(30)]
exs = [prepare_example(s, cfg) for s in scenes]
w = inverse_frequency_weights(exs, 4)
cfg = Config(**{**cfg.to_dict(), "class_weights": w})
t0 = time.time()
params, recs = train_model(exs, cfg, total_steps=steps)
print(f"train {steps}: {time.time()-t0:.0f}s noise {recs[-1]['l_den_or_surrogate']:.3f} "
      f"cls {recs[-1]['l_cls']:.4f}")
save_checkpoint(params, cfg, "scratch_model.ckpt")

n = 4
counts = np.zeros((n, n), dtype=np.int64)
counts_raw = np.zeros((n, n), dtype=np.int64)
cbin = np.zeros((2, 2), dtype=np.int64)
bbin = np.zeros((2, 2), dtype=np.int64)
res_stats = []
t0 = time.time()
for i in range(n_eval):
    sc = generate_scene(9000 + i, size=48, scenario=SCENARIOS[i % 3])
    r = infer(sc.i1, sc.i2, sc.oracle_d1, sc.oracle_d2, params, cfg, seed=sc.seed)
    res_stats.append(float((r.delta_star - r.delta0).std()))
    counts += confusion(r.labels, sc.gt_labels, n)
    raw_lab = argmax_labels(class_head(r.delta_star, params.head_weight, params.head_bias))
    counts_raw += confusion(raw_lab, sc.gt_labels, n)
    cbin += confusion(collapse_binary(r.labels), collapse_binary(sc.gt_labels), 2)
    bbin += confusion(baseline_differencing(sc.i1, sc.i2), collapse_binary(sc.gt_labels), 2)
print(f"eval: {time.time()-t0:.0f}s  x0 residual std {np.mean(res_stats):.3f}")
rep = metrics_from_confusion(counts)
rep_raw = metrics_from_confusion(counts_raw)
pipe = metrics_from_confusion(cbin).per_class[1]
base = metrics_from_confusion(bbin).per_class[1]
print("fused per-class f1:", {c: round(rep.per_class[c]["f1"], 3) for c in range(n)},
      "macro f1", round(rep.macro["f1"], 3))
print("raw-head per-class f1:", {c: round(rep_raw.per_class[c]["f1"], 3) for c in range(n)})
print(f"pipeline binary F1 {pipe['f1']:.3f}  baseline {base['f1']:.3f}  "
      f"gap {100*(pipe['f1']-base['f1']):.1f} pp")
