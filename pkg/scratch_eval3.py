"""Scratch: capacity probe + calibration + full criterion-style evaluation."""
import sys, time
sys.path.insert(0, "src")
import numpy as np
from cdpipe.synthdata import generate_scene, SCENARIOS
from cdpipe.train import (Config, prepare_example, train_model, calibrate_head,
                          inverse_frequency_weights, save_checkpoint)
from cdpipe.evalcli import (infer, confusion, collapse_binary,
                            metrics_from_confusion, baseline_differencing)

steps = int(sys.argv[1])
hidden = int(sys.argv[2])
calib = int(sys.argv[3])
n_eval = int(sys.argv[4]) if len(sys.argv) > 4 else 9

cfg = Config(seed=7, learning_rate=1e-2, batch_size=2, gamma1=20.0, hidden=hidden)
scenes = [generate_scene(5000 + i, size=32, scenario=SCENARIOS[i % 3])
          for i in range(45)]
exs = [prepare_example(s, cfg) for s in scenes]
w = inverse_frequency_weights(exs, 4)
cfg = Config(**{**cfg.to_dict(), "class_weights": w})
t0 = time.time()
params, recs = train_model(exs, cfg, total_steps=steps)
t_train = time.time() - t0
t0 = time.time()
crecs = calibrate_head(exs, params, cfg, total_steps=500, samples_per_scene=1)
t_cal = time.time() - t0
print(f"train {steps} ({t_train:.0f}s) noise {recs[-1]['l_den_or_surrogate']:.3f}; "
      f"calib ({t_cal:.0f}s) l_cls {crecs[0]['l_cls']:.3f}->{crecs[-1]['l_cls']:.3f}")
save_checkpoint(params, cfg, "scratch_model.ckpt")

n = 4
counts = np.zeros((n, n), dtype=np.int64)
cbin = np.zeros((2, 2), dtype=np.int64)
bbin = np.zeros((2, 2), dtype=np.int64)
t0 = time.time()
for i in range(n_eval):
    sc = generate_scene(9000 + i, size=48, scenario=SCENARIOS[i % 3])
    r = infer(sc.i1, sc.i2, sc.oracle_d1, sc.oracle_d2, params, cfg, seed=sc.seed)
    counts += confusion(r.labels, sc.gt_labels, n)
    cbin += confusion(collapse_binary(r.labels), collapse_binary(sc.gt_labels), 2)
    bbin += confusion(baseline_differencing(sc.i1, sc.i2),
                      collapse_binary(sc.gt_labels), 2)
rep = metrics_from_confusion(counts)
pipe = metrics_from_confusion(cbin).per_class[1]
base = metrics_from_confusion(bbin).per_class[1]
print(f"eval {n_eval} ({time.time()-t0:.0f}s)")
print("per-class f1:", {c: round(rep.per_class[c]["f1"], 3) for c in range(n)},
      "macro", round(rep.macro["f1"], 3))
print(f"binary F1 {pipe['f1']:.3f} vs baseline {base['f1']:.3f} "
      f"gap {100*(pipe['f1']-base['f1']):.1f} pp")
print("total train+calib minutes:", round((t_train + t_cal) / 60, 1))
