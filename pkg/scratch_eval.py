"""Scratch: train briefly and measure pipeline vs baseline F1."""
import sys, time
sys.path.insert(0, "src")
import numpy as np
from cdpipe.synthdata import generate_scene, SCENARIOS
from cdpipe.train import Config, prepare_example, train_model
from cdpipe.evalcli import (infer, confusion, collapse_binary,
                            metrics_from_confusion, baseline_differencing)

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
lr = float(sys.argv[2]) if len(sys.argv) > 2 else 2e-3
n_eval = int(sys.argv[3]) if len(sys.argv) > 3 else 6
n_train = int(sys.argv[4]) if len(sys.argv) > 4 else 30

from cdpipe.train import inverse_frequency_weights
gamma1 = float(sys.argv[5]) if len(sys.argv) > 5 else 30.0
cfg = Config(seed=7, learning_rate=lr, batch_size=2, gamma1=gamma1)
train_scenes = [generate_scene(5000 + i, size=32, scenario=SCENARIOS[i % 3])
                for i in range(n_train)]
examples = [prepare_example(s, cfg) for s in train_scenes]
weights = inverse_frequency_weights(examples, cfg.n_classes + 1)
print("class weights:", [round(w, 1) for w in weights])
cfg = Config(**{**cfg.to_dict(), "class_weights": weights})
examples = [prepare_example(s, cfg) for s in train_scenes]
t0 = time.time()
params, records = train_model(examples, cfg, total_steps=steps)
print(f"train {steps} steps: {time.time()-t0:.0f}s  "
      f"loss {records[0]['total']:.3f} -> {records[-1]['total']:.3f}  "
      f"cls {records[0]['l_cls']:.3f} -> {records[-1]['l_cls']:.3f}")

from cdpipe.classify import class_head, argmax_labels
eval_scenes = [generate_scene(9000 + i, size=48, scenario=SCENARIOS[i % 3])
               for i in range(n_eval)]
# diagnostic: head quality on clean masked differences
cc = np.zeros((4, 4), dtype=np.int64)
for sc in eval_scenes:
    ex = prepare_example(sc, cfg)
    lab = argmax_labels(class_head(ex.delta0, params.head_weight, params.head_bias))
    cc += confusion(lab, sc.gt_labels, 4)
clean = metrics_from_confusion(cc)
print("head on clean delta0, per-class f1:",
      {c: round(clean.per_class[c]["f1"], 3) for c in range(4)})
n = cfg.n_classes + 1
counts = np.zeros((n, n), dtype=np.int64)
cbin = np.zeros((2, 2), dtype=np.int64)
bbin = np.zeros((2, 2), dtype=np.int64)
t0 = time.time()
for sc in eval_scenes:
    r = infer(sc.i1, sc.i2, sc.oracle_d1, sc.oracle_d2, params, cfg, seed=sc.seed)
    counts += confusion(r.labels, sc.gt_labels, n)
    cbin += confusion(collapse_binary(r.labels), collapse_binary(sc.gt_labels), 2)
    bbin += confusion(baseline_differencing(sc.i1, sc.i2),
                      collapse_binary(sc.gt_labels), 2)
print(f"eval {n_eval} scenes: {time.time()-t0:.0f}s")
rep = metrics_from_confusion(counts)
pipe = metrics_from_confusion(cbin).per_class[1]
base = metrics_from_confusion(bbin).per_class[1]
print("macro:", {k: round(v, 3) for k, v in rep.macro.items()})
print("per-class f1:", {c: round(rep.per_class[c]["f1"], 3) for c in range(n)})
print(f"pipeline binary F1 {pipe['f1']:.3f}   baseline binary F1 {base['f1']:.3f}   "
      f"gap {100*(pipe['f1']-base['f1']):.1f} pp")
