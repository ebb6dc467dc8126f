"""Calibration probe: one-seed source/warmup/selftrain comparison (scratch)."""
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from nightseg.core import ClassTaxonomy
from nightseg.datagen import generate_dataset
from nightseg.evalcli import evaluate_checkpoint
from nightseg.nets import load_checkpoint
from nightseg.trainer import TrainConfig, generate_offline_pseudo, run

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/calib")
W = int(sys.argv[2]) if len(sys.argv) > 2 else 250
S = int(sys.argv[3]) if len(sys.argv) > 3 else 120
N = int(sys.argv[4]) if len(sys.argv) > 4 else 60
seed = int(sys.argv[5]) if len(sys.argv) > 5 else 0

data = root / "data"
t0 = time.time()
if not (data / "taxonomy.json").exists():
    generate_dataset(data, n_train=N, n_val=20, seed=17, size=128, pose_shift_max=12)
print("datagen", round(time.time() - t0, 1), flush=True)

results = {}

# source-only
t0 = time.time()
cfg_src = TrainConfig(stage="warmup", steps=W, seed=seed, checkpoint_every=W,
                      enable_inner=False, enable_outer=False)
r = run(cfg_src, data, root / f"src{seed}")
results["src"] = evaluate_checkpoint(r.final_checkpoint, data)["miou"]
print("src", round(results["src"], 4), round(time.time() - t0, 1), "s", flush=True)

# warmup
t0 = time.time()
cfg_w = TrainConfig(stage="warmup", steps=W, seed=seed, checkpoint_every=W)
rw = run(cfg_w, data, root / f"warm{seed}")
results["warm"] = evaluate_checkpoint(rw.final_checkpoint, data)["miou"]
print("warm", round(results["warm"], 4), round(time.time() - t0, 1), "s", flush=True)

# pseudo labels
tax = ClassTaxonomy.load(data / "taxonomy.json")
bundle, _ = load_checkpoint(rw.final_checkpoint)
pseudo_dir = root / f"pseudo{seed}"
base_st = TrainConfig(stage="selftrain", steps=S, seed=seed, checkpoint_every=S,
                      warmup_checkpoint=rw.final_checkpoint, pseudo_dir=str(pseudo_dir))
generate_offline_pseudo(bundle, data, base_st, tax, pseudo_dir,
                        checkpoint_path=rw.final_checkpoint)

for name, cfg in {
    "st_full": base_st,
    "st_nodna": replace(base_st, selftrain=replace(base_st.selftrain, disable_online=True)),
    "st_tau0": replace(base_st, selftrain=replace(base_st.selftrain, tau=0.0)),
}.items():
    t0 = time.time()
    r = run(cfg, data, root / f"{name}{seed}")
    results[name] = evaluate_checkpoint(r.final_checkpoint, data)["miou"]
    print(name, round(results[name], 4), round(time.time() - t0, 1), "s", flush=True)

print(json.dumps(results, indent=2))
ok = (results["src"] + 0.03 <= results["warm"] < results["st_full"]
      and results["st_full"] >= results["st_nodna"]
      and results["st_full"] >= results["st_tau0"])
print("ORDERINGS", "PASS" if ok else "FAIL")
