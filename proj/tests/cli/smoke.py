"""End-to-end checks of the forecaster CLI on a tiny synthetic dataset.

Usage: smoke.py <forecaster binary> <scratch dir> <m5 fixture dir>
"""

import csv
import filecmp
import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

EXE, WORK, M5 = sys.argv[1], Path(sys.argv[2]), Path(sys.argv[3])

TINY = {
    "seed": 3,
    "model": {"d_model": 8, "n_heads": 2, "n_encoder_layers": 2, "n_experts": 4,
              "d_ff": 16, "context_length": 14, "horizon": 7},
    "train": {"epochs": 2, "batch_size": 16, "learning_rate": 0.003, "stride": 7},
}

failures = []


def run(*args, expect=0):
    proc = subprocess.run([EXE, *map(str, args)], capture_output=True, text=True,
                          env={**os.environ, "FORECASTER_THREADS": "1"})
    if proc.returncode != expect:
        failures.append(f"{' '.join(map(str, args))}: exit {proc.returncode}, expected {expect}\n{proc.stderr}")
    return proc


def check(cond, what):
    if not cond:
        failures.append(what)


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


shutil.rmtree(WORK, ignore_errors=True)
WORK.mkdir(parents=True)
spec = WORK / "spec.json"
spec.write_text(json.dumps({"n_series": 8, "length": 90}))
config = WORK / "tiny.json"
config.write_text(json.dumps(TINY))
soft = WORK / "soft.json"
soft.write_text(json.dumps({**TINY, "model": {**TINY["model"], "gate_mode": "soft"}}))
data = WORK / "data"

# generate-data
run("generate-data", "--spec", spec, "--out", data, "--seed", 11)
run("generate-data", "--spec", spec, "--out", WORK / "data2", "--seed", 11)
for name in sorted(p.name for p in data.iterdir()):
    check(filecmp.cmp(data / name, WORK / "data2" / name, shallow=False), f"generate-data rerun differs: {name}")

# train, twice for reproducibility
for out in ("run", "run2"):
    run("train", "--config", config, "--data", data, "--objective", "hybrid", "--out", WORK / out)
for name in ("config.echo", "epochs.log", "checkpoint.bin", "metrics.csv"):
    check((WORK / "run" / name).is_file(), f"train did not write {name}")
    if name != "config.echo":
        check(filecmp.cmp(WORK / "run" / name, WORK / "run2" / name, shallow=False), f"train rerun differs: {name}")
log = [json.loads(line) for line in (WORK / "run" / "epochs.log").read_text().splitlines()]
check(len(log) == 2, "epochs.log should hold one line per epoch")
check(all(abs(sum(l["utilization"][0]) - 1.0) < 1e-9 for l in log), "utilization rows should sum to 1")
ckpt = WORK / "run" / "checkpoint.bin"

# forecast: point, quantiles, samples
run("forecast", "--checkpoint", ckpt, "--data", data, "--mode", "point", "--out", WORK / "fc")
run("forecast", "--checkpoint", ckpt, "--data", data, "--mode", "point", "--out", WORK / "fc2")
check(filecmp.cmp(WORK / "fc" / "forecasts.csv", WORK / "fc2" / "forecasts.csv", shallow=False),
      "forecast rerun differs")
point = rows(WORK / "fc" / "forecasts.csv")
check(len(point) == 8 * 7, f"expected 56 forecast rows, got {len(point)}")
check(all(float(r["mean"]) >= 0 for r in point), "negative point forecast")

run("forecast", "--checkpoint", ckpt, "--data", data, "--mode", "quantiles",
    "--quantiles", "0.1,0.5,0.9,0.99", "--out", WORK / "fq")
for r in rows(WORK / "fq" / "forecasts.csv"):
    qs = [float(r[k]) for k in ("q0.100", "q0.500", "q0.900", "q0.990")]
    check(qs == sorted(qs), f"quantiles not monotone: {r}")

run("forecast", "--checkpoint", ckpt, "--data", data, "--mode", "samples", "--samples", 5,
    "--seed", 2, "--out", WORK / "fs")
samples = rows(WORK / "fs" / "forecasts.csv")
check(len(samples) == 8 * 5 * 7, "sample path row count")
check(all(int(r["value"]) >= 0 for r in samples), "negative sample")

# evaluate from a checkpoint and from a forecasts file
run("evaluate", "--checkpoint", ckpt, "--data", data, "--baseline", "naive", "croston", "--out", WORK / "ev")
check((WORK / "ev" / "metrics.csv").is_file(), "evaluate did not write metrics.csv")
run("evaluate", "--forecasts", WORK / "fc" / "forecasts.csv", "--data", data, "--out", WORK / "ev2")
run("evaluate", "--checkpoint", ckpt, "--data", data, "--metrics", "wrmsse", "--out", WORK / "ev3", expect=1)
hierarchy = WORK / "hierarchy.json"
hierarchy.write_text(json.dumps({"levels": [[], ["cat_id"], ["id"]]}))
run("evaluate", "--checkpoint", ckpt, "--data", data, "--metrics", "wape,wrmsse", "--hierarchy", hierarchy,
    "--out", WORK / "ev4")

# routing
run("analyze-routing", "--checkpoint", ckpt, "--data", data, "--out", WORK / "rt")
check(len(rows(WORK / "rt" / "routing_overall.csv")) == 2 * 4, "routing_overall row count")
check(len(rows(WORK / "rt" / "routing_conditional.csv")) == 2 * 4 * 4, "routing_conditional row count")
run("analyze-routing", "--checkpoint", ckpt, "--data", data, "--out", WORK / "rt2")
for name in ("routing_overall.csv", "routing_conditional.csv"):
    check(filecmp.cmp(WORK / "rt" / name, WORK / "rt2" / name, shallow=False), f"routing rerun differs: {name}")

# M5 fixture loads through the same path
run("train", "--config", config, "--data", M5, "--epochs", 1, "--out", WORK / "m5")
run("evaluate", "--checkpoint", WORK / "m5" / "checkpoint.bin", "--data", M5, "--metrics", "wrmsse",
    "--out", WORK / "m5ev")

# error handling
run("train", "--config", soft, "--data", data, "--epochs", 1, "--out", WORK / "soft")
run("analyze-routing", "--checkpoint", WORK / "soft" / "checkpoint.bin", "--data", data, "--out", WORK / "x",
    expect=1)
run("evaluate", "--checkpoint", ckpt, "--data", data, "--metrics", "wrmsse", "--hierarchy", WORK / "none.json",
    "--out", WORK / "x", expect=2)
run(expect=1)
run("train", "--bogus", expect=1)
run("train", "--data", data, "--out", WORK / "x", "--objective", "quantile", expect=1)
run("forecast", "--checkpoint", ckpt, "--data", data, "--mode", "quantiles", "--quantiles", "1.5",
    "--out", WORK / "x", expect=1)
run("train", "--data", WORK / "missing", "--out", WORK / "x", expect=2)
run("forecast", "--checkpoint", WORK / "missing.bin", "--data", data, "--out", WORK / "x", expect=2)
bad = WORK / "bad.json"
bad.write_text(json.dumps({"train": {"epoch": 3}}))
run("train", "--config", bad, "--data", data, "--out", WORK / "x", expect=1)

for f in failures:
    print("FAIL:", f)
print(f"{'FAILED' if failures else 'OK'}: cli smoke")
sys.exit(1 if failures else 0)
