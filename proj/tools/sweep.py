#!/usr/bin/env python3
"""Train every (method, seed, override) combination and collate summary.json files.

Example:
    tools/sweep.py --config configs/blobs.toml --methods ce cls cls_ensc encofa \
        --seeds 0 1 2 --set encofa.gamma_cl=0.75,0.85 --out runs/sweep
"""

import argparse
import csv
import itertools
import json
import statistics
import subprocess
import sys
from pathlib import Path

KEYS = ("acc_test", "acc_test_best_val", "acc_type_train", "f1_on_train", "pre_on_train")


def parse_set(items):
    grid = {}
    for item in items:
        key, _, values = item.partition("=")
        if "." not in key or not values:
            sys.exit(f"--set expects section.key=v1,v2,...: {item}")
        grid[key] = [json.loads(v) if v not in ("true", "false") else v == "true" for v in values.split(",")]
    return grid


def toml_value(v):
    if isinstance(v, bool):
        return str(v).lower()
    return json.dumps(v)


def override(text, key, value):
    """Set section.key in a flat TOML document, adding the key if absent."""
    section, name = key.split(".", 1)
    lines = text.splitlines()
    header = f"[{section}]"
    if header not in lines:
        return text.rstrip("\n") + f"\n\n{header}\n{name} = {toml_value(value)}\n"
    start = lines.index(header) + 1
    end = next((i for i in range(start, len(lines)) if lines[i].startswith("[")), len(lines))
    for i in range(start, end):
        if lines[i].split("=", 1)[0].strip() == name:
            lines[i] = f"{name} = {toml_value(value)}"
            break
    else:
        lines.insert(start, f"{name} = {toml_value(value)}")
    return "\n".join(lines) + "\n"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True, type=Path)
    ap.add_argument("--methods", nargs="+", default=["ce", "cls", "cls_ensc", "encofa"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ap.add_argument("--set", nargs="*", default=[], metavar="SECTION.KEY=V1,V2")
    ap.add_argument("--out", type=Path, default=Path("runs/sweep"))
    ap.add_argument("--cli", type=Path, default=Path("build/tools/encofa"))
    args = ap.parse_args()

    grid = parse_set(args.set)
    base = args.config.read_text()
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for combo in itertools.product(*grid.values()):
        setting = dict(zip(grid, combo))
        tag = "_".join(f"{k.split('.')[-1]}{v}" for k, v in setting.items()) or "base"
        text = base
        for k, v in setting.items():
            text = override(text, k, v)
        cfg = args.out / f"{tag}.toml"
        cfg.write_text(text)
        for method in args.methods:
            runs = []
            for seed in args.seeds:
                run_dir = args.out / tag / f"{method}_seed{seed}"
                cmd = [str(args.cli), "train", "--config", str(cfg), "--method", method, "--seed", str(seed),
                       "--run-dir", str(run_dir)]
                proc = subprocess.run(cmd, capture_output=True, text=True)
                if proc.returncode:
                    sys.exit(f"{' '.join(cmd)} exited {proc.returncode}\n{proc.stderr}")
                runs.append(json.loads((run_dir / "summary.json").read_text()))
            row = {"setting": tag, "method": method, "seeds": len(runs)}
            for key in KEYS:
                vals = [r[key] for r in runs]
                row[key] = statistics.mean(vals)
                row[key + "_std"] = statistics.pstdev(vals)
            rows.append(row)
            print(f"{tag:<30} {method:<10} acc_test {row['acc_test']:.4f} f1_on {row['f1_on_train']:.3f}", flush=True)

    with open(args.out / "sweep.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


if __name__ == "__main__":
    main()
