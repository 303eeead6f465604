"""
Run every strategy config sequentially, then merge the results.

    python run_all_strategies.py                # configs/4p4_*.yaml
    python run_all_strategies.py 7p1            # configs/7p1_*.yaml
"""
import subprocess, sys
from pathlib import Path

import yaml

ROOT = Path(__file__).resolve().parent

prefix = sys.argv[1] if len(sys.argv) > 1 else "4p4"
configs = sorted((ROOT / "configs").glob(f"{prefix}_*.yaml"))
if not configs:
    print('Missing', ROOT / "configs" / f"{prefix}_*.yaml")
    raise SystemExit(1)

run_dirs = []
for c in configs:
    print(f"\nRunning {c.name}...")
    result = subprocess.run([sys.executable, str(ROOT / "cli.py"), "-q", "run", "--config", str(c)], cwd=ROOT)
    if result.returncode != 0:
        print(f"{c.name} failed with exit code {result.returncode}")
        continue
    cfg = yaml.safe_load(c.read_text(encoding="utf-8")) or {}
    run_dirs.append(str(ROOT / cfg.get("experiment", {}).get("output_dir", "runs/default")))

if run_dirs:
    subprocess.run([sys.executable, str(ROOT / "cli.py"), "report", "--runs", *run_dirs,
                    "--out", str(ROOT / "runs" / f"{prefix}_report")], cwd=ROOT)
