"""Single end-to-end run from a JSON config; prints the test metrics."""

import argparse
import json

from kgaml.pipeline import PipelineConfig, run_pipeline

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/default.json")
    ap.add_argument("--out-dir")
    args = ap.parse_args()
    cfg = PipelineConfig.load(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    out = run_pipeline(cfg)
    print(json.dumps(json.loads((out / "metrics.json").read_text()), indent=2))
