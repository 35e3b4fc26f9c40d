"""Write the synthetic corpus (tables, rules, spec record) to a directory."""

import argparse
import json

from kgaml.synth import default_specs, generate_corpus, write_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-total", type=int, default=5000)
    ap.add_argument("--anomaly-rate", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default="data/synth")
    args = ap.parse_args()
    specs = default_specs(args.n_total, args.anomaly_rate)
    corpus = generate_corpus(specs, seed=args.seed)
    paths = write_corpus(corpus, args.out, specs, args.seed)
    motifs = {}
    for t in corpus.transactions:
        m = t.extras.get("motif", "?")
        motifs[m] = motifs.get(m, 0) + 1
    print(json.dumps({"files": {k: str(v) for k, v in paths.items()}, "motifs": motifs}, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
