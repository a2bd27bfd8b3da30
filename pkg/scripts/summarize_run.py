#!/usr/bin/env python3
"""Print a compact text summary of every report found in a run directory.

Usage: python3 scripts/summarize_run.py runs/repro
"""

import json
import os
import sys


def _load(out_dir, name):
    path = os.path.join(out_dir, f"{name}.json")
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _mean(xs):
    return sum(xs) / len(xs) if xs else float("nan")


def main(out_dir: str) -> int:
    shown = 0
    ev = _load(out_dir, "eval_model")
    if ev:
        shown += 1
        print("== eval_model ==")
        print(f"caption mean {_mean(ev['caption_scores']):.4f}  "
              f"mode {ev['caption_mode']:.4f}  "
              f"ceiling {ev['consistency_ceiling']:.4f}  "
              f"({ev['percent_of_ceiling']:.1f}% of ceiling)")
        print(f"qa mean      {_mean(ev['qa_scores']):.4f}  "
              f"numerosity {ev['numerosity_accuracy']:.4f}  "
              f"rouge-l {ev['rouge_l']:.4f}")
        print(f"baselines    caption {_mean(ev['baseline_caption_scores']):.4f}  "
              f"qa {_mean(ev['baseline_qa_scores']):.4f}")
        for name, w in sorted(ev.get("welch", {}).items()):
            print(f"welch {name:<22} t {w['t']:+8.2f}  dof {w['dof']:6.1f}  p {w['p']:.2e}")
        if ev.get("control_caption_scores"):
            print(f"control      caption {_mean(ev['control_caption_scores']):.4f}  "
                  f"qa {_mean(ev['control_qa_scores']):.4f}  "
                  f"numerosity {ev['control_numerosity_accuracy']:.4f}")
        for flag in ev.get("flags", []):
            print(f"flag: {flag}")
        print()

    for name in sorted(os.listdir(out_dir)):
        if not (name.startswith("zeroshot_") and name.endswith(".json")):
            continue
        zs = _load(out_dir, name[:-5])
        shown += 1
        print(f"== {name[:-5]} ==")
        print(f"withheld {zs['withheld']}  emitted {zs['emitted_withheld'] or 'none'}")
        cap = zs["captions"]
        print(f"centroid accuracy {cap['accuracy']:.3f} over {len(cap['trial_ids'])} trials  "
              f"nearest other centroid: {cap['nearest_other']}")
        if zs.get("choice"):
            ch = zs["choice"]
            print(f"forced choice {ch['n_correct']}/{ch['n_compliant']} compliant "
                  f"({ch['accuracy']:.3f}), {ch['n_non_compliant']} non-compliant")
        print()

    ms = _load(out_dir, "microstim")
    if ms:
        shown += 1
        print("== microstim ==")
        print(f"mask fraction {ms['fraction']:g} ({ms['n_active']} vertices)")
        print(f"rho excitatory {ms['rho_excitatory']:+.3f}  "
              f"rho inhibitory {ms['rho_inhibitory']:+.3f}")
        grid = ms["excitatory"]["grid"]
        exc = ms["excitatory"]["mention_rate"]
        inh = ms["inhibitory"]["mention_rate"]
        print("beta      " + "  ".join(f"{b:+6.2f}" for b in grid))
        print("exc rate  " + "  ".join(f"{r:6.2f}" for r in exc))
        print("inh rate  " + "  ".join(f"{r:6.2f}" for r in inh))
        print()

    if not shown:
        print(f"no reports found in {out_dir}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    if len(sys.argv) != 2:
        print(__doc__.strip(), file=sys.stderr)
        sys.exit(1)
    sys.exit(main(sys.argv[1]))
