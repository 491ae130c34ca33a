"""Compare meetingOnly, newsOnly and advancedModel on held-out meeting-like transcripts.

Every stage goes through the command-line interface, so the run directory ends
up holding the same artifacts a user would produce by hand:

    runs/three_models/
        news/ meetings/            preprocessed corpora sharing one vocabulary
        meetingOnly/ newsOnly/ advancedModel/
                                   checkpoint, loss curve, summaries, scores
        report/                    comparison tables and per-example deltas

The defaults are sized for a single desktop core (a few minutes). The small
initial weights and accumulator of the default profile are what let a model
this size leave the all-STOP regime within a few hundred steps.
"""
import argparse
import subprocess
import sys
import time
from pathlib import Path

from pgsum.cli import main as pgsum


def run(argv: list[str]) -> None:
    print("$ pgsum " + " ".join(argv), flush=True)
    if pgsum(argv) != 0:
        sys.exit(f"stage failed: {argv[0]}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out-dir", default="runs/three_models")
    ap.add_argument("--news", type=int, default=200)
    ap.add_argument("--meetings", type=int, default=80)
    ap.add_argument("--pretrain-steps", type=int, default=800)
    ap.add_argument("--finetune-steps", type=int, default=300)
    ap.add_argument("--emb-dim", type=int, default=16)
    ap.add_argument("--hidden-dim", type=int, default=32)
    ap.add_argument("--init-scale", type=float, default=0.1)
    ap.add_argument("--initial-accumulator", type=float, default=0.01)
    ap.add_argument("--beam-size", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    root = Path(args.out_dir)
    corpora = root / "corpora"
    subprocess.run([sys.executable, str(Path(__file__).with_name("make_corpora.py")), "--out-dir", str(corpora),
                    "--news", str(args.news), "--meetings", str(args.meetings)], check=True)
    start = time.perf_counter()

    # the news vocabulary is shared so the pretrained checkpoint can be fine-tuned on meetings
    run(["preprocess", "--input", str(corpora / "news.jsonl"), "--vocab-size", "5000",
         "--seed", str(args.seed), "--out-dir", str(root / "news")])
    run(["preprocess", "--input", str(corpora / "meetings.jsonl"), "--vocab", str(root / "news" / "vocab.txt"),
         "--seed", str(args.seed), "--out-dir", str(root / "meetings")])

    profile = ["--batch-size", "16", "--validate-every", "50", "--patience", "5", "--seed", str(args.seed),
               "--initial-accumulator", str(args.initial_accumulator)]
    dims = ["--emb-dim", str(args.emb_dim), "--hidden-dim", str(args.hidden_dim), "--init-scale", str(args.init_scale)]
    run(["train", "--data", str(root / "news"), "--max-steps", str(args.pretrain_steps), *dims, *profile,
         "--out-dir", str(root / "newsOnly")])
    run(["train", "--data", str(root / "meetings"), "--max-steps", str(args.finetune_steps), *dims, *profile,
         "--out-dir", str(root / "meetingOnly")])
    run(["finetune", "--data", str(root / "meetings"), "--checkpoint", str(root / "newsOnly" / "checkpoint.pgnc"),
         "--max-steps", str(args.finetune_steps), *profile, "--out-dir", str(root / "advancedModel")])

    models = ("meetingOnly", "newsOnly", "advancedModel")
    for name in models:
        out = root / name
        run(["decode", "--data", str(root / "meetings"), "--checkpoint", str(out / "checkpoint.pgnc"),
             "--split", "test", "--beam-size", str(args.beam_size), "--max-len", "40", "--min-len", "5",
             "--out-dir", str(out)])
        run(["evaluate", "--summaries", str(out / "summaries.jsonl"),
             "--references", str(root / "meetings" / "corpus.jsonl"),
             "--manifest", str(root / "meetings" / "manifest.json"), "--out-dir", str(out)])
    run(["report", "--scores", *(f"{m}={root / m / 'scores.csv'}" for m in models), "--out-dir", str(root / "report")])

    print(f"done in {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
