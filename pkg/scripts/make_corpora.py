"""Write the synthetic news-like and meeting-like corpora used by the experiment scripts."""
import argparse
from pathlib import Path

from pgsum.corpus import write_jsonl
from pgsum.synthetic import meeting_corpus, news_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="runs/corpora")
    ap.add_argument("--news", type=int, default=200, help="number of news-like pairs")
    ap.add_argument("--meetings", type=int, default=40, help="number of meeting-like pairs")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(news_corpus(args.news, seed=args.seed), out / "news.jsonl")
    write_jsonl(meeting_corpus(args.meetings, seed=args.seed + 1), out / "meetings.jsonl")
    print(f"wrote {args.news} news and {args.meetings} meeting pairs to {out}")


if __name__ == "__main__":
    main()
