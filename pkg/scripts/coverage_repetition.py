"""Count repeated n-grams in decoded meeting summaries with and without the coverage phase."""
import argparse

import numpy as np

from pgsum import corpus as C
from pgsum.decoding import beam_decode, render, repetition_stats
from pgsum.model import ModelConfig, ModelParams
from pgsum.synthetic import meeting_corpus
from pgsum.training import TrainingConfig, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pairs", type=int, default=60)
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    records = meeting_corpus(args.pairs, seed=args.seed + 5)
    toks = [(C.tokenize(r["article"]), C.tokenize(r["summary"])) for r in records]
    split = C.split_dataset(len(toks), seed=args.seed)
    vocab = C.build_vocab((toks[i][0] + toks[i][1] for i in split.train), 2000)
    enc = [C.encode_example(a, s, vocab, example_id=i) for i, (a, s) in enumerate(toks)]
    train_set, val_set = [enc[i] for i in split.train], [enc[i] for i in split.validation]
    init = ModelParams.init(ModelConfig(len(vocab), 16, 32), seed=args.seed, init_scale=0.1)

    for label, frac in (("no coverage", 0.0), ("coverage", 0.2)):
        config = TrainingConfig(max_steps=args.steps, coverage_frac=frac, validate_every=50,
                                seed=args.seed, initial_accumulator=0.01)
        ck = train(config, train_set, val_set, init, vocab.digest()).checkpoint
        counts = np.zeros(3, dtype=int)
        for i in split.test:
            text = render(beam_decode(ck.params, enc[i], 4, 40, 5, ck.coverage), vocab)
            stats = repetition_stats(text)
            counts += [stats.count(n) for n in (1, 2, 3)]
        print(f"{label:>12}: repeated unigrams {counts[0]}, bigrams {counts[1]}, trigrams {counts[2]}"
              f" over {len(split.test)} summaries")


if __name__ == "__main__":
    main()
