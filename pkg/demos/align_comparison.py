"""Train the aligner with both alignment objectives and compare boundaries.

A reduced corpus keeps this under a couple of minutes; pass a larger
count on the command line for the full desk setting (500 utterances).

    python demos/align_comparison.py [count]
"""

import sys

from cifalign.cli import compare_table
from cifalign.models import GraftedModel
from cifalign.synthdata import SynthConfig, generate_utterances, split_corpus
from cifalign.train import TrainConfig, evaluate_checkpoint, train_align

count = int(sys.argv[1]) if len(sys.argv) > 1 else 200
train, dev, _ = split_corpus(generate_utterances(SynthConfig(seed=0), count), (0.8, 0.1, 0.1), 0)
print(f"{len(train)} training and {len(dev)} dev utterances")

runs = []
for mode in ("cos", "infonce"):
    model = GraftedModel.build(seed=0, graft_depth=3)
    # subword term off, so the runs differ only in the alignment objective
    cfg = TrainConfig(align_mode=mode, loss_weights=(1.0, 1.0, 0.0))
    # short runs need a proportionally short warmup
    cfg.warmup_steps = min(cfg.warmup_steps, cfg.steps_for(len(train)) // 5)
    model, log = train_align(train, model, cfg)
    print(f"{mode}: {len(log.rows)} steps, final loss {log.column('total')[-1]:.4f}")
    runs.append({"depth": 3, "align_mode": mode, **evaluate_checkpoint(dev, model)})

text, _ = compare_table(runs)
print()
print(text)
