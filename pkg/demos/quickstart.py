"""Train the default model with and without part mixing and print retrieval scores.

    python demos/quickstart.py [seed]     # roughly a minute per model on one core
"""
import sys

from partmix import ExperimentConfig, train_and_evaluate

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1

for reg in ("none", "partmix"):
    model = train_and_evaluate(ExperimentConfig(seed=seed, regularizer=reg))
    last = model.record.losses[-1]
    print(f"{reg:8s} final total loss {last['total']:.3f}")
    for rep in model.record.reports:
        print(f"    {rep.protocol.name:20s} {rep.protocol.shot_mode:6s} "
              f"mAP {rep.map_score:.3f}  rank-1 {rep.cmc[1]:.3f}")
