"""Show which mixed samples entropy mining keeps for one anchor.

Builds part descriptors for one minibatch, enumerates the positive and
negative pools, and prints the entropy gap of each kept candidate.
"""
import numpy as np

from partmix import augment, encoder, mining, training
from partmix.config import ExperimentConfig
from partmix.data import epoch_batches, index_by_identity, stack_images

cfg = ExperimentConfig()
split = training.dataset_for(cfg)
dims = encoder.ModelDims(cfg.dataset.C_in, cfg.model.C_f, cfg.model.M, len(split.train_ids))
params, _ = encoder.init_params(dims, 0)

batch = epoch_batches(split.train, cfg.batch.P, cfg.batch.K, 0, 0, index_by_identity(split.train))[0]
x, ids, mods = stack_images(batch.images)
parts = encoder.forward(params, x).p
bank = augment.DescriptorBank(parts, ids, mods)

anchor = 0
pos = augment.gen_positive(anchor, bank, cfg.mix.B, seed=1, U=cfg.mix.U)
neg = augment.gen_negative(anchor, bank, cfg.mix.B, seed=1, Q=cfg.mix.Q)
kept = mining.mine(params, parts[anchor], pos, neg, cfg.mining.U_prime, cfg.mining.Q_prime)

print(f"anchor id {ids[anchor]}, modality {mods[anchor]}: "
      f"{len(pos)} positives pooled, {len(neg)} negatives pooled")
for label, rows in (("positives", kept.positives), ("negatives", kept.negatives[:5])):
    print(label)
    for r in rows:
        s = r.candidate
        print(f"    donor {s.donor_index:3d} ({s.route}) slots {s.replaced_slots}  gap {r.entropy_gap:.4f}")
print(f"mean gap kept negatives {np.mean([r.entropy_gap for r in kept.negatives]):.4f}")
