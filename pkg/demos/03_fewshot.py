"""
Recognising a family the encoder never saw
==========================================

Pretrain on two families, then give a prototypical head five labelled
examples of each of the three families per episode, the third being new.
Queries go to the nearest class prototype in the projected space.
"""

import numpy as np

from fewshot_dpi.encoder import TOY_SCALE, PretrainConfig
from fewshot_dpi.packet_ingest import tokenize
from fewshot_dpi.protonet import FewShotProtocol, run_experiment_shots
from fewshot_dpi.synthetic import byte_histograms, motif_families, nearest_centroid_accuracy

records = motif_families(240, payload_len=32, seed=1)

# %%
# Sanity check the data first. A nearest-centroid classifier on raw byte
# histograms should already separate the families.
hist = byte_histograms([r.payload for r in records])
labels = np.array([r.label for r in records])
half = np.arange(len(records)) % 2 == 0
print(f"byte-histogram baseline: {nearest_centroid_accuracy(hist[half], labels[half], hist[~half], labels[~half]):.3f}")

# %%
# Each iteration re-splits the data, re-initialises and pretrains the encoder
# on family_a + family_b, then trains and evaluates a fresh head per shot count.
ds = tokenize(records, max_len=32)
protocol = FewShotProtocol(way=3, query=5, epochs=10, episodes_per_epoch=100, eval_episodes=200)
results = run_experiment_shots(
    ds, ["family_a", "family_b"], "family_c", TOY_SCALE,
    PretrainConfig(epochs=20, learning_rate=1e-3, batch_size=32), protocol,
    shots=[1, 5, 10], iterations=3, seed=0,
)

print("shot  accuracy        macro F1")
for shot, report in results.items():
    print(f"{shot:4d}  {report.accuracy:.3f} +/- {report.accuracy_std:.3f}  {report.f1_macro:.3f}")

# %%
# Per-class recall for the 5-shot run; family_c is the one pretraining never saw.
five = results[5]
for name, recall in five.recall_per_class.items():
    print(f"{name}: recall {recall:.3f}")
print(np.array(five.confusion))

# %%
# How much does pretraining matter here? Skip it entirely and compare.
# On these motif families a randomly initialised encoder already separates
# all three classes, and pretraining on two of them narrows the embedding
# toward the distinction it was trained on.
untrained = run_experiment_shots(
    ds, ["family_a", "family_b"], "family_c", TOY_SCALE, PretrainConfig(epochs=0), protocol,
    shots=[5], iterations=3, seed=0,
)[5]
print(f"5-shot without pretraining: {untrained.accuracy:.3f} +/- {untrained.accuracy_std:.3f}")
