"""
From a capture file to a byte matrix
====================================

Write a small synthetic capture, read it back, label packets by source host,
drop duplicate payloads, balance the classes and pack everything into the
padded token matrix the encoder consumes.
"""

import tempfile
from pathlib import Path

import numpy as np

from fewshot_dpi.packet_ingest import (
    LabelRule,
    ParseStats,
    apply_labels,
    balance_classes,
    class_counts,
    deduplicate,
    parse_pcap,
    tokenize,
)
from fewshot_dpi.synthetic import motif_families, write_pcap

workdir = Path(tempfile.mkdtemp())

# %%
# Three "families" of payloads. Each payload hides its family's 8-byte motif
# somewhere in random bytes, and each family talks from its own host.
records = motif_families(50, payload_len=(24, 40), seed=0)

# a few exact repeats, as real traffic would have
write_pcap(workdir / "toy.pcap", records + records[:7])

# %%
# Parsing ignores labels entirely; it only recovers payloads and five-tuples.
stats = ParseStats()
parsed = parse_pcap(workdir / "toy.pcap", stats)
print(f"{stats.packets} packets, {stats.records} with payload, {stats.skipped} skipped")
print(parsed[0].tuple, parsed[0].payload[:12].hex())

# %%
# Labels come from five-tuple rules. Here the source address is enough.
rules = [LabelRule(f"family_{c}", src_ip=f"10.0.0.{i + 1}") for i, c in enumerate("abc")]
labelled = apply_labels(parsed, rules, default_label="unlabelled")
print(class_counts(labelled))

unique = deduplicate(labelled)
print(f"dedup removed {len(labelled) - len(unique)} repeated payloads")

balanced = balance_classes(unique, seed=0)
print(class_counts(balanced))

# %%
# Payload bytes become token ids 0..255; 256 pads every row to ``max_len``.
ds = tokenize(balanced, max_len=48)
print(ds.sequences.shape, ds.class_names)
print("row 0:", ds.sequences[0, :8], "... length", ds.lengths[0])
print("pad tokens in row 0:", int(np.sum(ds.sequences[0] == 256)))
