"""Pre-train on permutation inversion, then probe the frozen encoder.

Run with ``python demos/pretrain_and_probe.py [epochs]``.  Uses a reduced
dataset so it finishes in about a minute; the acceptance tests run the
full desk-scale version.  Compares the pre-trained encoder with the
untrained one on the pretext task and on family classification.
"""
import sys

from permssl.patches import NoteArrays, generate_split
from permssl.pretext import PretrainConfig, evaluate_pretext, pretrain, random_embedding_baseline
from permssl.probe import ProbeConfig, extract_embeddings, train_probe

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
train = NoteArrays.from_records(generate_split(800, "train", 0))
valid = NoteArrays.from_records(generate_split(200, "valid", 0))
test = NoteArrays.from_records(generate_split(300, "test", 0))

config = PretrainConfig(loss="fy", n_x=1, n_y=6, epochs=epochs)


def show(rec):
    print(f"  epoch {rec.epoch:3d} {rec.split:5s} loss {rec.loss:8.4f} partial ranks acc {rec.partial_ranks_accuracy:.3f}")


print(f"pre-training {config.loss} on {len(train)} notes, {config.spec.n} frequency bands")
params, _ = pretrain(train, config, valid, on_metrics=lambda r: r.split == "valid" and show(r))
baseline = random_embedding_baseline(config.spec.n, params.d, seed=config.seed)
print(f"\npretext accuracy: trained {evaluate_pretext(params, test, config):.3f}, "
      f"untrained {evaluate_pretext(baseline, test, config):.3f} (chance {1 / config.spec.n:.3f})")

for name, model in (("pre-trained", params), ("random", baseline)):
    e_tr, l_tr = extract_embeddings(model, train, config.spec)
    e_te, l_te = extract_embeddings(model, test, config.spec)
    fam = train_probe(e_tr, l_tr["family"], e_te, l_te["family"], ProbeConfig("family", 500)).value
    mse = train_probe(e_tr, l_tr["pitch"], e_te, l_te["pitch"], ProbeConfig("pitch", 500)).value
    print(f"{name:12s} family accuracy {fam:.3f}   pitch MSE {mse:7.2f} (label variance {l_te['pitch'].var():.1f})")
