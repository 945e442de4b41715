# Acoustic, linguistic and fused models on a harder corpus
#
# With band_confusion > 0 some utterances borrow another class's band, and
# with token_purity < 1 the transcripts only partly give the class away.
# Neither modality is enough on its own; the fused model should beat both.
#
#   python demos/fusion.py

from sincser import data_io, models, training

spec = data_io.SynthSpec(seed=0, band_confusion=0.25, token_purity=0.35)
data = data_io.quantize(data_io.generate_synthetic(spec, num_utterances=2000))

for modality in ("acoustic", "linguistic", "fused"):
    model = models.build_model(models.ModelConfig(modality=modality, seed=0))
    log = training.train(model, data, training.OptimizerConfig(seed=0), epochs=6,
                         policy=training.ChunkPolicy(seed=0))
    last = [r for r in log.records if r["split"] == "val"][-1]
    print(f"{modality:10s} val WA {last['wa']:.3f}  UA {last['ua']:.3f}")
