# Sinc front end vs. an unconstrained conv layer
#
# Both models share every setting except the first layer: the cnn learns
# F * L free taps, the sinc model only 2 * F cutoffs. Here we track
# validation WA epoch by epoch on the default synthetic corpus.
#
#   python demos/convergence.py [seed]

import sys

import numpy as np

from sincser import data_io, models, training

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
data = data_io.quantize(data_io.generate_synthetic(data_io.SynthSpec(seed=0), num_utterances=2000))

for variant in ("sinc_lstm", "sinc_dnn", "cnn"):
    model = models.build_model(models.ModelConfig(acoustic_variant=variant, seed=seed))
    log = training.train(model, data, training.OptimizerConfig(seed=seed), epochs=5,
                         policy=training.ChunkPolicy(seed=seed))
    print(f"{variant:9s} first-layer params {model.first_layer_parameter_count():5d}  "
          f"val WA {np.round(log.series('val', 'wa'), 3)}  "
          f"epochs to 0.9: {log.epochs_to_reach(0.9)}")
