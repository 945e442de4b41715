# Where do learnable sinc cutoffs go during training?
#
# The synthetic corpus hides each emotion class in its own frequency band
# (see data_io.DEFAULT_BANDS). A sinc front end starts from a mel-spaced grid
# and only has two numbers per filter to play with, so if it learns anything
# useful the passbands should drift towards those bands.
#
#   python demos/filter_migration.py

import numpy as np

from sincser import data_io, dsp_core, models, training

# ## Data and model

data = data_io.quantize(data_io.generate_synthetic(data_io.SynthSpec(seed=0), num_utterances=2000))
model = models.build_model(models.ModelConfig(seed=0))


def show(bank, title):
    print(title)
    for i, (f1, f2) in enumerate(bank.cutoffs()):
        k = dsp_core.time_domain_kernel(bank.filters[i], bank.window).coeffs
        share = dsp_core.band_energy_fraction(k, data_io.DEFAULT_BANDS)
        print(f"  filter {i}: {f1:7.1f} .. {f2:7.1f} Hz   in-band energy {share:.2f}")


print("class bands (Hz):", data_io.DEFAULT_BANDS)
show(model.sinc_bank(), "mel initialisation")

# ## Train
#
# Ten epochs is plenty here; the cutoffs move on a much larger learning rate
# than the rest of the network (OptimizerConfig.cutoff_lr_scale).

log = training.train(model, data, training.OptimizerConfig(seed=0), epochs=10,
                     policy=training.ChunkPolicy(seed=0))
print("val WA per epoch:", np.round(log.series("val", "wa"), 3))
show(model.sinc_bank(), "after training")

# A filter counts as "in band" once 60% of its DFT energy sits inside the
# union of class bands.
shares = [dsp_core.band_energy_fraction(k, data_io.DEFAULT_BANDS) for k in model.first_layer_kernels()]
print(f"in-band filters: {np.mean(np.array(shares) >= 0.6):.2f}")
