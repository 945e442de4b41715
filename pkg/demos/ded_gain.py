# Dialogical emotion decoding on simulated classifiers
#
# Emotions in a conversation are sticky. The decoder rescores a whole
# dialog's posteriors with a history prior and a penalty for switching
# labels. How much that helps depends on how good the utterance-level
# classifier was to begin with.
#
#   python demos/ded_gain.py

import numpy as np

from sincser import ded
from sincser.ded import DedConfig, DialogPosteriors

# ## One dialog by hand
#
# The third turn is ambiguous; context pulls it back to class 1.

probs = [[0.1, 0.7, 0.1, 0.1],
         [0.1, 0.6, 0.2, 0.1],
         [0.1, 0.35, 0.45, 0.1],
         [0.1, 0.7, 0.1, 0.1]]
dp = DialogPosteriors.from_array(probs)
print("argmax :", np.argmax(probs, axis=1).tolist())
print("decoded:", ded.decode(dp, DedConfig()).labels)

# ## Gain vs. pre-classifier accuracy

levels = [0.3, 0.4, 0.5, 0.6, 0.75, 0.9]
rows = np.array([[(r["raw_wa"], r["ded_wa"]) for r in ded.ded_gain_study(levels, num_dialogs=50, seed=s)]
                 for s in range(20)]).mean(axis=0)
for acc, (raw, dec) in zip(levels, rows):
    print(f"pre-acc {acc:.2f}: raw {raw:.3f} -> ded {dec:.3f} ({dec - raw:+.3f})")
