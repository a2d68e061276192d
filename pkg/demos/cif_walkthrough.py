"""Step through integrate-and-fire on a three-frame input.

Frames are unit vectors, so every fired token shows exactly how much of
each frame it absorbed.  The second half shows the teacher-forced variant
used in training, where weights are rescaled so the token count is exact.
"""

import numpy as np

from cifalign.cif import (AlignmentWeights, FrameSequence, extract_boundaries, integrate_and_fire,
                          quantity_loss, scale_weights)

np.set_printoptions(precision=3, suppress=True)

frames = FrameSequence(np.eye(3), hop_ms=20.0)
alpha = AlignmentWeights([0.5, 0.7, 0.8])

fired = integrate_and_fire(frames, alpha)
print("weights        ", alpha.alpha.data)
print("fired tokens   ", fired.fired_count, "(weight mass", fired.n_predicted, ")")
print("token vectors\n", fired.aligned.data)
print("frame shares (token x frame)\n", fired.contributions)
for k, left, right in extract_boundaries(fired).entries:
    print(f"token {k}: {left:7.3f} .. {right:7.3f} ms")

# training sees the true count N=3 and rescales the weights before firing
scaled = scale_weights(alpha, 3)
forced = integrate_and_fire(frames, scaled)
print("\nscaled weights ", scaled.alpha.data)
print("fired tokens   ", forced.fired_count)
print("quantity loss  ", quantity_loss(alpha, 3).item())
