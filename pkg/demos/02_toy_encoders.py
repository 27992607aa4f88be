"""The model zoo: vision encoder, hashing text encoder, the
instruction-conditioned projector, and the aligned image/text pair."""

import numpy as np

from attacklab import tensor as T
from attacklab.encoders import (AlignPair, SurrogateModel, TextEncoder,
                                VisionEncoder, export_params, import_params)

rng = np.random.default_rng(0)
image = rng.uniform(0.2, 0.8, (32, 32, 3))

# A 32x32 image becomes 64 patch tokens plus one pooled token.
vision = VisionEncoder(seed=7)
tokens = vision.encode(T.Tensor(image))
print("vision tokens:", tokens.shape)

# Same seed, same bits: the whole zoo is deterministic.
again = VisionEncoder(seed=7).encode(T.Tensor(image))
print("bitwise deterministic:", np.array_equal(tokens.data, again.data))

# Text goes through a hashing tokenizer; similar sentences share tokens.
text = TextEncoder(seed=3)
e1 = T.l2_normalize(text.embed("Two dogs chasing a ball across the lawn."))
e2 = T.l2_normalize(text.embed("Dogs chasing a ball on the lawn."))
e3 = T.l2_normalize(text.embed("The quarterly earnings report."))
print("\nparaphrase cosine:  %.3f" % float(e1.data @ e2.data))
print("unrelated cosine:   %.3f" % float(e1.data @ e3.data))

# The surrogate produces instruction-aware features M(x, p): the same
# image answers differently to different instructions.
surrogate = SurrogateModel.from_seed(11)
fa = surrogate.features(T.Tensor(image), "Describe the colors in detail.")
fb = surrogate.features(T.Tensor(image), "What objects are shown?")
print("\nfeature length:", fa.shape[0])
print("instruction sensitivity (L-inf):",
      float(np.abs(fa.data - fb.data).max()))

# The align pair embeds images and texts into one unit sphere.
align = AlignPair.from_seed(5)
iv = align.image_embedding(T.Tensor(image))
tv = align.text_embedding("a smooth gradient with a bright disc")
print("\n|f(x)| =", float(np.linalg.norm(iv.data)),
      " f(x).g(t) =", float(iv.data @ tv.data))

# Parameters round-trip through a flat blob with a JSON header.
import tempfile, pathlib
with tempfile.TemporaryDirectory() as tmp:
    path = pathlib.Path(tmp) / "surrogate.params"
    export_params(surrogate, path)
    clone = SurrogateModel.from_seed(999)  # different weights...
    import_params(clone, path)            # ...until imported
    same = clone.features(T.Tensor(image), "What objects are shown?")
    print("\nexport/import round-trip exact:",
          np.array_equal(same.data, fb.data))
