"""From target text to instruction set: inference, paraphrase
augmentation, and per-iteration pair sampling."""

from attacklab.instructions import (INFER_PROMPT, REPHRASE_PROMPT,
                                    OfflineProvider, sample_pair)
from attacklab.rng import SplitMix64

target_text = "A dinner table covered with plates of warm food."

# These are the exact prompts a remote LLM provider would receive.
print("--- inference prompt ---")
print(INFER_PROMPT.instantiate(target_text=target_text))

# The offline stub is deterministic: longest content word, fixed frame.
provider = OfflineProvider(seed=0)
inferred = provider.infer_instruction(target_text)
print("\ninferred instruction:", inferred)

print("\n--- rephrasing prompt (sent for n = 10) ---")
print(REPHRASE_PROMPT.instantiate(count=9, seed_instruction=inferred))

q = provider.rephrase_instructions(inferred, 10)
print(f"\ninstruction set ({q.provenance}, n = {q.n}):")
for i, instruction in enumerate(q.instructions):
    marker = "*" if i == 0 else " "
    print(f"  {marker} {instruction}")

# Each PGD iteration draws one (p_i, p_j) pair with replacement.
rng = SplitMix64(123)
print("\nsampled pairs for the first five iterations:")
for it in range(5):
    p_i, p_j = sample_pair(q, rng)
    print(f"  iter {it + 1}: ({q.instructions.index(p_i)}, "
          f"{q.instructions.index(p_j)})")

# A remote provider takes the same calls; configure it with a
# chat-completions endpoint and set ATTACKLAB_LLM_KEY:
#   RemoteProvider(RemoteConfig(endpoint=..., model=...))
