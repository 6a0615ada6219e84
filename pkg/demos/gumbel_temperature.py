"""How the relaxed class code sharpens as the temperature falls.

The Gumbel noise is held fixed, so the argmax never changes with T: its
frequencies already match the target distribution.  Only the spread of the
relaxed vector does.

    python demos/gumbel_temperature.py
"""
import torch

from lvaegan.latent import GumbelDraw, entropy, gumbel_softmax, harden

logits = torch.tensor([2.0, 0.5, 0.0, -1.0])
n = 50_000
draw = GumbelDraw.sample((n, 4), seed=0)

print("target probabilities:", [round(p, 3) for p in torch.softmax(logits, 0).tolist()])
for temp in (5.0, 1.0, 0.67, 0.1, 0.01):
    y = gumbel_softmax(logits.expand(n, 4), temp, draw)
    freq = harden(y).mean(0)
    print(f"T={temp:<5} mean entropy {float(entropy(y).mean()):.3f}  "
          f"argmax frequencies {[round(f, 3) for f in freq.tolist()]}")
