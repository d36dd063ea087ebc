"""How the InfoNCE temperature shapes the contrastive signal.

The same batch of noisy embedding pairs is scored at several
temperatures.  A lower temperature sharpens the softmax over the batch:
the correct partner gets more probability mass, but every pair that is
not clearly separated is punished harder.

    python demos/03_temperature.py
"""
import torch

from clipose.losses import logit_scale, nce_pair_loss, similarity

torch.manual_seed(0)
n, d = 8, 32
a = torch.nn.functional.normalize(torch.randn(n, d), dim=1)
b = torch.nn.functional.normalize(a + 0.6 * torch.randn(n, d), dim=1)
print(f"log n = {torch.log(torch.tensor(float(n))).item():.3f} (the loss of a batch that carries no signal)\n")
print(" tau   scale   loss   mean p(correct)")
for tau in (0.2, 0.07, 0.03, 0.02):
    p = torch.softmax(similarity(a, b, logit_scale(tau)), dim=1).diag().mean()
    print(f"{tau:5.2f} {logit_scale(tau):6.1f} {nce_pair_loss(a, b, tau).item():7.3f}   {p.item():.3f}")
