"""
Choosing which pixels to attack, and staying inside the budget
================================================================

The discriminator's response map becomes pixel probabilities through a Gumbel
softmax; KeepTopk keeps exactly k of them. The resulting mask gates the
generator's noise, and every adversarial image is certified against eps/255.
"""
import torch

from misrank.generator import certify_budget, compose_adversarial
from misrank.sampler import GumbelDraw, gumbel_probs, parse_ratio, positive_lambda, ratio_to_k, sample_mask, topk_mask

h, w = 64, 32
for ratio in ("1", "1/8", "1/64"):
    print(f"ratio {ratio:>4}: k = {ratio_to_k(parse_ratio(ratio), h, w)}")

# a response map that prefers the top half of the image
raw = torch.zeros(1, h, w)
raw[:, : h // 2] = 2.0
for tau in (5.0, 1.0, 0.1):
    p = gumbel_probs(positive_lambda(raw), tau, GumbelDraw.sample((1, h, w), seed=0))
    print(f"tau {tau}: probability mass on the top half {p[:, : h // 2].sum():.3f}")

mask = sample_mask(raw, k=256, tau=1.0, draw=GumbelDraw.sample((1, h, w), seed=1))
print("pixels kept:", int(mask.hard.sum()), " of which in the top half:", int(mask.hard[:, : h // 2].sum()))

# the mask is binary going forward but passes gradients straight to p
p = mask.soft.detach().requires_grad_(True)
(topk_mask(p, 256).hard * 3.0).sum().backward()
print("straight-through gradient is 3 everywhere:", bool((p.grad == 3.0).all()))

# noise far outside the budget is projected, clipped and certified
img = torch.rand(1, 3, h, w)
adv = compose_adversarial(img, torch.randn(1, 3, h, w), mask.hard, epsilon_byte=16)
print(f"max |I' - I| = {certify_budget(img, adv.perturbed, 16) * 255:.4f} / 255")
