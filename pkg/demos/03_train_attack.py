"""
Learning to mis-rank
====================

Trains the generator, multi-stage discriminator and sampler against a frozen
target, then compares clean and attacked retrieval and saves a few examples.
Pass the number of attack epochs as the first argument (50 is the full run).
"""
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from misrank import AttackConfig, attack_eval, gen_synthetic_dataset, train_attacker, train_target

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
ratio = sys.argv[2] if len(sys.argv) > 2 else "1"

data = gen_synthetic_dataset(seed=7)
target = train_target(data, "toy_cnn_a").model

result = train_attacker(target, data, AttackConfig(epochs=epochs, ratio=ratio), out_dir="attack_run")
for row in result.epoch_log:
    print(f"epoch {row['epoch']:2d}  tau {row['tau']:.3f}  xent {row['L_xent']:.3f}  "
          f"etri {row['L_etri']:.1f}  ms-ssim {row['msssim']:.4f}")

att = result.attacker
clean, attacked = attack_eval(att, target, data)
print(f"rank-1 {clean.rank1:.3f} -> {attacked.rank1:.3f}   mAP {clean.mAP:.3f} -> {attacked.mAP:.3f}")

# originals, adversarial images, amplified noise, and masks
x = data.tensor("query")[:4]
with torch.no_grad():
    adv = att.perturb(x)
noise = (adv.perturbed - x) / (2 * att.config.epsilon_byte / 255) + 0.5
fig, axes = plt.subplots(4, 4, figsize=(4, 8))
for i in range(4):
    for ax, img in zip(axes[:, i], (x[i], adv.perturbed[i], noise[i], adv.mask[i].expand(3, -1, -1))):
        ax.imshow(img.permute(1, 2, 0).clamp(0, 1).numpy())
        ax.axis("off")
fig.savefig("adversarial_examples.png", dpi=100)
