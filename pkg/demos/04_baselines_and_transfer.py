"""
Random noise baselines and black-box transfer
=============================================

Is the learned noise better than random noise at the same budget, and does an
attacker trained against one model and dataset still hurt another?
"""
import sys

from misrank import AttackConfig, attack_eval, gen_synthetic_dataset, noise_baseline_eval, train_attacker, train_target
from misrank.metrics import Victim, mask_frequency, transfer_eval

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5

data = gen_synthetic_dataset(seed=7)
target = train_target(data, "toy_cnn_a").model
att = train_attacker(target, data, AttackConfig(epochs=epochs, epsilon_byte=40, ratio="1/8")).attacker

_, learned = attack_eval(att, target, data)
print(f"learned noise, learned pixels      rank-1 {learned.rank1:.3f}")
for loc in ("learned", "random"):
    for kind in ("uniform", "gaussian"):
        r = noise_baseline_eval(target, data, 40, loc, kind, attacker=att, trials=5)
        print(f"{kind:8s} noise, {loc:7s} pixels      rank-1 {r.rank1:.3f}")

# where does the sampler put its 1/8 budget?
_, masks = att.perturb_all(data.tensor("query"))
freq = mask_frequency(masks)
print(f"mask frequency, top half {freq[:32].mean():.3f} vs bottom half {freq[32:].mean():.3f}")

# another architecture on the same data, and the same architecture on new identities
other = gen_synthetic_dataset(seed=99)
victims = [Victim("toy_cnn_b", "synthetic:7", train_target(data, "toy_cnn_b").model, data),
           Victim("toy_cnn_a", "synthetic:99", train_target(other, "toy_cnn_a").model, other)]
for cell in transfer_eval(att, ("toy_cnn_a", "synthetic:7"), victims):
    print(f"{cell.source} -> {cell.target}: rank-1 {cell.clean.rank1:.3f} -> {cell.report.rank1:.3f}")
