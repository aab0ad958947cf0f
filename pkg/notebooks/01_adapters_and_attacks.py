"""Walkthrough: a frozen backbone, a low-rank adapter and the attacks it is trained against.

Run with ``python notebooks/01_adapters_and_attacks.py``.
"""

import numpy as np

from advlora import build_model, evaluate, fgsm, make_blobs, pgd, sample_few_shot, train
from advlora.attack import AttackConfig
from advlora.experiments import desk_trend_config, make_model
from advlora.linalg import PerturbationSet
from advlora.model import Batch, backward, chain_rule_residual
from advlora.trainer import TrainConfig

# A 10-class toy task: Gaussian blobs around random unit centres.
pool, test = make_blobs(K=10, n=32, per_class=100, spread=0.2, seed=0)
print(f"train pool {pool.features.shape}, test {test.features.shape}")
print(f"nearest-centre accuracy on test: {test.meta['nearest_center_acc']:.3f}")

# The model keeps every backbone matrix frozen and learns W = w0 + s * B @ A.
# B starts at zero, so before training the adapter changes nothing.
cfg = desk_trend_config()
model = make_model(cfg, pool)
for (layer, name), part in model.adapters():
    print(f"layer {layer} {name}: w0 {part.w0.shape}, A {part.a.shape}, B {part.b.shape}, |B| = {np.linalg.norm(part.b):.1f}")

# Gradients for A and B come from the dense weight gradient by the chain rule.
batch = Batch(test.features[:16], test.labels[:16])
print(f"chain-rule residual at init: {chain_rule_residual(model, batch):.2e}")

# Attacks. One PGD step of size eps is exactly FGSM.
eps = 0.03
linf = PerturbationSet("linf", eps, test.dim)
x_fgsm = fgsm(model, batch, AttackConfig("fgsm", linf, eps))
x_pgd1 = pgd(model, batch, AttackConfig("pgd", linf, eps, 1))
print("FGSM == PGD-1:", np.array_equal(x_fgsm, x_pgd1))

# Few-shot adversarial fine-tuning: 4 examples per class.
support = sample_few_shot(pool, 4, seed=0)
attack = AttackConfig("pgd", linf, 2.5 * eps / 20, 20)
before = evaluate(model, test, attack)
cfg_train = TrainConfig(lr=0.01, total_iterations=500, tau=2, eps=0.2, delta_mode="reset_per_batch")
trained, history = train(model, support, cfg_train)
after = evaluate(trained, test, attack)
print(f"loss {history.column('loss')[0]:.3f} -> {history.column('loss')[-10:].mean():.3f}")
print(f"clean {before.clean_acc:.3f} -> {after.clean_acc:.3f}, robust {before.robust_acc:.3f} -> {after.robust_acc:.3f}")
