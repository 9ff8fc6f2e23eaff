"""The three reconstruction-based detectors on clean and adversarial inputs.

GTD flags a large winning-capsule reconstruction error, LBD flags inputs
whose winning capsule does not have the smallest error, and CCD flags inputs
whose reconstruction is classified differently. Combined with OR.
"""

import numpy as np

from capsdefense import attacks, datasets, detectors, model, training

train_set = datasets.synth_toy(seed=7, per_class=60, size=12, split="train")
test_set = datasets.synth_toy(seed=7, per_class=20, size=12, split="test")

config = model.ModelConfig(
    channels=1, height=12, width=12,
    num_capsules=13, num_classes=10, caps_dim=4,
    in_capsules=4, trunk_channels=(8, 16), pool_after=(0, 1),
    decoder_hidden=64, decoder_reshape_channels=16,
    decoder_deconv_channels=(12, 8),
)
schedule = training.TrainSchedule(batch_size=25, learning_rate=2e-3,
                                  steps=400, seed=11, log_every=0)
net = training.train(train_set, config, schedule)
net.set_trainable(False)

clean = test_set.images[:100]
clean_batch = detectors.analyze(net, clean)
print("clean inputs, per-detector flag rates:")
print(f"  lbd {clean_batch.lbd_flags.mean():.2f}  ccd {clean_batch.ccd_flags.mean():.2f}")

# pick the reference threshold: smallest theta with clean FPR <= 5%
curve0 = detectors.sweep(net, clean, clean[:1], np.zeros(1, bool),
                         ensemble=("gtd",), clean_batch=clean_batch)
theta = detectors.reference_theta(curve0)
print(f"reference theta (GTD alone, FPR<=5%): {theta}")

# attack a few correctly classified inputs, then look at the verdicts
preds = net.classify(test_set.images).predictions
ok = preds == test_set.labels
x, y = test_set.images[ok][:30], test_set.labels[ok][:30]
cfg = attacks.AttackConfig(family="pgd", eps_inf=0.3, step_size=0.02, iterations=40)
targets = attacks.choose_targets(y, 10, "random", seed=1)
batch = attacks.pgd(x, y, targets, net, cfg)
print(f"pgd success rate: {batch.success.mean():.2f}")

adv_batch = detectors.analyze(net, batch.adversarials)
for name, flags in [
    ("gtd", adv_batch.gtd_flags(theta)),
    ("lbd", adv_batch.lbd_flags),
    ("ccd", adv_batch.ccd_flags),
    ("combined", adv_batch.combined_flags(theta)),
]:
    print(f"  {name:8s} catches {flags.mean():.2f} of adversarials")

caught = adv_batch.combined_flags(theta)
undetected = float((batch.success & ~caught).mean())
print(f"undetected rate at theta={theta}: {undetected:.2f}")

# one verdict in detail
v = detectors.detect_all(batch.adversarials[0], net, theta)
np.set_printoptions(precision=2, suppress=True)
print("per-class recon errors of one adversarial:", v.recon_errors)
print("flags: gtd", v.gtd_flag, "lbd", v.lbd_flag, "ccd", v.ccd_flag)
