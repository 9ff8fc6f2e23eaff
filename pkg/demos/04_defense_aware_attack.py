"""PGD versus the detector-aware CC-PGD.

CC-PGD spends part of each iteration lowering the winning reconstruction
error and the cycle-consistency loss, trading raw success rate for a higher
undetected rate. This script prints both numbers side by side and writes the
two threshold-sweep curves as CSV.
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
net = training.train(train_set, config,
                     training.TrainSchedule(batch_size=25, learning_rate=2e-3,
                                            steps=400, seed=11, log_every=0))
net.set_trainable(False)

preds = net.classify(test_set.images).predictions
ok = preds == test_set.labels
x, y = test_set.images[ok][:40], test_set.labels[ok][:40]
targets = attacks.choose_targets(y, 10, "random", seed=1)

base = attacks.AttackConfig(eps_inf=0.25, step_size=0.02, iterations=60,
                            alpha1=1.0, alpha2=0.0, alpha3=20.0,
                            stage_balance=0.5)

pgd_batch = attacks.pgd(x, y, targets, net, base)
cc_batch = attacks.ccpgd_two_stage(x, y, targets, net, base)

clean = test_set.images[:100]
clean_batch = detectors.analyze(net, clean)
theta = detectors.reference_theta(
    detectors.sweep(net, clean, x, np.zeros(len(x), bool),
                    ensemble=("gtd",), clean_batch=clean_batch)
)

for name, batch in [("pgd", pgd_batch), ("cc-pgd", cc_batch)]:
    adv = detectors.analyze(net, batch.adversarials)
    caught = adv.combined_flags(theta)
    und = float((batch.success & ~caught).mean())
    print(f"{name:7s} success {batch.success.mean():.2f}   "
          f"undetected {und:.2f}   mean winning-recon error "
          f"{adv.winning_errors.mean():.2f}")
    curve = detectors.sweep(net, clean, batch.adversarials, batch.success,
                            clean_batch=clean_batch, attack_name=name)
    path = f"/tmp/sweep_{name.replace('-', '')}.csv"
    with open(path, "w") as f:
        f.write(curve.to_csv())
    print(f"        sweep curve -> {path}")
