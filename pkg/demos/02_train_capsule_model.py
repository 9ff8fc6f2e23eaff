"""Train a small capsule classifier on the synthetic glyph dataset.

Runs in about a minute on a laptop CPU. The model splits its capsules into
class capsules (vector length = class score) and background capsules, and a
deconvolutional decoder reconstructs the input from the winning capsule.
"""

import numpy as np

from capsdefense import datasets, model, training

train_set = datasets.synth_toy(seed=7, per_class=60, size=12, split="train")
test_set = datasets.synth_toy(seed=7, per_class=20, size=12, split="test")
print(f"train {train_set.images.shape}, test {test_set.images.shape}")

config = model.ModelConfig(
    channels=1, height=12, width=12,
    num_capsules=13, num_classes=10, caps_dim=4,
    in_capsules=4, trunk_channels=(8, 16), pool_after=(0, 1),
    decoder_hidden=64, decoder_reshape_channels=16,
    decoder_deconv_channels=(12, 8),
)
schedule = training.TrainSchedule(batch_size=25, learning_rate=2e-3,
                                  steps=400, seed=11, log_every=100)

net = training.train(train_set, config, schedule, log=print)
net.set_trainable(False)

acc = training.evaluate_accuracy(net, test_set)
print(f"test accuracy: {acc:.3f}")

# class-capsule lengths are the prediction scores
out = net.classify(test_set.images[:3])
np.set_printoptions(precision=2, suppress=True)
print("lengths:", out.lengths.data)
print("predictions:", out.predictions, "labels:", test_set.labels[:3])

# the reconstruction error is small for the winning class, large for losers
recon_win = net.reconstruct_for_class(test_set.images[:1], int(out.predictions[0]))
recon_lose = net.reconstruct_for_class(test_set.images[:1], int((out.predictions[0] + 1) % 10))
x = test_set.images[:1]
print("winning recon error:", float(np.sqrt(((recon_win.data - x) ** 2).sum())))
print("losing  recon error:", float(np.sqrt(((recon_lose.data - x) ** 2).sum())))

model.save_checkpoint(net, "/tmp/capsdefense_demo.caps")
print("checkpoint saved to /tmp/capsdefense_demo.caps")
