"""Walk through the attack one step at a time on the synthetic shape worlds.

    python3 demos/attack_walkthrough.py            # quick, reduced epochs (a few CPU minutes)
    python3 demos/attack_walkthrough.py --full     # desk preset settings (several CPU minutes)

The attacker never sees the victim's data. It trains a target / non-target
decoder on public out-of-distribution shapes, learns a bounded residual that
erases the target features, picks one residual as the trigger, and stamps it
on a handful of correctly labelled target-class training images.
"""

import argparse

import numpy as np
import torch

from pood_backdoor import synthetic
from pood_backdoor.data import binarize_pood, check_disjoint
from pood_backdoor.evaluation import evaluate_attack
from pood_backdoor.models import DecoderModel, EncoderModel, TrainHyper, VictimModel, train_decoder, train_victim
from pood_backdoor.poison import inject, plan_poison
from pood_backdoor.trigger import select_fixed_trigger, train_encoder

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
args = parser.parse_args()
torch.set_num_threads(1)
quick = not args.full

# 1. two disjoint worlds: the victim's classes and the attacker's public shapes
train = synthetic.make_domain("victim", 500, size=32, seed=0, role="victim_train")
test = synthetic.make_domain("victim", 200, size=32, seed=0, role="victim_test")
pood = synthetic.make_domain("pood", 600, size=32, seed=0, role="pood")
print("victim classes:", train.class_names)
print("public classes:", pood.class_names)
print("disjointness:", check_disjoint(train, pood))
target = train.class_index("cross")

# 2. binarize the public data around the nearest public class and train the decoder
binary = binarize_pood(pood, "thin cross")
decoder = DecoderModel.build("small-cnn", train.shape, width=32, seed=0)
train_decoder(binary, decoder, TrainHyper(epochs=15 if quick else 30, lr=0.05, batch_size=64, augmentation=["crop", "hflip"]))
print("decoder:", decoder.metrics)

# 3. encoder: residuals bounded by 8/255 that push target images to non-target
encoder = EncoderModel.build(train.shape, 8 / 255, width=16, seed=0)
train_encoder(encoder, decoder, binary.target_images,
              TrainHyper(epochs=8 if quick else 20, lr=1e-3, optimizer="adam", weight_decay=0.0, batch_size=32))
print("encoder:", encoder.metrics)

# 4. the fixed trigger is the residual of the candidate with the largest loss gain
trigger = select_fixed_trigger(encoder, decoder, binary.target_images)
print("trigger: candidate", trigger.provenance["index"], "score", round(trigger.provenance["score"], 3),
      "max |residual| * 255 =", round(float(np.abs(trigger.residual).max()) * 255, 3))

# 5. clean-label poisoning of 1% of the training set, then train both victims
plan = plan_poison(train, target, 0.01, seed=0)
poisoned = inject(train, plan, trigger, scale=2.0)
print(f"poisoned {len(plan)} of {len(train)} images, labels untouched:",
      bool((poisoned.labels == train.labels).all()), "max change * 255 =", round(float(poisoned.audit.max()) * 255, 3))
hyper = TrainHyper(epochs=18 if quick else 30, lr=0.05, batch_size=128, augmentation=["crop", "hflip"])
for name, data in (("clean", train), ("poisoned", poisoned.dataset)):
    victim = VictimModel.build("small-cnn", train.shape, train.num_classes, width=32, seed=1)
    train_victim(data, victim, hyper)
    r = evaluate_attack(victim, test, trigger, target, amplification=2.0, label=name)
    print(f"{name:9s} ACC {r.acc:5.1f}  Tar-ACC {r.tar_acc:5.1f}  ASR {r.asr:5.1f}")
