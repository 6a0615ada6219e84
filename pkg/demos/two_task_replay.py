"""Train on MNIST then Fashion with and without generative replay.

Needs the imported tasks (see README).  Each run takes several CPU minutes;
pass --quick to cap the steps per epoch.

    python demos/two_task_replay.py --data-root data --quick
"""
import argparse

from lvaegan.data import load_stream
from lvaegan.nets import ArchitectureSpec
from lvaegan.trainer import TrainConfig, run_sequence

p = argparse.ArgumentParser()
p.add_argument("--data-root", default="data")
p.add_argument("--quick", action="store_true")
args = p.parse_args()

stream = load_stream(["mnist", "fashion"], root=args.data_root, n_train=5000)
arch = ArchitectureSpec(kind="mlp", dim_z=16, gen_hidden=[256, 512], critic_hidden=[512, 256],
                        enc_hidden=[512, 256], class_hidden=[512, 256])
mnist_test = stream[0].test


def report(label):
    def hook(state, task, epoch):
        acc = (state.bundle.classify(mnist_test.x).argmax(1) == mnist_test.y).float().mean()
        print(f"[{label}] epoch {state.epoch:2d} on {task.name:8s} MNIST accuracy {float(acc):.3f}")
    return hook


for replay in ("generative", "none"):
    cfg = TrainConfig(replay=replay, epochs_per_task=2 if args.quick else 10,
                      max_steps_per_epoch=20 if args.quick else None)
    run_sequence(stream, arch, cfg, hooks=[report(replay)])
