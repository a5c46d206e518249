"""
Stopping and resuming training exactly
======================================

A checkpoint holds parameters, optimizer velocities, the step counter and the
seed. Shuffles are derived from (seed, epoch), so continuing from any epoch
boundary replays the uninterrupted run bit for bit.
"""

from softdistill.data import SyntheticConfig, generate_synthetic
from softdistill.nn import MlpSpec
from softdistill.pipelines import TrainConfig, checkpoint_bytes, parse_checkpoint, train_teacher

T, V, _, _ = generate_synthetic(SyntheticConfig(n_train=500, n_val=500, n_gallery=100))
spec = MlpSpec([32, 32, 10])
cfg = TrainConfig(epochs=8, warmup_epochs=2, seed=3)

saved = {}
straight, _ = train_teacher(T, V, spec, cfg, on_epoch=lambda cp, rec: saved.update({cp.epoch: checkpoint_bytes(cp)}))
print("checkpoint size after epoch 4:", len(saved[4]), "bytes")

resumed, tail = train_teacher(T, V, spec, cfg, resume=parse_checkpoint(saved[4]))
print("epochs replayed:", [r.epoch for r in tail])
print("bitwise identical to the straight run:", resumed.equals(straight))
