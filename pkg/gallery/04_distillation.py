"""
Label-free distillation followed by a short finetune
====================================================

The student never sees a training label while distilling: its targets are the
teacher's probabilities on the labelled inputs plus the curated gallery rows.
A few hard-label epochs at a tenth of the learning rate follow. The baseline
student trains on hard labels for the same total number of epochs.
"""

from softdistill.curation import CurationConfig, curate
from softdistill.data import SyntheticConfig, generate_synthetic
from softdistill.nn import MlpSpec
from softdistill.pipelines import (
    TrainConfig,
    distill,
    evaluate,
    finetune,
    finetune_config,
    train_supervised,
    train_teacher,
)

T, V, G, oracle = generate_synthetic(SyntheticConfig(mean_scale=0.65, n_gallery=8000))
print("Bayes accuracy on val:", oracle.bayes_accuracy(V))

teacher, _ = train_teacher(T, V, MlpSpec([32, 256, 256, 10]), TrainConfig(epochs=60, weight_decay=5e-4))
print("teacher:", evaluate(teacher, V))

U, _ = curate(G, V, teacher, CurationConfig(k=400))
student_spec = MlpSpec([32, 32, 10])
dcfg = TrainConfig(loss="js_div", epochs=60, weight_decay=1e-4, seed=0)
student, log = distill(teacher, student_spec, T, U, dcfg, val=V)
print("after distillation:", evaluate(student, V))
student, _ = finetune(student, T, finetune_config(dcfg, epochs=10), val=V)
print("after finetune:   ", evaluate(student, V))

baseline, _ = train_supervised(T, V, student_spec, TrainConfig(epochs=70, weight_decay=1e-4, seed=0))
print("hard-label baseline:", evaluate(baseline, V))
