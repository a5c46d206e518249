"""
Building an unlabeled set from a gallery
========================================

Gallery rows that nearly duplicate a validation row are dropped first. The
teacher then scores what is left, and the most confident ``k`` rows of every
predicted class are kept.
"""

from softdistill.curation import CurationConfig, curate
from softdistill.data import SyntheticConfig, generate_synthetic
from softdistill.nn import MlpSpec
from softdistill.pipelines import TrainConfig, evaluate, train_teacher

T, V, G, oracle = generate_synthetic(SyntheticConfig(mean_scale=0.65, n_gallery=5000, seed=1))
print(f"train {len(T)}  val {len(V)}  gallery {len(G)}  planted copies of val rows {len(oracle.planted_ids)}")

teacher, _ = train_teacher(T, V, MlpSpec([32, 64, 10]), TrainConfig(epochs=15, warmup_epochs=2))
print("teacher val accuracy", evaluate(teacher, V)[0])

U, report = curate(G, V, teacher, CurationConfig(similarity_threshold=0.995, k=100))
print("removed as near-duplicates:", report.dedup_removed)
print("selected:", report.selected)
print("per class:", report.per_class_selected)
print("every planted copy removed:", set(oracle.planted_ids.tolist()) <= set(report.removed_ids))
