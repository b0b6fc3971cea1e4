"""Condition drop and shuffle with a curriculum.

Each training sample keeps its own identity (paired), borrows another photo of
the same person (shuffled) or loses the identity altogether (dropped). The
shuffle share grows linearly through training, making the task harder over time.
"""
from collections import Counter

import numpy as np

from faceadapt.config import CurriculumSchedule
from faceadapt.curriculum import generate_synthetic_identity_dataset, sample_condition, schedule_shuffle_prob

sched = CurriculumSchedule(total_steps=2000)
dataset = generate_synthetic_identity_dataset(10, 10, 64, rng=7)

for step in (0, 500, 1000, 1500, 2000):
    rng = np.random.default_rng(step)
    counts = Counter(sample_condition(i % 100, step, sched, rng, dataset).case.value
                     for i in range(20000))
    shares = ", ".join(f"{k} {v / 20000:.3f}" for k, v in sorted(counts.items()))
    print(f"step {step:4d}: shuffle prob {schedule_shuffle_prob(step, sched):.2f} -> {shares}")

rng = np.random.default_rng(1)
plan = sample_condition(3, 2000, sched, rng, dataset)
while plan.case.value != "shuffled":
    plan = sample_condition(3, 2000, sched, rng, dataset)
src = dataset.records[plan.source_record]
print(f"record 3 shuffled to record {plan.source_record};",
      "same identity:", src.identity_id == dataset.records[3].identity_id)
