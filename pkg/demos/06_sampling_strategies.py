"""Dataset manifests, the three loss-pair strategies, and the aliasing guard.

Run: python3 demos/06_sampling_strategies.py
"""

from collections import Counter

from deformreg import (
    DatasetManifest,
    Patient,
    Scan,
    build_plan,
    dataset_weights,
    epoch_plan,
    erratum_guard,
)

# A multi-parametric brain dataset: each patient has co-registered T1w and
# T2w scans, so the loss pair can be sampled independently of the input pair.
brain = DatasetManifest(
    name="brain-demo",
    region="brain",
    pairing="inter-patient",
    patients=tuple(
        Patient(f"p{i}", (Scan("T1w"), Scan("T2w"))) for i in range(8)
    ),
    label_randomization=True,
    training_pct=60.0,
)
# A single-modality lung dataset: intra-patient pairs, no randomization.
lung = DatasetManifest(
    name="lung-demo",
    region="lung",
    pairing="intra-patient",
    patients=tuple(
        Patient(f"q{i}", (Scan("CT"), Scan("CT"))) for i in range(5)
    ),
    label_randomization=False,
    training_pct=40.0,
)

for strategy in ("B", "F", "R"):
    plans = build_plan([brain], strategy, 4000, seed=1)
    combos = Counter((p.input_modality_a, p.loss_modality_a) for p in plans)
    aliased = sum(p.loss_scan_a == p.input_scan_a for p in plans) / len(plans)
    print(f"strategy {strategy}: input/loss modality combos {dict(combos)}; "
          f"side-A aliasing fraction {aliased:.2f}")
print("B copies the input pair; F pins one shared modality for both loss sides;")
print("R draws each loss side independently.\n")

# Weighted epoch sampling honors the configured percentages.
weights = dataset_weights([brain, lung], mode="training")
plans = epoch_plan([brain, lung], weights, "F", pairs_per_epoch=4000, seed=2)
freq = Counter(p.dataset for p in plans)
print(f"epoch of {len(plans)} pairs, weights {weights}: {dict(freq)}")

# The guard certifies that the loss pair varies independently of the inputs.
verdict = erratum_guard(build_plan([brain], "F", 5000, seed=3), "F")
print(f"guard on correct F plans: {verdict}")

bugged = [
    type(p)(**{**p.csv_row(),
               "loss_scan_a": p.input_scan_a, "loss_scan_b": p.input_scan_b,
               "loss_modality_a": p.input_modality_a,
               "loss_modality_b": p.input_modality_b})
    for p in build_plan([brain], "F", 5000, seed=4)
]
print(f"guard on an aliased sampler: {erratum_guard(bugged, 'F')}")
