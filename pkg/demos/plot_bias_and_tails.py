"""
Spotting a biased mean model, then calibrating each tail
========================================================

Signed residuals of one mean model, split by group, show whether the model
tends to over- or under-predict for one of them. Calibrating the lower and
upper endpoints separately then bounds each tail's miss rate on its own.
"""

from eqcov import (
    CalibrationSpec,
    Learner,
    SYNTHETIC_PRESETS,
    bias_report,
    fit_base_models,
    generate_synthetic,
    monte_carlo_group_coverage,
    split_train_calibration,
)

preset = SYNTHETIC_PRESETS["hetero"]
data = generate_synthetic(preset, seed=3)
split = split_train_calibration(data, 0.5, seed=0)

mean_model = Learner("linear").fit("cp", data.X[split.proper_train], data.y[split.proper_train])
report = bias_report(mean_model, data, split.calibration)
print(report.summary_text())

spec = CalibrationSpec(method="cqr", alpha=0.1, alpha_lo=0.05, alpha_hi=0.05)
models = fit_base_models(data, split.proper_train, spec, Learner("linear"))
sim = monte_carlo_group_coverage(models, spec, preset, m=99, trials=20_000, seed=0)
for a, tc in sim.items():
    print(f"group {a}: coverage {tc.coverage.estimate:.3f}, "
          f"below {tc.lower_miss.estimate:.3f}, above {tc.upper_miss.estimate:.3f}")
