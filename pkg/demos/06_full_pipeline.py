"""The three-stage pipeline end to end, at reduced scale.

Stage 1 verifies the perturbed safe controller and searches for the largest
verifiable perturbation box; stage 2 trains the masked agent inside it;
stage 3 re-verifies the trained deterministic policy.  Artifacts (reports,
samples, policy, manifests) land in ./demo_out.

The same flow is scriptable from the command line:

    saferl expand        --out demo_out
    saferl train         --out demo_out --steps 100000
    saferl verify-agent  --out demo_out --policy demo_out/policy.bin
    saferl histogram     --out demo_out --policy demo_out/policy.bin
"""

from dataclasses import replace

from saferl.pipeline import (
    HistogramConfig,
    TrainingConfig,
    VerifyConfig,
    default_config,
    run_expand,
    run_histogram,
    run_train,
    run_verify_agent,
)
from saferl.ppo import PpoConfig

cfg = default_config()
cfg = replace(
    cfg,
    verification=VerifyConfig(n_samples=25, epsilon=0.05, seed=11),
    training=TrainingConfig(
        ppo=PpoConfig(steps=20_000, eval_episodes=20), seed=5, pilot_episodes=6
    ),
    histogram=HistogramConfig(n_samples=40, seed=23),
    output_dir="demo_out",
)

print("stage 1: expansion search + verification of the perturbed safe controller")
result, _ = run_expand(cfg)
print(f"  verified box {result.box}, rho_star {result.verified_report.rho_star:+.3f}")

print("stage 2: masked training inside the verified box")
summary, paths = run_train(cfg)
print(
    f"  reward scale {summary['r_diff']:.1f}, deterministic eval "
    f"{summary['eval_mean_return']:+.3f} +- {summary['eval_std_return']:.3f}"
)

print("stage 3: verification of the trained deterministic policy")
report, _ = run_verify_agent(cfg, paths["policy"])
print(f"  rho_star {report.rho_star:+.3f} at confidence {report.confidence:.3f}")

print("robustness histograms (safe deterministic / safe perturbed / agent)")
hist, _ = run_histogram(cfg, paths["policy"])
for name in ("safe", "perturbed", "agent"):
    stats = hist[name]
    print(f"  {name:9s}: mean {stats['mean']:+.3f}, std {stats['std']:.3f}")
print("benchmark reference:", hist["benchmark"])
print("artifacts in demo_out/")
