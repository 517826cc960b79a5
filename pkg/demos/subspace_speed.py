"""
Step cost does not grow with the input dimension
================================================

With inducing inputs ``Z = A X̃`` every kernel evaluation happens in the
R-dimensional score space, so zero-padding D by a factor of 100 leaves the
training step cost unchanged, while free inducing inputs pay for every column.
"""

from fsgp import TrainConfig
from fsgp.bench import StepTimer, interleaved_medians, run_bench, zero_pad
from fsgp.synth import SynthSpec, generate

# %%
# A sparse problem at D = 1000 and its zero-padded twin at D = 100 000.
small, *_ = generate(SynthSpec(n=2000, d=1000, k=20, density=0.01, seed=0))
big = zero_pad(small, 100_000)

config = TrainConfig(latents=5, inducing=100, rank=50, batch_size=200, neg_size=19, seed=0)
t_small, t_big = interleaved_medians([StepTimer(config, small), StepTimer(config, big)], 20)
print(f"median step: D=1e3 {t_small * 1e3:.2f} ms, D=1e5 {t_big * 1e3:.2f} ms")

# %%
# Gram + KL evaluation, subspace against free Z, at D = 1e5 and M = 200.
report = run_bench(n=1000, d=1000, pad_to=100_000, inducing=200, rank=50, repeats=5)
for key, ratio in report["ratio"].items():
    print(f"free/subspace {key}: {ratio:.1f}x")
