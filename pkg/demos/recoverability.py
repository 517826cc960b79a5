"""
Recovering a planted multi-label GP model
=========================================

Draw labels from the generative model itself, fit the sparse variational
model with subspace inducing inputs, and compare test precision@1 with the
Bayes-optimal ranking given by the true utilities.
"""

import numpy as np

from fsgp import SynthSpec, TrainConfig, evaluate, evaluate_scores, generate, train

# %%
# Sample 700 instances with 20 labels driven by 3 latent functions. The
# decaying feature scales give X a spectrum a rank-20 basis can capture.
spec = SynthSpec(n=700, d=50, k=20, p_true=3, phi_scale=5.0, bias_range=(-3.0, -1.0),
                 density=0.3, feature_decay=1.5, seed=0)
data, utilities, phi_true, b_true = generate(spec)
train_set, test_set = data.subset(np.arange(500)), data.subset(np.arange(500, 700))
print("positives per instance:", data.label_indices.size / data.n)

# %%
# Fit P=3 latent GPs with 32 inducing inputs living in the span of the top
# 20 right singular vectors.
config = TrainConfig(latents=3, inducing=32, rank=20, batch_size=100, epochs=300,
                     learning_rate=1e-2, seed=0)
state, history = train(config, train_set)
print("bound: first epoch %.1f, last epoch %.1f" % (history[0], history[-1]))

# %%
# Precision@1 of the fitted model, the true utilities and a random ranking.
fitted = evaluate(state, test_set, ks=(1,)).precision[1]
oracle = evaluate_scores(utilities[500:], test_set, ks=(1,))[1]
rng = np.random.default_rng(1)
chance = evaluate_scores(rng.random((test_set.n, test_set.n_labels)), test_set, ks=(1,))[1]
print(f"P@1 fitted={fitted:.3f} bayes={oracle:.3f} random={chance:.3f}")
