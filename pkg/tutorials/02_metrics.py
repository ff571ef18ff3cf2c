# %% [markdown]
# # Detection and calibration metrics
#
# Scores follow one convention throughout: higher means more likely to be
# out-of-distribution. Entropy of the softmax output is the default score.

# %%
import numpy as np

from oodbridge import metrics, nnet

rng = np.random.default_rng(0)
id_scores = rng.normal(0.0, 1.0, 2000)
ood_scores = rng.normal(2.0, 1.0, 2000)

print("TNR at 95% TPR:", round(metrics.tnr_at_tpr(id_scores, ood_scores), 4))
print("AUROC:         ", round(metrics.auroc(id_scores, ood_scores), 4))
print("AUPR (ID pos.):", round(metrics.aupr(id_scores, ood_scores), 4))
print("AUPR (OOD pos.):", round(metrics.aupr(id_scores, ood_scores, positive="ood"), 4))

# %% [markdown]
# For two unit-variance Gaussians two standard deviations apart, the
# AUROC has a closed form: Phi(2 / sqrt(2)).

# %%
from statistics import NormalDist

print("closed form AUROC:", round(NormalDist().cdf(2 / np.sqrt(2)), 4))

# %% [markdown]
# Entropy and maximum softmax probability of the predicted distribution.

# %%
logits = np.array([[4.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 1.5, 0.0]])
probs = nnet.softmax(logits)
print("entropy:", np.round(nnet.entropy_score(probs), 4))
print("msp:    ", np.round(nnet.msp_score(probs), 4))

# %% [markdown]
# ECE: bin predictions by confidence, compare accuracy with mean confidence
# in each bin and weight the gaps by bin size. A model that says 0.9 and is
# right 60% of the time is overconfident by 0.3.

# %%
conf = np.full(1000, 0.9)
correct = np.arange(1000) < 600
print("ECE overconfident:", round(metrics.ece(conf, correct), 4))
conf = rng.uniform(0.3, 1.0, 20000)
correct = rng.random(20000) < conf
print("ECE calibrated (sampling noise only):", round(metrics.ece(conf, correct), 4))

report = metrics.summarize(id_scores, ood_scores, conf, correct)
print(report)
