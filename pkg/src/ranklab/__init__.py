"""ranklab: a desk-scale laboratory for rank-aware autoregressive ranking.

Subpackages:
  diffcore    float64 reverse-mode kernels + finite-difference checks
  data        synthetic taxonomy / sparse-code datasets and prompt serialization
  trie        docID prefix tree and rank-marginal target distributions
  losses      rank-reweighted token losses, DE batch softmax, CE pairwise loss
  models      toy causal transformer, lookup-table dual encoder, MLP cross encoder
  evaluation  constrained beam search, CVR / nDCG / R@k
  capacity    distance-permutation counting and softmax-bottleneck witnesses
  harness     config-driven training, sweeps, persistence, CLI backend
"""

__version__ = "0.1.0"
