"""Fixed metric fixtures with expected values from independent oracles.

Expected numbers are either worked out by hand (noted inline) or computed by
the brute-force helpers below, none of which share code with tagleak.metrics.
"""

from itertools import combinations

import numpy as np


def brute_lcs(a, b):
    # longest subsequence of a that is also a subsequence of b, by enumeration
    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for k in range(min(len(a), len(b)), 0, -1):
        if any(is_subseq(sub, b) for sub in combinations(a, k)):
            return k
    return 0


def f1(overlap, n_pred, n_ref):
    if overlap == 0:
        return 0.0
    p, r = overlap / n_pred, overlap / n_ref
    return 100 * 2 * p * r / (p + r)


def svd_pca(x):
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


# (recovered, truth, expected percent)
RECOVER_RATE = [
    ("abcdefghi", "abcdefghi", 100.0),
    ("abcdefghx", "abcdefghi", 800 / 9),  # 8 of 9 recovered
    ("aaa", "abc", 100 / 3),  # counts capped by truth
    ("cab", "abc", 100.0),  # position-insensitive
    ("xyz", "abc", 0.0),
    ("aab", "aabb", 75.0),
    ("", "ab", 0.0),
]

# (recovered, truth, n, expected F1 percent), n-gram overlaps counted by hand
ROUGE_N = [
    ("abcde", "abcde", 2, 100.0),
    ("abc", "xyz", 1, 0.0),
    (["the", "cat", "sat"], ["the", "cat", "ran"], 1, f1(2, 3, 3)),  # 66.67
    (["the", "cat", "sat"], ["the", "cat", "ran"], 2, f1(1, 2, 2)),  # "the cat" only
    ("aab", "ab", 1, f1(2, 3, 2)),  # a:min(2,1)+b:1 = 2
    ("abab", "ab", 2, f1(1, 3, 1)),  # ab,ba,ab vs ab
    ("a", "abc", 2, 0.0),  # too short, degenerate
]

# (recovered, truth, expected F1 percent) with LCS from brute force
_ROUGE_L_PAIRS = [
    ("abcd", "abcd"),
    ("dcba", "abcd"),  # reversed, LCS 1 -> 25
    ("", "abcd"),
    ("axbycz", "abc"),
    ("bdcaba", "abcbdab"),
    ("aaaa", "aa"),
]
ROUGE_L = [(r, t, f1(brute_lcs(r, t), len(r), len(t)) if r and t else 0.0) for r, t in _ROUGE_L_PAIRS]

# (a, b, expected cosine), worked by hand
COSINE = [
    ([1.0, 0.0], [0.0, 1.0], 0.0),
    ([1.0, 2.0], [2.0, 4.0], 1.0),
    ([1.0, 1.0], [-1.0, -1.0], -1.0),
    ([3.0, 4.0], [4.0, 3.0], 24 / 25),
    ([0.0, 0.0], [1.0, 2.0], 0.0),  # zero norm, flagged
]

_rng = np.random.default_rng(20240)
PCA = [_rng.normal(size=(10, 6)), _rng.normal(size=(5, 3)) * [5.0, 1.0, 0.2], _rng.normal(size=(8, 2))]


def fixture_count():
    return len(RECOVER_RATE) + len(ROUGE_N) + len(ROUGE_L) + len(COSINE) + len(PCA)
