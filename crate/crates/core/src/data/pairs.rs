//! Same/different pair sampling, triplets, and pair accounting.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unordered pair in canonical `(min, max)` id order; label 1 = same class.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledPair {
    pub a: String,
    pub b: String,
    pub label: u8,
}

impl LabeledPair {
    fn new(x: &str, y: &str, label: u8) -> Self {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        LabeledPair {
            a: a.to_string(),
            b: b.to_string(),
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairBudget {
    pub genuine_possible: usize,
    pub imposter_possible: usize,
    pub genuine_requested: usize,
    pub imposter_requested: usize,
    pub uvp_genuine: u64,
    pub uvp_imposter: u64,
}

fn same_possible(sizes: &[usize]) -> usize {
    sizes.iter().map(|&n| n * n.saturating_sub(1) / 2).sum()
}

fn diff_possible(sizes: &[usize]) -> usize {
    let mut total = 0;
    for (i, &a) in sizes.iter().enumerate() {
        for &b in &sizes[i + 1..] {
            total += a * b;
        }
    }
    total
}

/// Combinatorial pair counts next to the `U·V·P` bookkeeping
/// (`uvp_imposter = g² − g` for `g = U·V·P`). Requests are clamped to what
/// is possible.
pub fn pair_budget(sizes: &[usize], requested: (usize, usize), uvp: (u64, u64, u64)) -> PairBudget {
    let genuine_possible = same_possible(sizes);
    let imposter_possible = diff_possible(sizes);
    let g = uvp.0.saturating_mul(uvp.1).saturating_mul(uvp.2);
    PairBudget {
        genuine_possible,
        imposter_possible,
        genuine_requested: requested.0.min(genuine_possible),
        imposter_requested: requested.1.min(imposter_possible),
        uvp_genuine: g,
        uvp_imposter: g.saturating_mul(g) - g,
    }
}

/// `(i, j)` with `i < j` for the `k`-th pair of `0..n` in row-major order.
fn unrank_pair(k: usize, n: usize) -> (usize, usize) {
    // rows before i hold i·(2n − i − 1)/2 pairs
    let before = |i: usize| i * (2 * n - i - 1) / 2;
    let (mut lo, mut hi) = (0, n - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if before(mid) <= k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, lo + 1 + k - before(lo))
}

/// Uniform sample without replacement from all within-class unordered pairs.
pub fn gen_same_pairs(groups: &[Vec<String>], count: usize, seed: u64) -> Result<Vec<LabeledPair>> {
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let possible = same_possible(&sizes);
    if count > possible {
        return Err(Error::Budget {
            kind: "genuine",
            requested: count,
            possible,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, possible, count);
    Ok(picks
        .into_iter()
        .map(|mut k| {
            for g in groups {
                let here = g.len() * g.len().saturating_sub(1) / 2;
                if k < here {
                    let (i, j) = unrank_pair(k, g.len());
                    return LabeledPair::new(&g[i], &g[j], 1);
                }
                k -= here;
            }
            unreachable!("index below the pair total")
        })
        .collect())
}

/// Uniform sample without replacement from all cross-class unordered pairs.
pub fn gen_diff_pairs(groups: &[Vec<String>], count: usize, seed: u64) -> Result<Vec<LabeledPair>> {
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let possible = diff_possible(&sizes);
    if count > possible {
        return Err(Error::Budget {
            kind: "imposter",
            requested: count,
            possible,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, possible, count);
    Ok(picks
        .into_iter()
        .map(|mut k| {
            for (c, ga) in groups.iter().enumerate() {
                for gb in &groups[c + 1..] {
                    let here = ga.len() * gb.len();
                    if k < here {
                        return LabeledPair::new(&ga[k / gb.len()], &gb[k % gb.len()], 0);
                    }
                    k -= here;
                }
            }
            unreachable!("index below the pair total")
        })
        .collect())
}

/// Distinct triplets: anchor uniform over members of classes with at least
/// two samples, positive uniform over the rest of its class, negative uniform
/// over all other classes. Gives up after `100·count` draws.
pub fn sample_triplets(groups: &[Vec<String>], count: usize, seed: u64) -> Result<Vec<Triplet>> {
    let total: usize = groups.iter().map(Vec::len).sum();
    let anchors: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .filter(|(_, g)| g.len() >= 2 && g.len() < total)
        .flat_map(|(c, g)| (0..g.len()).map(move |i| (c, i)))
        .collect();
    if anchors.is_empty() {
        return Err(Error::Structure(
            "triplets need a class with two or more samples and another nonempty class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let cap = count.saturating_mul(100);
    let mut attempts = 0;
    while out.len() < count {
        if attempts == cap {
            return Err(Error::Saturation {
                wanted: count,
                found: out.len(),
                attempts,
            });
        }
        attempts += 1;
        let (c, a) = anchors[rng.gen_range(0..anchors.len())];
        let group = &groups[c];
        let mut p = rng.gen_range(0..group.len() - 1);
        if p >= a {
            p += 1;
        }
        let mut n = rng.gen_range(0..total - group.len());
        let mut neg = None;
        for (oc, other) in groups.iter().enumerate() {
            if oc == c {
                continue;
            }
            if n < other.len() {
                neg = Some(&other[n]);
                break;
            }
            n -= other.len();
        }
        let t = Triplet {
            anchor: group[a].clone(),
            positive: group[p].clone(),
            negative: neg.expect("negative index in range").clone(),
        };
        if seen.insert(t.clone()) {
            out.push(t);
        }
    }
    Ok(out)
}

pub fn format_pairs(pairs: &[LabeledPair]) -> String {
    let mut out = String::from("a,b,label\n");
    for p in pairs {
        out.push_str(&format!("{},{},{}\n", p.a, p.b, p.label));
    }
    out
}

pub fn export_pairs(pairs: &[LabeledPair], path: &Path) -> Result<()> {
    std::fs::write(path, format_pairs(pairs)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn groups(sizes: &[usize]) -> Vec<Vec<String>> {
        sizes
            .iter()
            .enumerate()
            .map(|(c, &n)| (0..n).map(|i| format!("c{c}/{i:03}")).collect())
            .collect()
    }

    fn brute(g: &[Vec<String>]) -> (BTreeSet<LabeledPair>, BTreeSet<LabeledPair>) {
        let all: Vec<(usize, &String)> = g
            .iter()
            .enumerate()
            .flat_map(|(c, v)| v.iter().map(move |s| (c, s)))
            .collect();
        let (mut same, mut diff) = (BTreeSet::new(), BTreeSet::new());
        for (i, (ci, a)) in all.iter().enumerate() {
            for (cj, b) in &all[i + 1..] {
                if ci == cj {
                    same.insert(LabeledPair::new(a, b, 1));
                } else {
                    diff.insert(LabeledPair::new(a, b, 0));
                }
            }
        }
        (same, diff)
    }

    #[test]
    fn full_size_counts() {
        let b = pair_budget(&[280, 280], (50_000, 50_000), (1, 1, 1));
        assert_eq!((b.genuine_possible, b.imposter_possible), (78_120, 78_400));
        assert_eq!((b.uvp_genuine, b.uvp_imposter), (1, 0));
        let b = pair_budget(&[3], (10, 10), (2, 3, 2));
        assert_eq!((b.uvp_genuine, b.uvp_imposter), (12, 132));
        assert_eq!((b.genuine_requested, b.imposter_requested), (3, 0));
    }

    #[test]
    fn full_enumeration_matches_brute_force() {
        for sizes in [vec![280, 280], vec![2, 1], vec![5, 0, 3], vec![1, 1], vec![4]] {
            let g = groups(&sizes);
            let (same, diff) = brute(&g);
            let s = gen_same_pairs(&g, same.len(), 7).unwrap();
            let d = gen_diff_pairs(&g, diff.len(), 7).unwrap();
            assert_eq!(s.len(), same.len());
            assert_eq!(s.into_iter().collect::<BTreeSet<_>>(), same);
            assert_eq!(d.into_iter().collect::<BTreeSet<_>>(), diff);
        }
        let g = groups(&[280, 280]);
        assert_eq!(brute(&g).0.len() + brute(&g).1.len(), 156_520);
    }

    #[test]
    fn budget_errors() {
        let g = groups(&[2]);
        assert_eq!(gen_same_pairs(&g, 1, 0).unwrap().len(), 1);
        assert!(gen_same_pairs(&g, 0, 0).unwrap().is_empty());
        assert!(matches!(
            gen_same_pairs(&g, 2, 0),
            Err(Error::Budget { possible: 1, .. })
        ));
        let g = groups(&[4, 0]);
        assert!(matches!(
            gen_diff_pairs(&g, 1, 0),
            Err(Error::Budget { possible: 0, .. })
        ));
    }

    #[test]
    fn sampled_pairs_are_valid_and_seeded() {
        let g = groups(&[30, 20]);
        let s = gen_same_pairs(&g, 200, 3).unwrap();
        assert_eq!(s, gen_same_pairs(&g, 200, 3).unwrap());
        assert_ne!(s, gen_same_pairs(&g, 200, 4).unwrap());
        let unique: HashSet<_> = s.iter().collect();
        assert_eq!(unique.len(), 200);
        for p in &s {
            assert!(p.a < p.b);
            assert_eq!(p.a[..2], p.b[..2]);
        }
        for p in gen_diff_pairs(&g, 300, 3).unwrap() {
            assert!(p.a < p.b && p.a[..2] != p.b[..2] && p.label == 0);
        }
    }

    #[test]
    fn triplets() {
        let g = groups(&[2, 1]);
        let t = sample_triplets(&g, 2, 1).unwrap();
        assert_eq!(t.iter().collect::<HashSet<_>>().len(), 2);
        assert!(matches!(
            sample_triplets(&g, 3, 1),
            Err(Error::Saturation { found: 2, .. })
        ));
        assert!(matches!(sample_triplets(&groups(&[1, 1]), 1, 1), Err(Error::Structure(_))));
        assert!(matches!(sample_triplets(&groups(&[5]), 1, 1), Err(Error::Structure(_))));

        let g = groups(&[10, 7]);
        let t = sample_triplets(&g, 100, 9).unwrap();
        assert_eq!(t, sample_triplets(&g, 100, 9).unwrap());
        for x in &t {
            assert_eq!(x.anchor[..2], x.positive[..2]);
            assert_ne!(x.anchor, x.positive);
            assert_ne!(x.anchor[..2], x.negative[..2]);
        }
    }

    #[test]
    fn unrank_covers_rows() {
        for n in 2..12 {
            let got: Vec<_> = (0..n * (n - 1) / 2).map(|k| unrank_pair(k, n)).collect();
            let want: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn csv() {
        let p = vec![LabeledPair::new("b", "a", 1)];
        assert_eq!(format_pairs(&p), "a,b,label\na,b,1\n");
    }
}
