//! Stratified train/validation/test partitioning.
//!
//! Subset sizes are fixed first (largest-remainder rounding of `n·ratio`),
//! then every class is apportioned so each cell of the class × subset table
//! is the floor or ceiling of its ideal share and the column totals hit the
//! subset sizes. The rounding is found as a small bipartite flow.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplitError {
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    Ratios([f64; 3]),
    #[error("class {class} has {count} samples; at least 3 are required")]
    TooFewInClass { class: u8, count: usize },
    #[error("stratified split needs at least two classes, found {0}")]
    SingleClass(usize),
}

/// Indices into the original sample list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder rounding of `total·weights`; ties go to the lower index.
fn apportion(total: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let ideal: Vec<f64> = ratios.iter().map(|r| total as f64 * r).collect();
    let mut out = [0usize; 3];
    for (o, q) in out.iter_mut().zip(&ideal) {
        *o = q.floor() as usize;
    }
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &s in order.iter().take(total.saturating_sub(assigned)) {
        out[s] += 1;
    }
    out
}

/// Finds a 0/1 matrix with the given row and column sums using only the
/// allowed cells, by augmenting paths. Returns `None` if impossible.
fn bipartite_rounding(
    row_need: &[usize],
    col_need: &[usize],
    allowed: &[Vec<usize>],
) -> Option<Vec<Vec<bool>>> {
    let rows = row_need.len();
    let cols = col_need.len();
    let mut take = vec![vec![false; cols]; rows];
    let mut col_used = vec![0usize; cols];
    let mut row_used = vec![0usize; rows];

    // Alternating-path search from row r: find a column with spare capacity,
    // possibly re-routing an existing assignment.
    fn augment(
        r: usize,
        allowed: &[Vec<usize>],
        take: &mut [Vec<bool>],
        col_used: &mut [usize],
        col_need: &[usize],
        seen: &mut [bool],
    ) -> bool {
        for &c in &allowed[r] {
            if take[r][c] || seen[c] {
                continue;
            }
            seen[c] = true;
            if col_used[c] < col_need[c] {
                take[r][c] = true;
                col_used[c] += 1;
                return true;
            }
            for r2 in 0..take.len() {
                if r2 != r && take[r2][c] && augment(r2, allowed, take, col_used, col_need, seen) {
                    // r2 moved elsewhere, freeing one unit of c.
                    take[r2][c] = false;
                    col_used[c] -= 1;
                    take[r][c] = true;
                    col_used[c] += 1;
                    return true;
                }
            }
        }
        false
    }

    for r in 0..rows {
        while row_used[r] < row_need[r] {
            let mut seen = vec![false; cols];
            if !augment(r, allowed, &mut take, &mut col_used, col_need, &mut seen) {
                return None;
            }
            row_used[r] += 1;
        }
    }
    Some(take)
}

/// Per-class counts for each subset: `counts[class_idx][subset]`.
fn class_counts(class_sizes: &[usize], ratios: &[f64; 3]) -> Vec<[usize; 3]> {
    let total: usize = class_sizes.iter().sum();
    let targets = apportion(total, ratios);
    let ideal: Vec<[f64; 3]> = class_sizes
        .iter()
        .map(|&n| [n as f64 * ratios[0], n as f64 * ratios[1], n as f64 * ratios[2]])
        .collect();
    let mut counts: Vec<[usize; 3]> = ideal
        .iter()
        .map(|q| [q[0].floor() as usize, q[1].floor() as usize, q[2].floor() as usize])
        .collect();
    let row_need: Vec<usize> = class_sizes
        .iter()
        .zip(&counts)
        .map(|(&n, c)| n - c.iter().sum::<usize>())
        .collect();
    let col_need: Vec<usize> = (0..3)
        .map(|s| targets[s] - counts.iter().map(|c| c[s]).sum::<usize>())
        .collect();

    let by_fraction = |q: &[f64; 3], only_fractional: bool| -> Vec<usize> {
        let mut cols: Vec<usize> = (0..3)
            .filter(|&s| !only_fractional || q[s] - q[s].floor() > 0.0)
            .collect();
        cols.sort_by(|&a, &b| {
            let (fa, fb) = (q[a] - q[a].floor(), q[b] - q[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        cols
    };
    let fractional: Vec<Vec<usize>> = ideal.iter().map(|q| by_fraction(q, true)).collect();
    let take = bipartite_rounding(&row_need, &col_need, &fractional)
        .or_else(|| {
            let any: Vec<Vec<usize>> = ideal.iter().map(|q| by_fraction(q, false)).collect();
            bipartite_rounding(&row_need, &col_need, &any)
        })
        .expect("class totals and subset totals agree, so a rounding exists");
    for (c, row) in counts.iter_mut().zip(&take) {
        for s in 0..3 {
            c[s] += row[s] as usize;
        }
    }
    counts
}

/// Stratified split of `labels` into train/val/test index lists.
pub fn split_indices(labels: &[u8], ratios: [f64; 3], seed: u64) -> Result<SplitIndices, SplitError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| !(r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(SplitError::Ratios(ratios));
    }
    let mut classes: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        classes.entry(y).or_default().push(i);
    }
    if classes.len() < 2 {
        return Err(SplitError::SingleClass(classes.len()));
    }
    if let Some((&class, members)) = classes.iter().find(|(_, m)| m.len() < 3) {
        return Err(SplitError::TooFewInClass {
            class,
            count: members.len(),
        });
    }
    let sizes: Vec<usize> = classes.values().map(Vec::len).collect();
    let counts = class_counts(&sizes, &ratios);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (members, count) in classes.values().zip(&counts) {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let (a, rest) = members.split_at(count[0]);
        let (b, c) = rest.split_at(count[1]);
        out.train.extend_from_slice(a);
        out.val.extend_from_slice(b);
        out.test.extend_from_slice(c);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Three disjoint sample lists.
#[derive(Debug, Clone)]
pub struct Splits<S> {
    pub train: Vec<S>,
    pub val: Vec<S>,
    pub test: Vec<S>,
}

/// Stratified split of samples by their label.
pub fn stratified_split<S: Clone>(
    samples: &[S],
    label: impl Fn(&S) -> u8,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Splits<S>, SplitError> {
    let labels: Vec<u8> = samples.iter().map(&label).collect();
    let idx = split_indices(&labels, ratios, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect();
    Ok(Splits {
        train: pick(&idx.train),
        val: pick(&idx.val),
        test: pick(&idx.test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(pos: usize, neg: usize) -> Vec<u8> {
        let mut v = vec![1u8; pos];
        v.extend(std::iter::repeat(0u8).take(neg));
        v
    }

    fn class_count(labels: &[u8], idx: &[usize], class: u8) -> usize {
        idx.iter().filter(|&&i| labels[i] == class).count()
    }

    #[test]
    fn helmets_sized_split() {
        let y = labels(13481, 4170);
        let n = 17651.0;
        let ratios = [12286.0 / n, 2628.0 / n, 2737.0 / n];
        let s = split_indices(&y, ratios, 11).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (12286, 2628, 2737));
        for part in [&s.train, &s.val, &s.test] {
            let pos = class_count(&y, part, 1) as f64;
            let neg = class_count(&y, part, 0) as f64;
            assert!((pos / neg - 13481.0 / 4170.0).abs() < 0.01, "{pos}/{neg}");
        }
    }

    /// Enumerates every per-class allocation of a small instance and checks
    /// the chosen one is among those within one sample of the ideal.
    #[test]
    fn ten_and_ten_quarters() {
        let y = labels(10, 10);
        let s = split_indices(&y, [0.5, 0.25, 0.25], 3).unwrap();
        let per = |c| {
            [
                class_count(&y, &s.train, c),
                class_count(&y, &s.val, c),
                class_count(&y, &s.test, c),
            ]
        };
        let (pos, neg) = (per(1), per(0));
        let mut admissible = Vec::new();
        for a in 0..=10usize {
            for b in 0..=(10 - a) {
                let c = 10 - a - b;
                let ideal = [5.0, 2.5, 2.5];
                if [a, b, c]
                    .iter()
                    .zip(ideal)
                    .all(|(&k, q): (&usize, f64)| (k as f64 - q).abs() < 1.0)
                {
                    admissible.push([a, b, c]);
                }
            }
        }
        assert_eq!(admissible, vec![[5, 2, 3], [5, 3, 2]]);
        assert!(admissible.contains(&pos) && admissible.contains(&neg));
        assert_ne!(pos, neg);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (10, 5, 5));
    }

    #[test]
    fn deterministic_under_seed() {
        let y: Vec<u8> = (0..200).map(|i| (i % 3 == 0) as u8).collect();
        let a = split_indices(&y, [0.7, 0.15, 0.15], 5).unwrap();
        let b = split_indices(&y, [0.7, 0.15, 0.15], 5).unwrap();
        let c = split_indices(&y, [0.7, 0.15, 0.15], 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejections() {
        assert!(matches!(
            split_indices(&labels(10, 0), [0.5, 0.25, 0.25], 0),
            Err(SplitError::SingleClass(1))
        ));
        assert!(matches!(
            split_indices(&labels(10, 2), [0.5, 0.25, 0.25], 0),
            Err(SplitError::TooFewInClass { class: 0, count: 2 })
        ));
        assert!(split_indices(&labels(10, 10), [0.5, 0.5, 0.0], 0).is_err());
        assert!(split_indices(&labels(10, 10), [0.5, 0.3, 0.3], 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_and_balance(pos in 3usize..300, neg in 3usize..300,
                                 a in 0.2f64..0.8, b in 0.05f64..0.5, seed in any::<u64>()) {
            let b = b * (1.0 - a);
            let ratios = [a, b, 1.0 - a - b];
            let y = labels(pos, neg);
            let s = split_indices(&y, ratios, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..pos + neg).collect::<Vec<_>>());
            for (part, r) in [(&s.train, ratios[0]), (&s.val, ratios[1]), (&s.test, ratios[2])] {
                for (class, n) in [(1u8, pos), (0u8, neg)] {
                    let k = class_count(&y, part, class) as f64;
                    prop_assert!((k - n as f64 * r).abs() <= 1.0);
                }
            }
            let n = (pos + neg) as f64;
            prop_assert!((s.train.len() as f64 - n * ratios[0]).abs() < 1.0);
        }
    }
}
