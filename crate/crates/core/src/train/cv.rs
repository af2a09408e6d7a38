//! Cross-validation of the regularization trade-off `C`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::platt::platt_calibrate;
use super::svm::{solve_svm, SvmSettings};
use crate::error::{Error, Result};
use crate::eval::classification_ap;
use crate::features::dot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub c: f64,
    pub mean_ap: f64,
    pub fold_aps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_c: f64,
    pub table: Vec<CvRow>,
    pub folds_used: usize,
    /// Set when the fold count had to be reduced.
    pub note: Option<String>,
}

/// Assigns items to folds so that items sharing a group land together.
/// Groups are shuffled with `seed` and dealt round-robin.
pub fn make_folds(groups: &[u64], folds: usize, seed: u64) -> Vec<usize> {
    let mut distinct: Vec<u64> = groups.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    distinct.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: BTreeMap<u64, usize> = distinct
        .iter()
        .enumerate()
        .map(|(i, &g)| (g, i % folds))
        .collect();
    groups.iter().map(|g| fold_of[g]).collect()
}

fn distinct(groups: &[u64]) -> usize {
    let mut g = groups.to_vec();
    g.sort_unstable();
    g.dedup();
    g.len()
}

/// Picks `C` from `c_grid` by mean held-out AP over stratified folds.
///
/// `pos_groups` ties duplicated positives together (one fold each); without
/// it every positive is its own group. Ties go to the smaller `C`. When there
/// are fewer positive groups than folds, the fold count is reduced (minimum
/// two) and the reduction is noted in the result.
pub fn cross_validate_c(
    pos: &[&[f64]],
    pos_groups: Option<&[u64]>,
    neg: &[&[f64]],
    c_grid: &[f64],
    folds: usize,
    seed: u64,
    settings: &SvmSettings,
) -> Result<CvResult> {
    run_cv(pos.len(), pos_groups, neg.len(), c_grid, folds, seed, |c, split| {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &i in &split.train_pos {
            xs.push(pos[i]);
            ys.push(1.0);
        }
        for &i in &split.train_neg {
            xs.push(neg[i]);
            ys.push(-1.0);
        }
        let sol = solve_svm(&xs, &ys, &vec![c; xs.len()], settings, None);
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for &i in &split.test_pos {
            scores.push(dot(&sol.w, pos[i]) + sol.bias);
            labels.push(true);
        }
        for &i in &split.test_neg {
            scores.push(dot(&sol.w, neg[i]) + sol.bias);
            labels.push(false);
        }
        classification_ap(&scores, &labels)
    })
}

/// Cross-validates a whole mixture: per fold, one template per cluster is
/// trained on that cluster's training positives against all training
/// negatives, calibrated on its own training scores, and held-out windows are
/// scored by the max calibrated component. `pos_cluster[i]` is the cluster of
/// positive `i`. Selection rules are those of [`cross_validate_c`].
#[allow(clippy::too_many_arguments)]
pub fn cross_validate_mixture(
    pos: &[&[f64]],
    pos_cluster: &[usize],
    pos_groups: Option<&[u64]>,
    neg: &[&[f64]],
    c_grid: &[f64],
    folds: usize,
    seed: u64,
    settings: &SvmSettings,
) -> Result<CvResult> {
    if pos_cluster.len() != pos.len() {
        return Err(Error::Data(format!(
            "{} cluster labels for {} positives",
            pos_cluster.len(),
            pos.len()
        )));
    }
    let k = pos_cluster.iter().max().map_or(0, |m| m + 1);
    run_cv(pos.len(), pos_groups, neg.len(), c_grid, folds, seed, |c, split| {
        let mut models = Vec::new();
        for m in 0..k {
            let mut xs: Vec<&[f64]> = split
                .train_pos
                .iter()
                .filter(|&&i| pos_cluster[i] == m)
                .map(|&i| pos[i])
                .collect();
            let n_pos = xs.len();
            if n_pos == 0 {
                continue;
            }
            xs.extend(split.train_neg.iter().map(|&i| neg[i]));
            let ys: Vec<f64> = (0..xs.len()).map(|i| if i < n_pos { 1.0 } else { -1.0 }).collect();
            let sol = solve_svm(&xs, &ys, &vec![c; xs.len()], settings, None);
            let train_scores: Vec<f64> = xs.iter().map(|x| dot(&sol.w, x) + sol.bias).collect();
            let labels: Vec<bool> = ys.iter().map(|&y| y > 0.0).collect();
            let platt = platt_calibrate(&train_scores, &labels)?.params;
            models.push((sol, platt));
        }
        if models.is_empty() {
            return Err(Error::Data("no cluster has training positives in this fold".into()));
        }
        let score = |x: &[f64]| {
            models
                .iter()
                .map(|(sol, p)| p.prob(dot(&sol.w, x) + sol.bias))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for &i in &split.test_pos {
            scores.push(score(pos[i]));
            labels.push(true);
        }
        for &i in &split.test_neg {
            scores.push(score(neg[i]));
            labels.push(false);
        }
        classification_ap(&scores, &labels)
    })
}

/// Index sets of one fold.
struct FoldSplit {
    train_pos: Vec<usize>,
    train_neg: Vec<usize>,
    test_pos: Vec<usize>,
    test_neg: Vec<usize>,
}

fn run_cv<F>(
    n_pos: usize,
    pos_groups: Option<&[u64]>,
    n_neg: usize,
    c_grid: &[f64],
    folds: usize,
    seed: u64,
    eval: F,
) -> Result<CvResult>
where
    F: Fn(f64, &FoldSplit) -> Result<f64> + Sync,
{
    if c_grid.is_empty() || c_grid.iter().any(|c| !(*c > 0.0)) {
        return Err(Error::Validation("C grid must be nonempty and positive".into()));
    }
    if folds < 2 {
        return Err(Error::Validation("cross-validation needs at least 2 folds".into()));
    }
    if n_neg == 0 {
        return Err(Error::Data("cross-validation needs negatives".into()));
    }
    let own: Vec<u64>;
    let pg = match pos_groups {
        Some(g) if g.len() == n_pos => g,
        Some(g) => {
            return Err(Error::Data(format!(
                "{} positive groups for {n_pos} positives",
                g.len()
            )))
        }
        None => {
            own = (0..n_pos as u64).collect();
            &own
        }
    };
    let n_groups = distinct(pg);
    if n_groups < 2 {
        return Err(Error::Data(format!(
            "cross-validation needs at least 2 distinct positives, got {n_groups}"
        )));
    }
    let mut note = None;
    let k = if n_groups < folds {
        let msg = format!("reduced folds from {folds} to {n_groups}: too few positives");
        log::info!("{msg}");
        note = Some(msg);
        n_groups
    } else {
        folds
    };
    let pos_fold = make_folds(pg, k, seed);
    let neg_ids: Vec<u64> = (0..n_neg as u64).collect();
    let neg_fold = make_folds(&neg_ids, k, seed.wrapping_add(1));
    let splits: Vec<FoldSplit> = (0..k)
        .map(|f| {
            let part = |fold: &[usize], test: bool| -> Vec<usize> {
                (0..fold.len()).filter(|&i| (fold[i] == f) == test).collect()
            };
            FoldSplit {
                train_pos: part(&pos_fold, false),
                train_neg: part(&neg_fold, false),
                test_pos: part(&pos_fold, true),
                test_neg: part(&neg_fold, true),
            }
        })
        .collect();

    let mut grid: Vec<f64> = c_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|ci| (0..k).map(move |f| (ci, f)))
        .collect();
    let aps: Vec<f64> = jobs
        .par_iter()
        .map(|&(ci, f)| eval(grid[ci], &splits[f]))
        .collect::<Result<_>>()?;

    let table: Vec<CvRow> = grid
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let fold_aps = aps[ci * k..(ci + 1) * k].to_vec();
            CvRow {
                c,
                mean_ap: fold_aps.iter().sum::<f64>() / k as f64,
                fold_aps,
            }
        })
        .collect();
    let mut best = 0;
    for (i, row) in table.iter().enumerate() {
        if row.mean_ap > table[best].mean_ap {
            best = i;
        }
    }
    Ok(CvResult {
        best_c: table[best].c,
        table,
        folds_used: k,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn data(rng: &mut ChaCha8Rng, n_pos: usize, n_neg: usize, sep: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let pos = (0..n_pos)
            .map(|_| vec![sep + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let neg = (0..n_neg)
            .map(|_| vec![-sep + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        (pos, neg)
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|x| x.as_slice()).collect()
    }

    #[test]
    fn single_value_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, n) = data(&mut rng, 10, 10, 1.0);
        let r = cross_validate_c(&refs(&p), None, &refs(&n), &[0.3], 5, 0, &SvmSettings::default()).unwrap();
        assert_eq!(r.best_c, 0.3);
        assert_eq!(r.table.len(), 1);
    }

    #[test]
    fn separable_data_plateau_picks_smallest() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, n) = data(&mut rng, 20, 20, 3.0);
        let grid = [0.001, 0.01, 0.1, 1.0, 10.0];
        let r = cross_validate_c(&refs(&p), None, &refs(&n), &grid, 5, 0, &SvmSettings::default()).unwrap();
        // exhaustive oracle: the table itself, scanned for the first maximum
        let max = r.table.iter().map(|t| t.mean_ap).fold(0.0, f64::max);
        let first = r.table.iter().find(|t| t.mean_ap == max).unwrap().c;
        assert_eq!(r.best_c, first);
        assert_eq!(max, 1.0);
        for w in r.table.windows(2) {
            assert!(w[1].mean_ap >= w[0].mean_ap || w[0].mean_ap == max);
        }
    }

    #[test]
    fn folds_keep_groups_together_and_reduce_when_short() {
        let groups = [0, 0, 1, 1, 2, 3, 3, 3];
        let f = make_folds(&groups, 3, 9);
        for i in 0..groups.len() {
            for j in 0..groups.len() {
                if groups[i] == groups[j] {
                    assert_eq!(f[i], f[j]);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, n) = data(&mut rng, 3, 10, 1.0);
        let r = cross_validate_c(&refs(&p), None, &refs(&n), &[1.0], 5, 0, &SvmSettings::default()).unwrap();
        assert_eq!(r.folds_used, 3);
        assert!(r.note.is_some());
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, n) = data(&mut rng, 15, 30, 0.5);
        let grid = [0.01, 0.1, 1.0];
        let a = cross_validate_c(&refs(&p), None, &refs(&n), &grid, 4, 5, &SvmSettings::default()).unwrap();
        let b = cross_validate_c(&refs(&p), None, &refs(&n), &grid, 4, 5, &SvmSettings::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixture_cv_single_cluster_matches_plain_cv() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (p, n) = data(&mut rng, 20, 40, 0.4);
        let grid = [0.01, 0.1, 1.0];
        let s = SvmSettings::default();
        let plain = cross_validate_c(&refs(&p), None, &refs(&n), &grid, 4, 1, &s).unwrap();
        let mix = cross_validate_mixture(&refs(&p), &vec![0; p.len()], None, &refs(&n), &grid, 4, 1, &s).unwrap();
        for (a, b) in plain.table.iter().zip(&mix.table) {
            assert!((a.mean_ap - b.mean_ap).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_cv_rewards_matching_clusters() {
        // two positive modes on either side of the negatives
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let side = if i % 2 == 0 { 2.0 } else { -2.0 };
            p.push(vec![side + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
            labels.push(i % 2);
        }
        let n: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.gen_range(-0.7..0.7), rng.gen_range(-0.5..0.5)]).collect();
        let s = SvmSettings::default();
        let one = cross_validate_mixture(&refs(&p), &vec![0; 40], None, &refs(&n), &[1.0], 4, 0, &s).unwrap();
        let two = cross_validate_mixture(&refs(&p), &labels, None, &refs(&n), &[1.0], 4, 0, &s).unwrap();
        assert!(two.table[0].mean_ap > one.table[0].mean_ap + 0.1);
    }
}
