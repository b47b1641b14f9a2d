use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHI2_TOP_K: usize = 50;

/// Chi² statistic per column of a non-negative matrix against class labels:
/// observed per-class column sums against the sums expected if each class
/// received a share proportional to its size. Terms with zero expectation
/// contribute nothing.
pub fn chi2_scores(x: &Matrix, y: &[u8]) -> Result<Vec<f64>> {
    if x.rows() != y.len() {
        return Err(Error::validation(format!(
            "chi2: {} rows but {} labels",
            x.rows(),
            y.len()
        )));
    }
    if x.as_slice().iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::validation(
            "chi2 requires non-negative, non-missing features",
        ));
    }
    let n_classes = y.iter().copied().max().map_or(0, |m| usize::from(m) + 1);
    let d = x.cols();
    let mut observed = vec![vec![0.0; d]; n_classes];
    let mut class_count = vec![0usize; n_classes];
    for (i, &c) in y.iter().enumerate() {
        class_count[usize::from(c)] += 1;
        for (o, v) in observed[usize::from(c)].iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    let n = y.len() as f64;
    let mut scores = vec![0.0; d];
    for (j, s) in scores.iter_mut().enumerate() {
        let total: f64 = observed.iter().map(|o| o[j]).sum();
        for (c, o) in observed.iter().enumerate() {
            let expected = total * class_count[c] as f64 / n;
            if expected > 0.0 {
                *s += (o[j] - expected).powi(2) / expected;
            }
        }
    }
    Ok(scores)
}

/// Indices of the `k` highest scores, ties broken by lower index. Returns all
/// columns (with a warning) when `k` exceeds the width.
pub fn chi2_select(x: &Matrix, y: &[u8], k: usize) -> Result<Vec<usize>> {
    let scores = chi2_scores(x, y)?;
    Ok(top_k(&scores, k))
}

pub(crate) fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    if k > scores.len() {
        log::warn!(
            "asked for {k} features but only {} exist; keeping all",
            scores.len()
        );
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

/// Statistics fitted on the training split only: column means (for
/// imputation), minima and maxima (for scaling), and the selected columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPipeline {
    means: Vec<f64>,
    mins: Vec<f64>,
    maxs: Vec<f64>,
    scores: Vec<f64>,
    selected: Vec<usize>,
}

impl TabularPipeline {
    /// `selection_labels` are the class labels chi² is computed against.
    pub fn fit(x_train: &Matrix, selection_labels: &[u8], k: usize) -> Result<Self> {
        if x_train.rows() == 0 {
            return Err(Error::validation("cannot fit a pipeline on zero rows"));
        }
        let d = x_train.cols();
        let mut means = vec![0.0; d];
        for (j, m) in means.iter_mut().enumerate() {
            let (sum, count) = (0..x_train.rows())
                .map(|i| x_train.get(i, j))
                .filter(|v| !v.is_nan())
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            *m = if count == 0 { 0.0 } else { sum / count as f64 };
        }
        let mut mins = vec![f64::INFINITY; d];
        let mut maxs = vec![f64::NEG_INFINITY; d];
        for i in 0..x_train.rows() {
            for (j, &v) in x_train.row(i).iter().enumerate() {
                let v = if v.is_nan() { means[j] } else { v };
                mins[j] = mins[j].min(v);
                maxs[j] = maxs[j].max(v);
            }
        }
        let mut p = Self {
            means,
            mins,
            maxs,
            scores: Vec::new(),
            selected: (0..d).collect(),
        };
        let scaled = p.scale(x_train);
        p.scores = chi2_scores(&scaled, selection_labels)?;
        p.selected = top_k(&p.scores, k);
        Ok(p)
    }

    /// Imputes and scales every column, before selection. Values outside the
    /// training range are clamped to [0, 1]; constant columns map to 0.
    pub fn scale(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                if v.is_nan() {
                    *v = self.means[j];
                }
                let range = self.maxs[j] - self.mins[j];
                *v = if range > 0.0 {
                    ((*v - self.mins[j]) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
        out
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.means.len() {
            return Err(Error::Shape {
                op: "pipeline transform",
                lhs: x.shape(),
                rhs: (1, self.means.len()),
            });
        }
        Ok(self.scale(x).select_columns(&self.selected))
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn mins(&self) -> &[f64] {
        &self.mins
    }

    pub fn maxs(&self) -> &[f64] {
        &self.maxs
    }

    /// Chi² statistic of every input column on the scaled training data.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn selected_names(&self, names: &[String]) -> Vec<String> {
        self.selected.iter().map(|&j| names[j].clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Contingency-table chi²: for each class and feature, the observed sum of
    /// feature mass vs. total mass × class frequency, summed by brute force.
    fn oracle_chi2(rows: &[Vec<f64>], y: &[u8]) -> Vec<f64> {
        let d = rows[0].len();
        let classes: Vec<u8> = {
            let mut c = y.to_vec();
            c.sort_unstable();
            c.dedup();
            c
        };
        (0..d)
            .map(|j| {
                let total: f64 = rows.iter().map(|r| r[j]).sum();
                classes
                    .iter()
                    .map(|&c| {
                        let members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
                        let obs: f64 = members.iter().map(|&i| rows[i][j]).sum();
                        let exp = total * members.len() as f64 / y.len() as f64;
                        if exp > 0.0 {
                            (obs - exp) * (obs - exp) / exp
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect()
    }

    fn oracle_top(scores: &[f64], k: usize) -> Vec<usize> {
        let mut chosen = Vec::new();
        let mut left: Vec<usize> = (0..scores.len()).collect();
        while chosen.len() < k && !left.is_empty() {
            let mut best = 0;
            for (p, &j) in left.iter().enumerate() {
                if scores[j] > scores[left[best]] {
                    best = p;
                }
            }
            chosen.push(left.remove(best));
        }
        chosen
    }

    #[test]
    fn matches_contingency_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..100)
                .map(|_| (0..6).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let y: Vec<u8> = (0..100).map(|_| rng.gen_range(0..3)).collect();
            let x = Matrix::from_rows(&rows);
            let got = chi2_scores(&x, &y).unwrap();
            let want = oracle_chi2(&rows, &y);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0));
            }
            assert_eq!(chi2_select(&x, &y, 3).unwrap(), oracle_top(&want, 3));
        }
    }

    #[test]
    fn label_copy_ranks_first_and_zero_column_last() {
        let y: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = y
            .iter()
            .map(|&c| vec![rng.gen::<f64>(), 0.0, f64::from(c), rng.gen::<f64>()])
            .collect();
        let x = Matrix::from_rows(&rows);
        let s = chi2_scores(&x, &y).unwrap();
        assert_eq!(s[1], 0.0);
        let order = chi2_select(&x, &y, 4).unwrap();
        assert_eq!(order[0], 2);
        assert_eq!(order[3], 1);
    }

    #[test]
    fn k_larger_than_width_keeps_all() {
        let x = Matrix::from_rows(&[[0.1, 0.2], [0.3, 0.0]]);
        assert_eq!(chi2_select(&x, &[0, 1], 50).unwrap().len(), 2);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let x = Matrix::from_rows(&[[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(chi2_select(&x, &[0, 1], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn negative_input_rejected() {
        let x = Matrix::from_rows(&[[-1.0]]);
        assert!(chi2_scores(&x, &[0]).is_err());
    }

    #[test]
    fn impute_and_scale_examples() {
        let nan = f64::NAN;
        let x = Matrix::from_rows(&[[1.0, 0.0, 7.0], [nan, 10.0, 7.0], [3.0, 5.0, 7.0]]);
        let p = TabularPipeline::fit(&x, &[0, 1, 0], 10).unwrap();
        assert_eq!(p.means()[0], 2.0);
        let t = p.scale(&x);
        assert_eq!(t.row(1), &[0.5, 1.0, 0.0]);
        assert_eq!(t.get(2, 1), 0.5);
        let unseen = Matrix::from_rows(&[[2.0, 12.0, 9.0]]);
        assert_eq!(p.scale(&unseen).row(0), &[0.5, 1.0, 0.0]);
    }

    #[test]
    fn refitting_transformed_train_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                (0..8)
                    .map(|j| {
                        if rng.gen_bool(0.2) {
                            f64::NAN
                        } else {
                            rng.gen::<f64>() * j as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let y: Vec<u8> = (0..60).map(|_| rng.gen_range(0..2)).collect();
        let x = Matrix::from_rows(&rows);
        let once = TabularPipeline::fit(&x, &y, 8).unwrap().scale(&x);
        let twice = TabularPipeline::fit(&once, &y, 8).unwrap().scale(&once);
        assert_eq!(once, twice);
    }

    proptest! {
        #[test]
        fn selection_invariant_under_row_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..7).map(|_| rng.gen::<f64>()).collect()).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let a = chi2_select(&Matrix::from_rows(&rows), &y, 4).unwrap();
            let prow: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let py: Vec<u8> = perm.iter().map(|&i| y[i]).collect();
            let b = chi2_select(&Matrix::from_rows(&prow), &py, 4).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
