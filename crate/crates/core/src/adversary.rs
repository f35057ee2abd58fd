//! Oblivious loss sequences.
//!
//! Each round's loss function is an RKHS element `w_t = Σ_j α_{t,j} Φ(x_j)`
//! in the span of the action features, so `ℓ_t(x_i) = (K α_t)_i` and
//! `‖w_t‖² = α_tᵀ K α_t`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::GramContext;

#[derive(Debug, Clone, PartialEq)]
pub enum AdversarySpec {
    /// `w_t = Φ(z_t)` for a per-round anchor action.
    RankOne { anchors: Vec<usize> },
    /// Standard normal coefficients, shrunk into the `b`-ball when needed.
    RandomRkhs { b: f64, seed: u64 },
    /// Segments of `(length, target)`: `w_t = −b·Φ(z)/√k(z,z)`, so the target is
    /// the unique minimizer and every other action is penalized.
    Switching {
        segments: Vec<(usize, usize)>,
        b: f64,
    },
    /// `w_t = −A·Φ(x_best) + s_t·h`, where `A` makes the mean gap between the
    /// other actions and `best` equal to `gap`, `h` interpolates the constant
    /// function and `s_t` is a seeded common-mode level that leaves every
    /// per-round gap unchanged. If `A·√k(best,best)` exceeds `b` the whole
    /// sequence is scaled into the ball and the gap shrinks accordingly.
    BestArmGap {
        best: usize,
        gap: f64,
        b: f64,
        seed: u64,
    },
    /// A replayed `T×N` loss table.
    Replay { losses: Vec<Vec<f64>>, b: f64 },
}

impl AdversarySpec {
    /// The norm bound `B` the sequence respects.
    pub fn norm_bound(&self) -> f64 {
        match self {
            AdversarySpec::RankOne { .. } => 1.0,
            AdversarySpec::RandomRkhs { b, .. }
            | AdversarySpec::Switching { b, .. }
            | AdversarySpec::BestArmGap { b, .. }
            | AdversarySpec::Replay { b, .. } => *b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSequence {
    alphas: Vec<Vec<f64>>,
    b: f64,
    loss_matrix: DMatrix<f64>,
}

impl LossSequence {
    fn from_alphas(ctx: &GramContext, alphas: Vec<Vec<f64>>, b: f64) -> Self {
        let k = ctx.gram();
        let n = ctx.n_actions();
        let mut loss_matrix = DMatrix::zeros(alphas.len(), n);
        for (t, a) in alphas.iter().enumerate() {
            let l = k * DVector::from_column_slice(a);
            loss_matrix.row_mut(t).copy_from(&l.transpose());
        }
        Self {
            alphas,
            b,
            loss_matrix,
        }
    }

    pub fn horizon(&self) -> usize {
        self.alphas.len()
    }

    pub fn n_actions(&self) -> usize {
        self.loss_matrix.ncols()
    }

    pub fn norm_bound(&self) -> f64 {
        self.b
    }

    pub fn alphas(&self) -> &[Vec<f64>] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> &[f64] {
        &self.alphas[t]
    }

    /// `T×N` table of `ℓ_t(x_i)`; rows are zero-based rounds.
    pub fn loss_matrix(&self) -> &DMatrix<f64> {
        &self.loss_matrix
    }

    pub fn loss(&self, t: usize, i: usize) -> f64 {
        self.loss_matrix[(t, i)]
    }

    pub fn round_losses(&self, t: usize) -> Vec<f64> {
        self.loss_matrix.row(t).iter().copied().collect()
    }

    /// `‖w_t‖_H`.
    pub fn rkhs_norm(&self, ctx: &GramContext, t: usize) -> f64 {
        quad_form(ctx, &self.alphas[t]).max(0.0).sqrt()
    }

    /// Writes `t,action_index,loss` rows with one-based rounds.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,action_index,loss")?;
        for t in 0..self.horizon() {
            for i in 0..self.n_actions() {
                writeln!(out, "{},{i},{}", t + 1, self.loss_matrix[(t, i)])?;
            }
        }
        Ok(())
    }
}

/// Reads a `t,action_index,loss` table into a `T×N` row list.
pub fn read_loss_csv(path: &Path, n_actions: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with('t')) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || {
            Error::Csv(format!(
                "line {}: expected `t,action_index,loss`",
                lineno + 1
            ))
        };
        if fields.len() != 3 {
            return Err(bad());
        }
        let t: usize = fields[0].parse().map_err(|_| bad())?;
        let i: usize = fields[1].parse().map_err(|_| bad())?;
        let v: f64 = fields[2].parse().map_err(|_| bad())?;
        if t == 0 || i >= n_actions {
            return Err(Error::Csv(format!(
                "line {}: round or action out of range",
                lineno + 1
            )));
        }
        if rows.len() < t {
            rows.resize(t, vec![None; n_actions]);
        }
        rows[t - 1][i] = Some(v);
    }
    rows.into_iter()
        .enumerate()
        .map(|(t, r)| {
            r.into_iter()
                .enumerate()
                .map(|(i, v)| {
                    v.ok_or_else(|| {
                        Error::Csv(format!("missing loss for round {} action {i}", t + 1))
                    })
                })
                .collect()
        })
        .collect()
}

fn quad_form(ctx: &GramContext, alpha: &[f64]) -> f64 {
    let a = DVector::from_column_slice(alpha);
    (a.transpose() * ctx.gram() * &a)[(0, 0)]
}

/// Shrinks `α` so that `√(αᵀKα) <= b`; leaves it alone when already inside.
pub fn rescale_to_ball(alpha: &[f64], ctx: &GramContext, b: f64) -> Result<Vec<f64>> {
    if alpha.len() != ctx.n_actions() {
        return Err(Error::DimensionMismatch(ctx.n_actions(), alpha.len()));
    }
    let q = quad_form(ctx, alpha);
    if q < -1e-12 {
        return Err(Error::NotPsd {
            min_eigenvalue: q,
            tolerance: 1e-12,
        });
    }
    let norm = q.max(0.0).sqrt();
    if norm > b {
        let s = b / norm;
        Ok(alpha.iter().map(|a| a * s).collect())
    } else {
        Ok(alpha.to_vec())
    }
}

/// Minimum-norm coefficients with `K α = v`, or `None` if `v` is not in the
/// range of `K` (relative residual above `1e-8`).
pub fn solve_in_span(ctx: &GramContext, v: &[f64]) -> Option<Vec<f64>> {
    let eig = SymmetricEigen::new(ctx.gram().clone());
    let norm = eig.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let cutoff = 1e-10 * norm.max(f64::MIN_POSITIVE);
    let rhs = DVector::from_column_slice(v);
    let coords = eig.eigenvectors.transpose() * &rhs;
    let mut scaled = coords.clone();
    for (c, mu) in scaled.iter_mut().zip(eig.eigenvalues.iter()) {
        *c = if *mu > cutoff { *c / mu } else { 0.0 };
    }
    let alpha = &eig.eigenvectors * scaled;
    let resid = (ctx.gram() * &alpha - &rhs).amax();
    let scale = rhs.amax().max(1.0);
    (resid <= 1e-8 * scale).then(|| alpha.iter().copied().collect())
}

fn round_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

fn check_b(b: f64) -> Result<()> {
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::input(format!(
            "norm bound B must be positive (got {b})"
        )));
    }
    Ok(())
}

fn check_index(i: usize, n: usize, what: &str) -> Result<()> {
    if i >= n {
        return Err(Error::input(format!(
            "{what} index {i} out of range for {n} actions"
        )));
    }
    Ok(())
}

/// Builds the loss sequence for horizon `T`. Depends only on `(spec, ctx, T)`.
pub fn generate(spec: &AdversarySpec, ctx: &GramContext, horizon: usize) -> Result<LossSequence> {
    if horizon == 0 {
        return Err(Error::input("horizon must be at least 1"));
    }
    let n = ctx.n_actions();
    let k = ctx.gram();
    let alphas: Vec<Vec<f64>> = match spec {
        AdversarySpec::RankOne { anchors } => {
            if anchors.len() != horizon {
                return Err(Error::input(format!(
                    "rank-one schedule has {} rounds, horizon is {horizon}",
                    anchors.len()
                )));
            }
            anchors
                .iter()
                .map(|&z| {
                    check_index(z, n, "anchor")?;
                    let mut a = vec![0.0; n];
                    a[z] = 1.0;
                    Ok(a)
                })
                .collect::<Result<_>>()?
        }
        AdversarySpec::RandomRkhs { b, seed } => {
            check_b(*b)?;
            (0..horizon)
                .map(|t| {
                    let mut rng = round_rng(*seed, t);
                    let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                    rescale_to_ball(&a, ctx, *b)
                })
                .collect::<Result<_>>()?
        }
        AdversarySpec::Switching { segments, b } => {
            check_b(*b)?;
            let total: usize = segments.iter().map(|s| s.0).sum();
            if total != horizon {
                return Err(Error::input(format!(
                    "switching segments cover {total} rounds, horizon is {horizon}"
                )));
            }
            let mut out = Vec::with_capacity(horizon);
            for &(len, z) in segments {
                check_index(z, n, "segment target")?;
                let kzz = k[(z, z)];
                let mut a = vec![0.0; n];
                if kzz > 0.0 {
                    a[z] = -b / kzz.sqrt();
                }
                out.extend(std::iter::repeat_n(a, len));
            }
            out
        }
        AdversarySpec::BestArmGap { best, gap, b, seed } => {
            check_b(*b)?;
            check_index(*best, n, "best")?;
            if !(*gap > 0.0 && *gap < 1.0) {
                return Err(Error::input(format!("gap must lie in (0, 1) (got {gap})")));
            }
            best_arm_gap(ctx, *best, *gap, *b, *seed, horizon)
        }
        AdversarySpec::Replay { losses, b } => {
            check_b(*b)?;
            if losses.len() != horizon {
                return Err(Error::input(format!(
                    "replayed table has {} rounds, horizon is {horizon}",
                    losses.len()
                )));
            }
            losses
                .iter()
                .enumerate()
                .map(|(t, row)| {
                    if row.len() != n {
                        return Err(Error::DimensionMismatch(n, row.len()));
                    }
                    let a = solve_in_span(ctx, row).ok_or_else(|| {
                        Error::input(format!(
                            "round {} losses are not in the span of the kernel features",
                            t + 1
                        ))
                    })?;
                    let norm = quad_form(ctx, &a).max(0.0).sqrt();
                    if norm > b + 1e-10 {
                        return Err(Error::input(format!(
                            "round {} losses have RKHS norm {norm} above B = {b}",
                            t + 1
                        )));
                    }
                    Ok(a)
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(LossSequence::from_alphas(ctx, alphas, spec.norm_bound()))
}

fn best_arm_gap(
    ctx: &GramContext,
    best: usize,
    gap: f64,
    b: f64,
    seed: u64,
    horizon: usize,
) -> Vec<Vec<f64>> {
    let n = ctx.n_actions();
    let k = ctx.gram();
    let kbb = k[(best, best)];
    let others: Vec<usize> = (0..n).filter(|&i| i != best).collect();
    let amp = if others.is_empty() {
        0.0
    } else {
        let mean_k = others.iter().map(|&i| k[(i, best)]).sum::<f64>() / others.len() as f64;
        let spread = kbb - mean_k;
        if spread > 0.0 {
            gap / spread
        } else {
            0.0
        }
    };
    let mut scale = 1.0;
    let amp_norm = amp * kbb.sqrt();
    if amp_norm > b {
        scale = b / amp_norm;
        log::warn!(
            "best-arm gap {gap} needs RKHS norm {amp_norm:.4} > B = {b}; realized gap is {:.4}",
            gap * scale
        );
    }
    let amp = amp * scale;

    // Common-mode level: spend half of the remaining norm budget on it.
    let level = solve_in_span(ctx, &vec![1.0; n]).and_then(|h| {
        let hh = quad_form(ctx, &h);
        if !(hh > 0.0) || scale < 1.0 {
            return None;
        }
        // ‖−A Φ_b − s h‖² = A² k_bb + 2 A s + s² ‖h‖² <= B²
        let c = amp * amp * kbb - b * b;
        let s_max = (-amp + (amp * amp - hh * c).max(0.0).sqrt()) / hh;
        Some((h, 0.5 * s_max))
    });

    (0..horizon)
        .map(|t| {
            let mut a = vec![0.0; n];
            a[best] = -amp;
            if let Some((h, s_max)) = &level {
                let u: f64 = round_rng(seed, t).random();
                let s = s_max * (2.0 * u - 1.0);
                a.iter_mut().zip(h).for_each(|(ai, hi)| *ai += s * hi);
            }
            a
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_gram, grid_actions, ActionSet, KernelSpec, MaternNu};
    use approx::assert_abs_diff_eq;

    fn matern_ctx(n: usize) -> GramContext {
        build_gram(
            &KernelSpec::Matern {
                nu: MaternNu::Half,
                lengthscale: 0.3,
            },
            &grid_actions(1, n).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn rank_one_reproduces_the_anchor() {
        let ctx = matern_ctx(3);
        let seq = generate(
            &AdversarySpec::RankOne {
                anchors: vec![0; 5],
            },
            &ctx,
            5,
        )
        .unwrap();
        for t in 0..5 {
            assert_eq!(seq.loss(t, 0), 1.0);
        }
        assert!(generate(
            &AdversarySpec::RankOne {
                anchors: vec![0; 4]
            },
            &ctx,
            5
        )
        .is_err());
        assert!(generate(&AdversarySpec::RankOne { anchors: vec![3] }, &ctx, 1).is_err());
    }

    #[test]
    fn random_rkhs_stays_in_ball() {
        let ctx = matern_ctx(6);
        let seq = generate(&AdversarySpec::RandomRkhs { b: 1.0, seed: 11 }, &ctx, 50).unwrap();
        for t in 0..50 {
            assert!(seq.rkhs_norm(&ctx, t) <= 1.0 + 1e-10);
        }
        let again = generate(&AdversarySpec::RandomRkhs { b: 1.0, seed: 11 }, &ctx, 50).unwrap();
        assert_eq!(seq, again);
    }

    #[test]
    fn switching_target_wins_column_sums() {
        let ctx = matern_ctx(3);
        let seq = generate(
            &AdversarySpec::Switching {
                segments: vec![(7, 2)],
                b: 1.0,
            },
            &ctx,
            7,
        )
        .unwrap();
        // brute-force column sums
        let mut sums = [0.0; 3];
        for t in 0..7 {
            for (i, s) in sums.iter_mut().enumerate() {
                *s += seq.loss(t, i);
            }
        }
        let argmin = (0..3).min_by(|&a, &b| sums[a].total_cmp(&sums[b])).unwrap();
        assert_eq!(argmin, 2);
        assert!(generate(
            &AdversarySpec::Switching {
                segments: vec![(3, 0)],
                b: 1.0
            },
            &ctx,
            4
        )
        .is_err());
    }

    #[test]
    fn best_arm_gap_two_arms_is_exact() {
        let k = KernelSpec::SquaredExponential { lengthscale: 0.01 };
        let ctx = build_gram(&k, &ActionSet::new(vec![vec![0.0], vec![1.0]]).unwrap()).unwrap();
        let seq = generate(
            &AdversarySpec::BestArmGap {
                best: 1,
                gap: 0.3,
                b: 1.0,
                seed: 5,
            },
            &ctx,
            20,
        )
        .unwrap();
        for t in 0..20 {
            assert_abs_diff_eq!(seq.loss(t, 0) - seq.loss(t, 1), 0.3, epsilon = 1e-12);
            assert!(seq.rkhs_norm(&ctx, t) <= 1.0 + 1e-10);
        }
        // the common-mode level is seeded, not constant
        assert!((seq.loss(0, 0) - seq.loss(1, 0)).abs() > 0.0);
    }

    #[test]
    fn best_arm_gap_mean_gap_on_a_grid() {
        let ctx = matern_ctx(9);
        let seq = generate(
            &AdversarySpec::BestArmGap {
                best: 4,
                gap: 0.4,
                b: 1.0,
                seed: 2,
            },
            &ctx,
            10,
        )
        .unwrap();
        for t in 0..10 {
            let row = seq.round_losses(t);
            let mean_gap = row
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != 4)
                .map(|(_, v)| v - row[4])
                .sum::<f64>()
                / 8.0;
            assert_abs_diff_eq!(mean_gap, 0.4, epsilon = 1e-9);
            assert!(seq.rkhs_norm(&ctx, t) <= 1.0 + 1e-10);
        }
        assert!(generate(
            &AdversarySpec::BestArmGap {
                best: 0,
                gap: 1.0,
                b: 1.0,
                seed: 0
            },
            &ctx,
            3
        )
        .is_err());
    }

    #[test]
    fn rescale_examples() {
        let k = KernelSpec::SquaredExponential { lengthscale: 0.01 };
        let ctx = build_gram(&k, &ActionSet::new(vec![vec![0.0], vec![1.0]]).unwrap()).unwrap();
        // αᵀKα = 4 with K = I
        let a = rescale_to_ball(&[2.0, 0.0], &ctx, 1.0).unwrap();
        assert_eq!(a, vec![1.0, 0.0]);
        assert_eq!(
            rescale_to_ball(&[0.3, 0.4], &ctx, 1.0).unwrap(),
            vec![0.3, 0.4]
        );
        assert_eq!(
            rescale_to_ball(&[0.0, 0.0], &ctx, 1.0).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn csv_replay_reproduces_losses() {
        let ctx = matern_ctx(4);
        let seq = generate(&AdversarySpec::RandomRkhs { b: 0.8, seed: 3 }, &ctx, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("losses.csv");
        seq.write_csv(std::fs::File::create(&path).unwrap())
            .unwrap();
        let table = read_loss_csv(&path, 4).unwrap();
        let replay = generate(
            &AdversarySpec::Replay {
                losses: table,
                b: 0.8,
            },
            &ctx,
            6,
        )
        .unwrap();
        for t in 0..6 {
            for i in 0..4 {
                assert_abs_diff_eq!(replay.loss(t, i), seq.loss(t, i), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn replay_rejects_norm_violations() {
        let ctx = matern_ctx(3);
        let big = vec![vec![5.0, -5.0, 5.0]];
        assert!(generate(
            &AdversarySpec::Replay {
                losses: big,
                b: 1.0
            },
            &ctx,
            1
        )
        .is_err());
    }
}
