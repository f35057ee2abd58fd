//! Kernel evaluation, finite action sets and Gram-matrix assembly.
//!
//! Every other module works in the coordinate system built here: on a finite
//! action set the span of the features is at most `N`-dimensional, so the
//! symmetric square root `S` of the Gram matrix `K` (with `S·S = K`) supplies
//! explicit feature vectors `Φ(x_i) = row_i(S)`.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest action set `grid_actions` will build unless told otherwise.
pub const DEFAULT_MAX_ACTIONS: usize = 4096;

/// Relative PSD tolerance on the Gram spectrum.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Half-integer Matérn smoothness values with closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternNu {
    pub fn from_value(nu: f64) -> Result<Self> {
        if nu == 0.5 {
            Ok(MaternNu::Half)
        } else if nu == 1.5 {
            Ok(MaternNu::ThreeHalves)
        } else if nu == 2.5 {
            Ok(MaternNu::FiveHalves)
        } else {
            Err(Error::input(format!(
                "matern smoothness must be one of 0.5, 1.5, 2.5 (got {nu})"
            )))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            MaternNu::Half => 0.5,
            MaternNu::ThreeHalves => 1.5,
            MaternNu::FiveHalves => 2.5,
        }
    }
}

/// A bounded kernel, `k(x, x) <= 1` on `[0,1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// `exp(-r² / (2ℓ²))`.
    SquaredExponential {
        lengthscale: f64,
    },
    Matern {
        nu: MaternNu,
        lengthscale: f64,
    },
    /// Dot product scaled by `1/d`, so the diagonal stays in `[0, 1]` on the unit cube.
    Linear,
    /// Explicit finite-rank feature map `Φ_j(x) = √μ_j · u_j(x)`, with `u(x)` a
    /// unit vector drawn deterministically from `(seed, x)`.
    ///
    /// Because `‖u(x)‖ = 1`, every covariance `Σ(p)` satisfies `Σ(p) ⪯ diag(μ)`,
    /// so its ordered eigenvalues are bounded by `μ_j` for every distribution
    /// `p`. Eigenvalues are divided by `max(1, μ_1)` so that `k(x,x) <= 1`.
    FiniteRank {
        eigenvalues: Vec<f64>,
        seed: u64,
    },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::SquaredExponential { lengthscale }
            | KernelSpec::Matern { lengthscale, .. } => {
                if !(lengthscale.is_finite() && *lengthscale > 0.0) {
                    return Err(Error::input(format!(
                        "lengthscale must be positive (got {lengthscale})"
                    )));
                }
            }
            KernelSpec::Linear => {}
            KernelSpec::FiniteRank { eigenvalues, .. } => {
                if eigenvalues.is_empty() {
                    return Err(Error::input(
                        "finite-rank kernel needs at least one eigenvalue",
                    ));
                }
                if eigenvalues.iter().any(|m| !m.is_finite() || *m < 0.0) {
                    return Err(Error::input(
                        "finite-rank eigenvalues must be finite and non-negative",
                    ));
                }
                if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
                    return Err(Error::input(
                        "finite-rank eigenvalues must be non-increasing",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Feature vector of a finite-rank kernel at `x`; `None` for the other variants.
    pub fn finite_rank_features(&self, x: &[f64]) -> Option<Vec<f64>> {
        match self {
            KernelSpec::FiniteRank { eigenvalues, seed } => {
                Some(finite_rank_features(eigenvalues, *seed, x))
            }
            _ => None,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn point_key(seed: u64, x: &[f64]) -> u64 {
    // +0.0 and -0.0 describe the same point.
    x.iter().fold(splitmix64(seed), |h, &c| {
        splitmix64(h ^ (c + 0.0).to_bits())
    })
}

fn finite_rank_features(eigenvalues: &[f64], seed: u64, x: &[f64]) -> Vec<f64> {
    let scale = eigenvalues.first().copied().unwrap_or(0.0).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(point_key(seed, x));
    let mut u: Vec<f64> = (0..eigenvalues.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        u.iter_mut().for_each(|v| *v /= norm);
    }
    u.iter()
        .zip(eigenvalues)
        .map(|(v, mu)| v * (mu / scale).sqrt())
        .collect()
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Evaluates `k(x, y)`.
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(x.len(), y.len()));
    }
    Ok(match spec {
        KernelSpec::SquaredExponential { lengthscale } => {
            (-sq_dist(x, y) / (2.0 * lengthscale * lengthscale)).exp()
        }
        KernelSpec::Matern { nu, lengthscale } => {
            let r = sq_dist(x, y).sqrt() / lengthscale;
            match nu {
                MaternNu::Half => (-r).exp(),
                MaternNu::ThreeHalves => {
                    let s = 3f64.sqrt() * r;
                    (1.0 + s) * (-s).exp()
                }
                MaternNu::FiveHalves => {
                    let s = 5f64.sqrt() * r;
                    (1.0 + s + s * s / 3.0) * (-s).exp()
                }
            }
        }
        KernelSpec::Linear => {
            let d = x.len().max(1) as f64;
            x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d
        }
        KernelSpec::FiniteRank { eigenvalues, seed } => {
            let fx = finite_rank_features(eigenvalues, *seed, x);
            let fy = finite_rank_features(eigenvalues, *seed, y);
            fx.iter().zip(&fy).map(|(a, b)| a * b).sum()
        }
    })
}

/// A finite set of distinct points in `[0,1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    points: Vec<Vec<f64>>,
}

impl ActionSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::input("action set must contain at least one point"))?;
        let d = first.len();
        if d == 0 {
            return Err(Error::input("action dimension must be at least 1"));
        }
        for p in &points {
            if p.len() != d {
                return Err(Error::DimensionMismatch(d, p.len()));
            }
            if p.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::input(format!("action {p:?} lies outside [0,1]^{d}")));
            }
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| {
            points[a]
                .iter()
                .zip(&points[b])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        if let Some(w) = order.windows(2).find(|w| points[w[0]] == points[w[1]]) {
            return Err(Error::input(format!(
                "actions {} and {} coincide",
                w[0].min(w[1]),
                w[0].max(w[1])
            )));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    /// Reads points from a headerless CSV, one point per row.
    pub fn from_csv(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            match row {
                Ok(r) => points.push(r),
                // tolerate a header on the first line
                Err(_) if lineno == 0 => continue,
                Err(e) => return Err(Error::Csv(format!("line {}: {e}", lineno + 1))),
            }
        }
        Self::new(points)
    }
}

/// Uniform grid on `[0,1]^d` with `n_per_axis` equally spaced values per axis.
pub fn grid_actions(d: usize, n_per_axis: usize) -> Result<ActionSet> {
    grid_actions_capped(d, n_per_axis, DEFAULT_MAX_ACTIONS)
}

pub fn grid_actions_capped(d: usize, n_per_axis: usize, cap: usize) -> Result<ActionSet> {
    if d == 0 || n_per_axis == 0 {
        return Err(Error::input("grid needs d >= 1 and n_per_axis >= 1"));
    }
    let total = (n_per_axis as u128)
        .checked_pow(d as u32)
        .unwrap_or(u128::MAX);
    if total > cap as u128 {
        return Err(Error::Size {
            requested: total,
            cap,
        });
    }
    let axis: Vec<f64> = if n_per_axis == 1 {
        vec![0.5]
    } else {
        (0..n_per_axis)
            .map(|k| k as f64 / (n_per_axis - 1) as f64)
            .collect()
    };
    let total = total as usize;
    let mut points = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut p = vec![0.0; d];
        // first coordinate varies slowest
        for c in (0..d).rev() {
            p[c] = axis[idx % n_per_axis];
            idx /= n_per_axis;
        }
        points.push(p);
    }
    ActionSet::new(points)
}

/// Kernel, action set, Gram matrix and its symmetric square root.
#[derive(Debug, Clone)]
pub struct GramContext {
    kernel: KernelSpec,
    actions: ActionSet,
    gram: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl GramContext {
    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn actions(&self) -> &ActionSet {
        &self.actions
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    /// `K`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `S` with `S·S = K`; row `i` is the feature vector of action `i`.
    pub fn sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    /// Spectrum of `K`, non-increasing and clamped at zero.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn feature(&self, i: usize) -> Vec<f64> {
        self.sqrt.row(i).iter().copied().collect()
    }

    /// Writes `K` as `i,j,value` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "i,j,value")?;
        let n = self.n_actions();
        for i in 0..n {
            for j in 0..n {
                writeln!(out, "{i},{j},{}", self.gram[(i, j)])?;
            }
        }
        Ok(())
    }
}

/// Assembles `K`, checks it is PSD and forms its symmetric square root.
pub fn build_gram(spec: &KernelSpec, actions: &ActionSet) -> Result<GramContext> {
    spec.validate()?;
    let n = actions.len();
    let mut gram = DMatrix::zeros(n, n);
    if let KernelSpec::FiniteRank { .. } = spec {
        let feats: Vec<Vec<f64>> = actions
            .points()
            .iter()
            .map(|p| spec.finite_rank_features(p).expect("finite-rank variant"))
            .collect();
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = feats[i].iter().zip(&feats[j]).map(|(a, b)| a * b).sum();
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
    } else {
        for i in 0..n {
            for j in 0..=i {
                let v = eval_kernel(spec, actions.point(i), actions.point(j))?;
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
    }
    from_gram_matrix(spec.clone(), actions.clone(), gram)
}

fn from_gram_matrix(
    kernel: KernelSpec,
    actions: ActionSet,
    gram: DMatrix<f64>,
) -> Result<GramContext> {
    let eig = SymmetricEigen::new(gram.clone());
    let norm = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tolerance = PSD_TOLERANCE * norm;
    let min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min < -tolerance {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
            tolerance,
        });
    }
    let clamped: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let n = gram.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for (c, mu) in clamped.iter().enumerate() {
        let s = mu.sqrt();
        scaled.column_mut(c).iter_mut().for_each(|v| *v *= s);
    }
    let raw = &scaled * eig.eigenvectors.transpose();
    let sqrt = (&raw + raw.transpose()) * 0.5;

    let recon = &sqrt * &sqrt;
    let err = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .fold(0.0f64, |m, (i, j)| {
            m.max((recon[(i, j)] - gram[(i, j)]).abs())
        });
    if err > 1e-9 {
        return Err(Error::LinAlg(format!(
            "square root of the gram matrix is inaccurate (max error {err:e})"
        )));
    }

    let mut eigenvalues = clamped;
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    Ok(GramContext {
        kernel,
        actions,
        gram,
        sqrt,
        eigenvalues,
    })
}
