//! One-vs-rest linear SVMs and p-norm multiple kernel learning over linear
//! kernels of L2-normalized features.
//!
//! The bias is handled by augmenting every kernel with a constant 1, so the
//! binary dual is a box-constrained QP solved by coordinate descent.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convnet::{read_named_arrays, write_named_arrays, NamedArray, NetError, Scalar};
use crate::rng;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("C must be positive, got {0}")]
    BadC(f64),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("bad hyperparameter: {0}")]
    BadHyperparam(String),
    #[error("too few samples: need at least {needed}, found {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<NetError> for FusionError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Io(e) => FusionError::Io(e),
            other => FusionError::Format(other.to_string()),
        }
    }
}

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            let row = self.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Matrix {
            rows: rows.len(),
            cols: cols.len(),
            data,
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.at(i, i)).sum()
    }
}

fn normalized_rows(x: &[Vec<f64>], dim: Option<usize>) -> Result<Matrix, FusionError> {
    let d = dim.or_else(|| x.first().map(Vec::len)).unwrap_or(0);
    let mut m = Matrix::zeros(x.len(), d);
    for (i, v) in x.iter().enumerate() {
        if v.len() != d {
            return Err(FusionError::DimMismatch {
                expected: d,
                found: v.len(),
            });
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (o, a) in m.data[i * d..(i + 1) * d].iter_mut().zip(v) {
                *o = a / norm;
            }
        }
    }
    Ok(m)
}

fn gram_of(a: &Matrix, b: &Matrix) -> Matrix {
    let mut g = Matrix::zeros(a.rows, b.rows);
    if a.cols > 0 && a.rows > 0 && b.rows > 0 {
        f64::gemm(a.rows, a.cols, b.rows, &a.data, false, &b.data, true, &mut g.data, false);
    }
    g
}

/// `G[i][j] = <a_i, b_j>` after L2-normalizing every vector (zero vectors stay zero).
pub fn linear_kernel(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Matrix, FusionError> {
    let na = normalized_rows(a, None)?;
    let nb = normalized_rows(b, Some(na.cols).filter(|_| !a.is_empty()))?;
    Ok(gram_of(&na, &nb))
}

/// Linear kernel fitted on training features: vectors are centered on the
/// training mean and L2-normalized, the training gram is scaled to trace `n`
/// and the same transform is applied to cross kernels.
#[derive(Debug, Clone)]
pub struct FeatureKernel {
    mean: Vec<f64>,
    train: Matrix,
    pub scale: f64,
}

fn centered(x: &[Vec<f64>], mean: &[f64]) -> Result<Vec<Vec<f64>>, FusionError> {
    x.iter()
        .map(|v| {
            if v.len() != mean.len() {
                return Err(FusionError::DimMismatch {
                    expected: mean.len(),
                    found: v.len(),
                });
            }
            Ok(v.iter().zip(mean).map(|(a, m)| a - m).collect())
        })
        .collect()
}

impl FeatureKernel {
    pub fn fit(train: &[Vec<f64>]) -> Result<(Self, Matrix), FusionError> {
        let d = train.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; d];
        for v in train {
            if v.len() != d {
                return Err(FusionError::DimMismatch {
                    expected: d,
                    found: v.len(),
                });
            }
            for (m, a) in mean.iter_mut().zip(v) {
                *m += a;
            }
        }
        for m in &mut mean {
            *m /= train.len().max(1) as f64;
        }
        let rows = normalized_rows(&centered(train, &mean)?, Some(d))?;
        let mut g = gram_of(&rows, &rows);
        let tr = g.trace();
        let scale = if tr > 0.0 { g.rows as f64 / tr } else { 1.0 };
        for v in &mut g.data {
            *v *= scale;
        }
        symmetrize(&mut g);
        Ok((FeatureKernel { mean, train: rows, scale }, g))
    }

    pub fn dim(&self) -> usize {
        self.train.cols
    }

    /// `test × train` kernel with the training transform.
    pub fn cross(&self, test: &[Vec<f64>]) -> Result<Matrix, FusionError> {
        let rows = normalized_rows(&centered(test, &self.mean)?, Some(self.train.cols))?;
        let mut g = gram_of(&rows, &self.train);
        for v in &mut g.data {
            *v *= self.scale;
        }
        Ok(g)
    }
}

fn symmetrize(g: &mut Matrix) {
    for i in 0..g.rows {
        for j in i + 1..g.cols {
            let v = 0.5 * (g.at(i, j) + g.at(j, i));
            g.data[i * g.cols + j] = v;
            g.data[j * g.cols + i] = v;
        }
    }
}

/// Per-modality training grams sharing one label vector.
#[derive(Debug, Clone)]
pub struct KernelSet {
    pub grams: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl KernelSet {
    pub fn new(grams: Vec<Matrix>, labels: Vec<usize>) -> Result<Self, FusionError> {
        let n = labels.len();
        if grams.is_empty() {
            return Err(FusionError::BadHyperparam("no kernels".into()));
        }
        for g in &grams {
            if g.rows != n || g.cols != n {
                return Err(FusionError::DimMismatch {
                    expected: n,
                    found: g.rows,
                });
            }
        }
        Ok(KernelSet { grams, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> KernelSet {
        KernelSet {
            grams: self.grams.iter().map(|g| g.select(idx, idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Stopping tolerances of the binary dual solver.
#[derive(Debug, Clone, Copy)]
pub struct SolverTol {
    /// Maximum projected-gradient magnitude.
    pub kkt: f64,
    /// Duality gap relative to `max(1, |primal|)`.
    pub gap: f64,
    pub max_passes: usize,
}

impl Default for SolverTol {
    fn default() -> Self {
        SolverTol {
            kkt: 1e-6,
            gap: 1e-4,
            max_passes: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub passes: usize,
    pub primal: f64,
    pub dual: f64,
    pub kkt: f64,
}

/// Binary dual `min ½ coefᵀ K coef − Σα, 0 ≤ α ≤ C` with `coef = α·y` and
/// `K` already bias-augmented. `alpha` is used as the warm start.
pub(crate) fn solve_binary(
    k: &Matrix,
    y: &[f64],
    c: f64,
    alpha: &mut [f64],
    tol: &SolverTol,
    rng: &mut ChaCha8Rng,
    single_pass: bool,
) -> SolveStats {
    let n = y.len();
    let mut f = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut passes = 0;
    recompute_f(k, y, alpha, &mut f);
    loop {
        order.shuffle(rng);
        for &i in &order {
            let g = y[i] * f[i] - 1.0;
            let qii = k.at(i, i);
            if qii <= 0.0 {
                continue;
            }
            let new = (alpha[i] - g / qii).clamp(0.0, c);
            let delta = new - alpha[i];
            if delta != 0.0 {
                alpha[i] = new;
                let s = delta * y[i];
                for (fj, kij) in f.iter_mut().zip(k.row(i)) {
                    *fj += s * kij;
                }
            }
        }
        passes += 1;
        let done = |st: &SolveStats| st.kkt < tol.kkt && st.primal - st.dual <= tol.gap * st.primal.abs().max(1.0);
        let mut stats = binary_stats(y, c, alpha, &f, passes);
        // Confirm apparent convergence against freshly computed gradients.
        if single_pass || done(&stats) || passes >= tol.max_passes || passes % 64 == 0 {
            recompute_f(k, y, alpha, &mut f);
            stats = binary_stats(y, c, alpha, &f, passes);
        }
        if single_pass || done(&stats) || passes >= tol.max_passes {
            if passes >= tol.max_passes && !single_pass {
                log::warn!(
                    "svm solver hit {passes} passes (kkt {:.2e}, gap {:.2e})",
                    stats.kkt,
                    stats.primal - stats.dual
                );
            }
            return stats;
        }
    }
}

fn recompute_f(k: &Matrix, y: &[f64], alpha: &[f64], f: &mut [f64]) {
    let coef: Vec<f64> = alpha.iter().zip(y).map(|(a, y)| a * y).collect();
    for (i, fi) in f.iter_mut().enumerate() {
        *fi = k.row(i).iter().zip(&coef).map(|(a, b)| a * b).sum();
    }
}

fn binary_stats(y: &[f64], c: f64, alpha: &[f64], f: &[f64], passes: usize) -> SolveStats {
    let mut quad = 0.0;
    let mut hinge = 0.0;
    let mut sum_a = 0.0;
    let mut kkt: f64 = 0.0;
    for i in 0..y.len() {
        let margin = y[i] * f[i];
        quad += alpha[i] * margin;
        hinge += (1.0 - margin).max(0.0);
        sum_a += alpha[i];
        let g = margin - 1.0;
        let pg = if alpha[i] <= 0.0 {
            g.min(0.0)
        } else if alpha[i] >= c {
            g.max(0.0)
        } else {
            g
        };
        kkt = kkt.max(pg.abs());
    }
    SolveStats {
        passes,
        primal: 0.5 * quad + c * hinge,
        dual: sum_a - 0.5 * quad,
        kkt,
    }
}

fn augmented(k: &Matrix) -> Matrix {
    let mut a = k.clone();
    for v in &mut a.data {
        *v += 1.0;
    }
    a
}

fn class_count(labels: &[usize]) -> Result<usize, FusionError> {
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let first = labels.first().copied();
    if labels.iter().all(|&l| Some(l) == first) {
        return Err(FusionError::SingleClass);
    }
    Ok(classes)
}

fn check_c(c: f64) -> Result<(), FusionError> {
    if c > 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(FusionError::BadC(c))
    }
}

fn ovr_targets(labels: &[usize], class: usize) -> Vec<f64> {
    labels
        .iter()
        .map(|&l| if l == class { 1.0 } else { -1.0 })
        .collect()
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// One-vs-rest dual solutions on a fixed kernel: `coef[c][i] = α_i·y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSvm {
    pub classes: usize,
    pub c: f64,
    pub coef: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub stats: Vec<SolveStats>,
}

impl KernelSvm {
    /// Class scores for rows of a `test × train` kernel (not augmented).
    pub fn decision(&self, cross: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(cross.rows, self.classes);
        for t in 0..cross.rows {
            let row = cross.row(t);
            for c in 0..self.classes {
                let s: f64 = row.iter().zip(&self.coef[c]).map(|(k, a)| k * a).sum();
                out.data[t * self.classes + c] = s + self.bias[c];
            }
        }
        out
    }

    pub fn predict(&self, cross: &Matrix) -> Vec<usize> {
        let d = self.decision(cross);
        (0..d.rows).map(|i| argmax(d.row(i))).collect()
    }
}

fn solve_ovr(
    k_aug: &Matrix,
    labels: &[usize],
    classes: usize,
    c: f64,
    alphas: &mut [Vec<f64>],
    tol: &SolverTol,
    seed: u64,
    single_pass: bool,
) -> Vec<SolveStats> {
    (0..classes)
        .map(|class| {
            let y = ovr_targets(labels, class);
            let mut r = rng::rng_from(&[seed, class as u64, 0x737663]);
            solve_binary(k_aug, &y, c, &mut alphas[class], tol, &mut r, single_pass)
        })
        .collect()
}

fn to_kernel_svm(labels: &[usize], classes: usize, c: f64, alphas: &[Vec<f64>], stats: Vec<SolveStats>) -> KernelSvm {
    let coef: Vec<Vec<f64>> = (0..classes)
        .map(|class| {
            let y = ovr_targets(labels, class);
            alphas[class].iter().zip(&y).map(|(a, y)| a * y).collect()
        })
        .collect();
    let bias = coef.iter().map(|v| v.iter().sum()).collect();
    KernelSvm {
        classes,
        c,
        coef,
        bias,
        stats,
    }
}

/// One-vs-rest SVM on a precomputed kernel.
pub fn train_kernel_svm(k: &Matrix, labels: &[usize], c: f64, tol: &SolverTol) -> Result<KernelSvm, FusionError> {
    check_c(c)?;
    if k.rows != labels.len() || k.cols != labels.len() {
        return Err(FusionError::DimMismatch {
            expected: labels.len(),
            found: k.rows,
        });
    }
    let classes = class_count(labels)?;
    let k_aug = augmented(k);
    let mut alphas = vec![vec![0.0; labels.len()]; classes];
    let stats = solve_ovr(&k_aug, labels, classes, c, &mut alphas, tol, 0, false);
    Ok(to_kernel_svm(labels, classes, c, &alphas, stats))
}

/// Linear one-vs-rest SVM with explicit weight vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub classes: usize,
    pub dim: usize,
    pub c: f64,
    /// `classes × dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Training mean subtracted before normalization.
    pub mean: Vec<f64>,
    /// Factor applied to normalized inputs (the training trace scale).
    pub scale: f64,
    pub stats: Vec<SolveStats>,
}

/// One-vs-rest L2-regularized hinge-loss SVM on L2-normalized features.
pub fn train_linear_svm(features: &[Vec<f64>], labels: &[usize], c: f64) -> Result<SvmModel, FusionError> {
    train_linear_svm_tol(features, labels, c, &SolverTol::default())
}

pub fn train_linear_svm_tol(
    features: &[Vec<f64>],
    labels: &[usize],
    c: f64,
    tol: &SolverTol,
) -> Result<SvmModel, FusionError> {
    check_c(c)?;
    if features.len() != labels.len() {
        return Err(FusionError::DimMismatch {
            expected: labels.len(),
            found: features.len(),
        });
    }
    class_count(labels)?;
    let (fk, gram) = FeatureKernel::fit(features)?;
    let ksvm = train_kernel_svm(&gram, labels, c, tol)?;
    let dim = fk.dim();
    let mut weights = vec![0.0; ksvm.classes * dim];
    for (class, coef) in ksvm.coef.iter().enumerate() {
        let w = &mut weights[class * dim..(class + 1) * dim];
        for (i, &a) in coef.iter().enumerate() {
            if a != 0.0 {
                for (wj, xj) in w.iter_mut().zip(fk.train.row(i)) {
                    *wj += a * xj;
                }
            }
        }
    }
    Ok(SvmModel {
        classes: ksvm.classes,
        dim,
        c,
        weights,
        bias: ksvm.bias,
        mean: fk.mean.clone(),
        scale: fk.scale,
        stats: ksvm.stats,
    })
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> Result<Vec<f64>, FusionError> {
        if x.len() != self.dim {
            return Err(FusionError::DimMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        let x: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { self.scale / norm } else { 0.0 };
        Ok((0..self.classes)
            .map(|c| {
                let w = &self.weights[c * self.dim..(c + 1) * self.dim];
                w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() * inv + self.bias[c]
            })
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize, FusionError> {
        Ok(argmax(&self.decision(x)?))
    }

    pub fn predict_all(&self, xs: &[Vec<f64>]) -> Result<Vec<usize>, FusionError> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    pub fn to_named_arrays(&self) -> Vec<NamedArray> {
        vec![
            NamedArray {
                name: "svm.weight".into(),
                shape: vec![self.classes, self.dim],
                data: self.weights.iter().map(|&v| v as f32).collect(),
            },
            NamedArray {
                name: "svm.bias".into(),
                shape: vec![self.classes],
                data: self.bias.iter().map(|&v| v as f32).collect(),
            },
            NamedArray {
                name: "svm.mean".into(),
                shape: vec![self.dim],
                data: self.mean.iter().map(|&v| v as f32).collect(),
            },
            NamedArray {
                name: "svm.meta".into(),
                shape: vec![2],
                data: vec![self.c as f32, self.scale as f32],
            },
        ]
    }

    pub fn from_named_arrays(arrays: &[NamedArray]) -> Result<Self, FusionError> {
        let get = |name: &str| {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| FusionError::Format(format!("missing array {name}")))
        };
        let w = get("svm.weight")?;
        let b = get("svm.bias")?;
        let meta = get("svm.meta")?;
        let mean = get("svm.mean")?;
        if w.shape.len() != 2 || b.shape != [w.shape[0]] || meta.data.len() != 2 || mean.shape != [w.shape[1]] {
            return Err(FusionError::Format("inconsistent svm arrays".into()));
        }
        Ok(SvmModel {
            classes: w.shape[0],
            dim: w.shape[1],
            c: meta.data[0] as f64,
            weights: w.data.iter().map(|&v| v as f64).collect(),
            bias: b.data.iter().map(|&v| v as f64).collect(),
            mean: mean.data.iter().map(|&v| v as f64).collect(),
            scale: meta.data[1] as f64,
            stats: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        let f = std::fs::File::create(path)?;
        Ok(write_named_arrays(std::io::BufWriter::new(f), &self.to_named_arrays())?)
    }

    pub fn load(path: &Path) -> Result<Self, FusionError> {
        let f = std::fs::File::open(path)?;
        Self::from_named_arrays(&read_named_arrays(std::io::BufReader::new(f))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MklConfig {
    pub p: f64,
    pub c: f64,
    /// Warm-start alternations, each one stochastic dual pass per class.
    pub online_iters: usize,
    /// Exact-solve alternations.
    pub batch_iters: usize,
    /// Relative objective change that ends the batch phase.
    pub tol: f64,
    pub seed: u64,
}

impl Default for MklConfig {
    fn default() -> Self {
        MklConfig {
            p: 2.0,
            c: 1.0,
            online_iters: 100,
            batch_iters: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MklModel {
    pub beta: Vec<f64>,
    pub p: f64,
    pub svm: KernelSvm,
    /// Objective after each exact-solve alternation.
    pub objective_history: Vec<f64>,
}

fn p_norm(v: &[f64], p: f64) -> f64 {
    v.iter().map(|b| b.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

fn combined(kset: &KernelSet, beta: &[f64]) -> Matrix {
    let n = kset.len();
    let mut k = Matrix {
        rows: n,
        cols: n,
        data: vec![1.0; n * n],
    };
    for (g, &b) in kset.grams.iter().zip(beta) {
        if b != 0.0 {
            for (o, v) in k.data.iter_mut().zip(&g.data) {
                *o += b * v;
            }
        }
    }
    k
}

/// `Σ_c coef_cᵀ G coef_c` for every kernel.
fn kernel_norms(kset: &KernelSet, labels: &[usize], classes: usize, alphas: &[Vec<f64>]) -> Vec<f64> {
    let coefs: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let y = ovr_targets(labels, c);
            alphas[c].iter().zip(&y).map(|(a, y)| a * y).collect()
        })
        .collect();
    kset.grams
        .iter()
        .map(|g| {
            coefs
                .iter()
                .map(|coef| {
                    (0..g.rows)
                        .filter(|&i| coef[i] != 0.0)
                        .map(|i| coef[i] * g.row(i).iter().zip(coef).map(|(a, b)| a * b).sum::<f64>())
                        .sum::<f64>()
                })
                .sum::<f64>()
                .max(0.0)
        })
        .collect()
}

/// Closed-form p-norm update `β_m ∝ (β_m² S_m)^(1/(p+1))`, scaled to `‖β‖_p = 1`.
fn update_beta(beta: &mut [f64], norms: &[f64], p: f64) {
    let raw: Vec<f64> = beta
        .iter()
        .zip(norms)
        .map(|(b, s)| (b * b * s).powf(1.0 / (p + 1.0)))
        .collect();
    let z = p_norm(&raw, p);
    if z > 0.0 && z.is_finite() {
        for (b, r) in beta.iter_mut().zip(raw) {
            *b = r / z;
        }
    }
}

fn validate_mkl(kset: &KernelSet, cfg: &MklConfig) -> Result<usize, FusionError> {
    if !(cfg.p > 1.0 && cfg.p <= 2.0) {
        return Err(FusionError::BadHyperparam(format!("p = {} outside (1, 2]", cfg.p)));
    }
    if !(cfg.c > 0.0 && cfg.c.is_finite()) {
        return Err(FusionError::BadHyperparam(format!("C = {}", cfg.c)));
    }
    if cfg.batch_iters == 0 {
        return Err(FusionError::BadHyperparam("batch_iters must be at least 1".into()));
    }
    class_count(&kset.labels).map_err(|_| FusionError::BadHyperparam("labels contain a single class".into()))
}

pub fn train_mkl(kset: &KernelSet, p: f64, c: f64) -> Result<MklModel, FusionError> {
    train_mkl_with(
        kset,
        &MklConfig {
            p,
            c,
            ..MklConfig::default()
        },
    )
}

/// Alternates one-vs-rest SVM solves on `Σ β_m G_m` with closed-form updates
/// of the shared kernel weights.
pub fn train_mkl_with(kset: &KernelSet, cfg: &MklConfig) -> Result<MklModel, FusionError> {
    let classes = validate_mkl(kset, cfg)?;
    let m = kset.grams.len();
    let n = kset.len();
    let labels = &kset.labels;
    if m == 1 {
        let svm = train_kernel_svm(&kset.grams[0], labels, cfg.c, &SolverTol::default())?;
        let objective = svm.stats.iter().map(|s| s.primal).sum();
        return Ok(MklModel {
            beta: vec![1.0],
            p: cfg.p,
            svm,
            objective_history: vec![objective],
        });
    }
    let mut beta = vec![(m as f64).powf(-1.0 / cfg.p); m];
    let mut alphas = vec![vec![0.0; n]; classes];
    let online_tol = SolverTol::default();
    for t in 0..cfg.online_iters {
        let k = combined(kset, &beta);
        solve_ovr(&k, labels, classes, cfg.c, &mut alphas, &online_tol, cfg.seed ^ t as u64, true);
        let before = beta.clone();
        update_beta(&mut beta, &kernel_norms(kset, labels, classes, &alphas), cfg.p);
        if before.iter().zip(&beta).all(|(a, b)| (a - b).abs() < 1e-12) {
            break;
        }
    }
    let exact = SolverTol {
        kkt: 1e-9,
        gap: 1e-12,
        max_passes: 100_000,
    };
    let mut history: Vec<f64> = Vec::new();
    let mut stats;
    let mut t = 0;
    loop {
        let k = combined(kset, &beta);
        stats = solve_ovr(&k, labels, classes, cfg.c, &mut alphas, &exact, cfg.seed, false);
        let objective: f64 = stats.iter().map(|s| s.primal).sum();
        let converged = history
            .last()
            .is_some_and(|&prev| (prev - objective).abs() <= cfg.tol * objective.abs().max(1.0));
        history.push(objective);
        t += 1;
        if converged || t >= cfg.batch_iters {
            break;
        }
        update_beta(&mut beta, &kernel_norms(kset, labels, classes, &alphas), cfg.p);
    }
    Ok(MklModel {
        beta,
        p: cfg.p,
        svm: to_kernel_svm(labels, classes, cfg.c, &alphas, stats),
        objective_history: history,
    })
}

impl MklModel {
    /// Class scores from per-kernel `test × train` matrices.
    pub fn decision(&self, cross: &[Matrix]) -> Result<Matrix, FusionError> {
        if cross.len() != self.beta.len() {
            return Err(FusionError::DimMismatch {
                expected: self.beta.len(),
                found: cross.len(),
            });
        }
        let rows = cross[0].rows;
        let mut k = Matrix::zeros(rows, cross[0].cols);
        for (g, &b) in cross.iter().zip(&self.beta) {
            if g.rows != rows || g.cols != k.cols {
                return Err(FusionError::DimMismatch {
                    expected: k.cols,
                    found: g.cols,
                });
            }
            for (o, v) in k.data.iter_mut().zip(&g.data) {
                *o += b * v;
            }
        }
        Ok(self.svm.decision(&k))
    }

    pub fn predict(&self, cross: &[Matrix]) -> Result<Vec<usize>, FusionError> {
        let d = self.decision(cross)?;
        Ok((0..d.rows).map(|i| argmax(d.row(i))).collect())
    }

    pub fn to_named_arrays(&self) -> Vec<NamedArray> {
        let n = self.svm.coef.first().map_or(0, Vec::len);
        vec![
            NamedArray {
                name: "mkl.beta".into(),
                shape: vec![self.beta.len()],
                data: self.beta.iter().map(|&v| v as f32).collect(),
            },
            NamedArray {
                name: "mkl.coef".into(),
                shape: vec![self.svm.classes, n],
                data: self.svm.coef.iter().flatten().map(|&v| v as f32).collect(),
            },
            NamedArray {
                name: "mkl.bias".into(),
                shape: vec![self.svm.classes],
                data: self.svm.bias.iter().map(|&v| v as f32).collect(),
            },
            NamedArray {
                name: "mkl.meta".into(),
                shape: vec![2],
                data: vec![self.p as f32, self.svm.c as f32],
            },
        ]
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        let f = std::fs::File::create(path)?;
        Ok(write_named_arrays(std::io::BufWriter::new(f), &self.to_named_arrays())?)
    }
}

/// Stratified fold assignment: each class's samples are shuffled and dealt
/// round-robin, continuing where the previous class stopped.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, FusionError> {
    if k < 2 {
        return Err(FusionError::BadHyperparam(format!("k = {k} folds")));
    }
    if labels.len() < k {
        return Err(FusionError::TooFewSamples {
            needed: k,
            found: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng::rng_from(&[seed, class as u64, 0x666f6c64]));
        for i in idx {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub c: f64,
    /// MKL norm; `None` for single-kernel SVMs.
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub best: GridPoint,
    pub mean_accuracy: Vec<f64>,
}

/// Mean k-fold accuracy of `score(point, train_idx, val_idx)` for every grid
/// point. Ties go to the smallest C, then the smallest p.
pub fn cross_validate<F>(labels: &[usize], grid: &[GridPoint], k: usize, seed: u64, mut score: F) -> Result<CvResult, FusionError>
where
    F: FnMut(&GridPoint, &[usize], &[usize]) -> Result<f64, FusionError>,
{
    if grid.is_empty() {
        return Err(FusionError::BadHyperparam("empty grid".into()));
    }
    let folds = stratified_folds(labels, k, seed)?;
    let mut means = Vec::with_capacity(grid.len());
    for point in grid {
        let mut total = 0.0;
        for (f, val) in folds.iter().enumerate() {
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            total += score(point, &train, val)?;
        }
        means.push(total / k as f64);
    }
    let key = |i: usize| (grid[i].c, grid[i].p.unwrap_or(0.0));
    let mut best = 0;
    for i in 1..grid.len() {
        let better = means[i] > means[best] + 1e-12;
        let tie = (means[i] - means[best]).abs() <= 1e-12;
        if better || (tie && key(i).partial_cmp(&key(best)) == Some(std::cmp::Ordering::Less)) {
            best = i;
        }
    }
    Ok(CvResult {
        best: grid[best],
        mean_accuracy: means,
    })
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Chooses C for a single-kernel SVM by k-fold CV on `gram` (training rows only).
/// Folds whose training part holds a single class score zero.
pub fn select_c(gram: &Matrix, labels: &[usize], cs: &[f64], k: usize, seed: u64) -> Result<CvResult, FusionError> {
    let grid: Vec<GridPoint> = cs.iter().map(|&c| GridPoint { c, p: None }).collect();
    let tol = SolverTol::default();
    cross_validate(labels, &grid, k, seed, |pt, tr, va| {
        let ytr: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
        let yva: Vec<usize> = va.iter().map(|&i| labels[i]).collect();
        match train_kernel_svm(&gram.select(tr, tr), &ytr, pt.c, &tol) {
            Ok(m) => Ok(accuracy(&m.predict(&gram.select(va, tr)), &yva)),
            Err(FusionError::SingleClass) => Ok(0.0),
            Err(e) => Err(e),
        }
    })
}

/// Chooses (C, p) for MKL by k-fold CV on the training kernels.
pub fn select_mkl(kset: &KernelSet, grid: &[GridPoint], k: usize, base: &MklConfig) -> Result<CvResult, FusionError> {
    cross_validate(&kset.labels, grid, k, base.seed, |pt, tr, va| {
        let sub = kset.subset(tr);
        let cfg = MklConfig {
            c: pt.c,
            p: pt.p.unwrap_or(base.p),
            ..*base
        };
        let yva: Vec<usize> = va.iter().map(|&i| kset.labels[i]).collect();
        match train_mkl_with(&sub, &cfg) {
            Ok(m) => {
                let cross: Vec<Matrix> = kset.grams.iter().map(|g| g.select(va, tr)).collect();
                Ok(accuracy(&m.predict(&cross)?, &yva))
            }
            Err(FusionError::BadHyperparam(msg)) if msg.contains("single class") => Ok(0.0),
            Err(e) => Err(e),
        }
    })
}

const GRAM_MAGIC: &[u8; 4] = b"DFGM";

/// Square gram cache: magic, u64 `n`, then `n²` little-endian f64 values.
pub fn write_gram<W: Write>(mut w: W, g: &Matrix) -> Result<(), FusionError> {
    if g.rows != g.cols {
        return Err(FusionError::DimMismatch {
            expected: g.rows,
            found: g.cols,
        });
    }
    w.write_all(GRAM_MAGIC)?;
    w.write_all(&(g.rows as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(g.data.len() * 8);
    for v in &g.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_gram<R: Read>(mut r: R) -> Result<Matrix, FusionError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GRAM_MAGIC {
        return Err(FusionError::Format("bad gram magic".into()));
    }
    let mut nb = [0u8; 8];
    r.read_exact(&mut nb)?;
    let n = u64::from_le_bytes(nb) as usize;
    let len = n
        .checked_mul(n)
        .filter(|&l| l <= 1 << 28)
        .ok_or_else(|| FusionError::Format(format!("gram size {n}")))?;
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Matrix { rows: n, cols: n, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn orthonormal_features_give_identity() {
        let x = vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 0.5]];
        let g = linear_kernel(&x, &x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.at(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let (_, g) = FeatureKernel::fit(&x).unwrap();
        assert!((g.trace() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dim_mismatch() {
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![1.0, 0.0, 0.0]];
        assert!(matches!(linear_kernel(&a, &b), Err(FusionError::DimMismatch { .. })));
        let (fk, _) = FeatureKernel::fit(&a).unwrap();
        assert!(fk.cross(&b).is_err());
    }

    #[test]
    fn zero_vectors_trace_normalize() {
        // The middle row equals the training mean and centers to zero.
        let x = vec![vec![1.0, 1.0], vec![2.0, 1.0], vec![3.0, 1.0]];
        let (fk, g) = FeatureKernel::fit(&x).unwrap();
        assert!((g.trace() - 3.0).abs() < 1e-12);
        assert!((fk.scale - 1.5).abs() < 1e-12);
        assert_eq!(g.row(1), &[0.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn gram_symmetric_psd(seed in 0u64..1000, n in 2usize..12, d in 1usize..6) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut x: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut r, d)).collect();
            x[n - 1] = x[0].clone();
            let (_, g) = FeatureKernel::fit(&x).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((g.at(i, j) - g.at(j, i)).abs() < 1e-8);
                }
                prop_assert_eq!(g.at(0, i), g.at(n - 1, i));
            }
            // PSD: vᵀGv ≥ 0 for random directions.
            for _ in 0..20 {
                let v = gaussian(&mut r, n);
                let q: f64 = (0..n).map(|i| v[i] * (0..n).map(|j| g.at(i, j) * v[j]).sum::<f64>()).sum();
                prop_assert!(q >= -1e-6 * n as f64);
            }
        }
    }

    #[test]
    fn two_point_problem() {
        let x = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let m = train_linear_svm(&x, &[0, 1], 1.0).unwrap();
        // Class 0 is the positive side: w = (1, 0), b = 0.
        assert!((m.weights[0] - 1.0).abs() < 1e-6);
        assert!(m.weights[1].abs() < 1e-12);
        assert!(m.bias[0].abs() < 1e-9);
        assert_eq!(m.predict_all(&x).unwrap(), vec![0, 1]);
    }

    fn blobs(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let cx = if label == 0 { 3.0 } else { -3.0 };
            x.push(vec![cx + r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
            y.push(label);
        }
        (x, y)
    }

    #[test]
    fn separable_blobs() {
        let (x, y) = blobs(4, 50);
        let m = train_linear_svm(&x, &y, 1.0).unwrap();
        assert_eq!(m.predict_all(&x).unwrap(), y);
        for s in &m.stats {
            assert!(s.kkt < 1e-6);
            assert!(s.primal - s.dual <= 1e-4 * s.primal.max(1.0));
        }
    }

    #[test]
    fn svm_errors() {
        let (x, y) = blobs(1, 6);
        assert!(matches!(train_linear_svm(&x, &y, 0.0), Err(FusionError::BadC(_))));
        assert!(matches!(train_linear_svm(&x, &y, -1.0), Err(FusionError::BadC(_))));
        assert!(matches!(train_linear_svm(&x, &[1; 6], 1.0), Err(FusionError::SingleClass)));
    }

    #[test]
    fn argmax_ties_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    /// Projected gradient descent on the same box QP, step 1/L.
    pub(crate) fn brute_force_dual(q: &[Vec<f64>], c: f64) -> f64 {
        let n = q.len();
        let l: f64 = q.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let mut a = vec![0.0; n];
        for _ in 0..2_000_000 {
            let g: Vec<f64> = (0..n).map(|i| (0..n).map(|j| q[i][j] * a[j]).sum::<f64>() - 1.0).collect();
            let mut change: f64 = 0.0;
            for i in 0..n {
                let new = (a[i] - g[i] / l).clamp(0.0, c);
                change = change.max((new - a[i]).abs());
                a[i] = new;
            }
            if change < 1e-8 * 1e-3 {
                break;
            }
        }
        let quad: f64 = (0..n).map(|i| a[i] * (0..n).map(|j| q[i][j] * a[j]).sum::<f64>()).sum();
        a.iter().sum::<f64>() - 0.5 * quad
    }

    #[test]
    fn matches_brute_force_qp() {
        for seed in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<Vec<f64>> = (0..10).map(|_| gaussian(&mut r, 3)).collect();
            let y: Vec<usize> = (0..10).map(|i| if i < 5 { 0 } else { 1 }).collect();
            let m = train_linear_svm(&x, &y, 1.0).unwrap();
            let (_, g) = FeatureKernel::fit(&x).unwrap();
            let s: Vec<f64> = y.iter().map(|&l| if l == 0 { 1.0 } else { -1.0 }).collect();
            let q: Vec<Vec<f64>> = (0..10)
                .map(|i| (0..10).map(|j| s[i] * s[j] * (g.at(i, j) + 1.0)).collect())
                .collect();
            let oracle = brute_force_dual(&q, 1.0);
            let dual = m.stats[0].dual;
            assert!((dual - oracle).abs() <= 1e-4 * oracle.abs(), "{dual} vs {oracle}");
            assert!(m.stats[0].kkt < 1e-6);
        }
    }

    fn random_kset(seed: u64, n: usize, m: usize) -> (KernelSet, Vec<Vec<Vec<f64>>>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let feats: Vec<Vec<Vec<f64>>> = (0..m)
            .map(|_| {
                labels
                    .iter()
                    .map(|&l| {
                        let mut v = gaussian(&mut r, 4);
                        v[l] += 1.5;
                        v
                    })
                    .collect()
            })
            .collect();
        let grams = feats.iter().map(|f| FeatureKernel::fit(f).unwrap().1).collect();
        (KernelSet::new(grams, labels).unwrap(), feats)
    }

    #[test]
    fn single_kernel_mkl_equals_svm() {
        let (kset, feats) = random_kset(3, 30, 1);
        let mkl = train_mkl(&kset, 1.5, 0.7).unwrap();
        let svm = train_linear_svm(&feats[0], &kset.labels, 0.7).unwrap();
        assert_eq!(mkl.beta, vec![1.0]);
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let test: Vec<Vec<f64>> = (0..40).map(|_| gaussian(&mut r, 4)).collect();
        let (fk, _) = FeatureKernel::fit(&feats[0]).unwrap();
        let cross = fk.cross(&test).unwrap();
        assert_eq!(mkl.predict(&[cross]).unwrap(), svm.predict_all(&test).unwrap());
    }

    #[test]
    fn duplicate_kernels_get_equal_weights() {
        let (kset, _) = random_kset(5, 24, 1);
        let dup = KernelSet::new(vec![kset.grams[0].clone(), kset.grams[0].clone()], kset.labels.clone()).unwrap();
        let m = train_mkl(&dup, 2.0, 1.0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.beta[0] - h).abs() < 1e-6 && (m.beta[1] - h).abs() < 1e-6, "{:?}", m.beta);
    }

    #[test]
    fn informative_kernel_outweighs_noise() {
        let (kset, _) = random_kset(8, 45, 1);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let noise: Vec<Vec<f64>> = (0..45).map(|_| gaussian(&mut r, 4)).collect();
        let g_noise = FeatureKernel::fit(&noise).unwrap().1;
        let ks = KernelSet::new(vec![kset.grams[0].clone(), g_noise], kset.labels.clone()).unwrap();
        for p in [1.25, 2.0] {
            let m = train_mkl(&ks, p, 1.0).unwrap();
            assert!(m.beta[0] > m.beta[1], "{:?}", m.beta);
            assert!((p_norm(&m.beta, p) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mkl_objective_monotone() {
        for seed in 0..3 {
            let (ks, _) = random_kset(seed, 30, 3);
            let m = train_mkl_with(
                &ks,
                &MklConfig {
                    p: 1.5,
                    c: 2.0,
                    online_iters: 3,
                    tol: 0.0,
                    batch_iters: 25,
                    ..MklConfig::default()
                },
            )
            .unwrap();
            assert!(m.objective_history.len() > 1);
            for w in m.objective_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "{:?}", m.objective_history);
            }
            assert!(m.beta.iter().all(|&b| b >= 0.0));
        }
    }

    #[test]
    fn mkl_errors() {
        let (ks, _) = random_kset(1, 12, 2);
        assert!(matches!(train_mkl(&ks, 1.0, 1.0), Err(FusionError::BadHyperparam(_))));
        assert!(matches!(train_mkl(&ks, 2.5, 1.0), Err(FusionError::BadHyperparam(_))));
        assert!(matches!(train_mkl(&ks, 2.0, 0.0), Err(FusionError::BadHyperparam(_))));
    }

    #[test]
    fn folds_are_stratified_and_deterministic() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let f = stratified_folds(&labels, 5, 7).unwrap();
        assert_eq!(f, stratified_folds(&labels, 5, 7).unwrap());
        let mut all: Vec<usize> = f.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        for fold in &f {
            for c in 0..3 {
                assert_eq!(fold.iter().filter(|&&i| labels[i] == c).count(), 2);
            }
        }
        assert!(matches!(
            stratified_folds(&labels[..3], 5, 0),
            Err(FusionError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn cv_selection() {
        let (x, y) = blobs(2, 40);
        let (_, g) = FeatureKernel::fit(&x).unwrap();
        let one = select_c(&g, &y, &[3.0], 3, 1).unwrap();
        assert_eq!(one.best.c, 3.0);
        let cs = [0.01, 0.1, 1.0, 10.0, 100.0];
        let a = select_c(&g, &y, &cs, 5, 1).unwrap();
        let b = select_c(&g, &y, &cs, 5, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.mean_accuracy.iter().all(|&m| m == 1.0), "{:?}", a.mean_accuracy);
        assert_eq!(a.best.c, 0.01);
    }

    #[test]
    fn cv_tie_break_prefers_small_c_then_p() {
        let labels: Vec<usize> = (0..6).map(|i| i % 2).collect();
        let grid = [
            GridPoint { c: 1.0, p: Some(2.0) },
            GridPoint { c: 1.0, p: Some(1.5) },
            GridPoint { c: 10.0, p: Some(1.1) },
        ];
        let r = cross_validate(&labels, &grid, 2, 0, |_, _, _| Ok(0.5)).unwrap();
        assert_eq!(r.best, grid[1]);
    }

    #[test]
    fn model_and_gram_round_trip() {
        let (x, y) = blobs(3, 20);
        let m = train_linear_svm(&x, &y, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("svm.bin");
        m.save(&p).unwrap();
        let back = SvmModel::load(&p).unwrap();
        assert_eq!(back.predict_all(&x).unwrap(), m.predict_all(&x).unwrap());

        let (_, g) = FeatureKernel::fit(&x).unwrap();
        let mut buf = Vec::new();
        write_gram(&mut buf, &g).unwrap();
        assert_eq!(read_gram(&buf[..]).unwrap(), g);
        buf[0] = 0;
        assert!(read_gram(&buf[..]).is_err());
    }
}
