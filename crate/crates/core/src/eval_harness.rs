//! Accuracy reports, the layer × preprocessing ablation grid and the
//! single-modality vs. fused comparison.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convnet::{extract_batch, Net, NetError, Preproc, Scalar};
use crate::dataset_store::{SampleRecord, Split};
use crate::depth_render::{DepthImage, RenderError};
use crate::kernel_fusion::{
    select_c, select_mkl, train_kernel_svm, train_mkl_with, FeatureKernel, FusionError, GridPoint, KernelSet,
    MklConfig, SolverTol,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("class index {0} outside the class list")]
    LabelOutOfRange(usize),
    #[error("modalities not aligned: {first} vs {second} samples")]
    Alignment { first: usize, second: usize },
    #[error("train and test splits share sample {0}")]
    Leakage(usize),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// What produced a report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub layer: Option<String>,
    pub preprocessing: Option<String>,
    pub modalities: Vec<String>,
    pub seeds: Vec<u64>,
    pub split: u64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub class_names: Vec<String>,
    /// `None` for classes absent from the evaluated labels.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub support: Vec<usize>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub fingerprint: Fingerprint,
}

impl EvalReport {
    /// Mean over classes with non-zero support.
    pub fn mean_class_accuracy(&self) -> Option<f64> {
        let v: Vec<f64> = self.per_class_accuracy.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn evaluate(predictions: &[usize], labels: &[usize], class_names: &[String]) -> Result<EvalReport, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = class_names.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(EvalError::LabelOutOfRange(p.max(t)));
        }
        confusion[t][p] += 1;
    }
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let per_class_accuracy = (0..k)
        .map(|i| (support[i] > 0).then(|| confusion[i][i] as f64 / support[i] as f64))
        .collect();
    Ok(EvalReport {
        overall_accuracy: correct as f64 / labels.len() as f64,
        class_names: class_names.to_vec(),
        per_class_accuracy,
        support,
        confusion,
        fingerprint: Fingerprint::default(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Candidate SVM C values, chosen by CV on the training rows.
    pub c_grid: Vec<f64>,
    /// Candidate MKL norms.
    pub p_grid: Vec<f64>,
    pub cv_folds: usize,
    pub seed: u64,
    pub online_iters: usize,
    pub batch_iters: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            c_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            p_grid: vec![1.25, 1.5, 2.0],
            cv_folds: 3,
            seed: 0,
            online_iters: 100,
            batch_iters: 300,
        }
    }
}

fn check_split(split: &Split, n: usize) -> Result<(), EvalError> {
    let train: BTreeSet<usize> = split.train.iter().copied().collect();
    if let Some(&i) = split.test.iter().find(|i| train.contains(i)) {
        return Err(EvalError::Leakage(i));
    }
    if let Some(&i) = split.train.iter().chain(&split.test).find(|&&i| i >= n) {
        return Err(EvalError::Alignment { first: n, second: i + 1 });
    }
    if split.test.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Linear SVM with C chosen by CV on the training rows, scored on the test rows.
/// Returns the predictions and the chosen C.
pub fn svm_predict(
    features: &[Vec<f64>],
    labels: &[usize],
    split: &Split,
    cfg: &EvalConfig,
) -> Result<(Vec<usize>, f64), EvalError> {
    check_split(split, features.len())?;
    let train_x = pick(features, &split.train);
    let train_y = pick(labels, &split.train);
    let (fk, gram) = FeatureKernel::fit(&train_x)?;
    let folds = cfg.cv_folds.min(train_y.len());
    let c = select_c(&gram, &train_y, &cfg.c_grid, folds, cfg.seed)?.best.c;
    let svm = train_kernel_svm(&gram, &train_y, c, &SolverTol::default())?;
    let cross = fk.cross(&pick(features, &split.test))?;
    Ok((svm.predict(&cross), c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub layer: String,
    pub preprocessing: Preproc,
    pub c: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub split_fingerprint: u64,
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn cell(&self, layer: &str, preproc: Preproc) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.layer == layer && c.preprocessing == preproc)
    }
}

fn dedup_axis<T: PartialEq + Clone + std::fmt::Debug>(axis: &[T], what: &str) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for v in axis {
        if out.contains(v) {
            log::warn!("duplicate {what} {v:?} dropped from the ablation grid");
        } else {
            out.push(v.clone());
        }
    }
    out
}

/// For every (layer, preprocessing) cell: features from the net, a linear SVM
/// trained on the split's training rows, and a report on its test rows.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation<T: Scalar>(
    net: &Net<T>,
    images: &[DepthImage],
    labels: &[usize],
    class_names: &[String],
    split: &Split,
    layers: &[String],
    preprocs: &[Preproc],
    cfg: &EvalConfig,
) -> Result<AblationGrid, EvalError> {
    if images.len() != labels.len() {
        return Err(EvalError::Alignment {
            first: images.len(),
            second: labels.len(),
        });
    }
    check_split(split, images.len())?;
    let layers = dedup_axis(layers, "layer");
    let preprocs = dedup_axis(preprocs, "preprocessing");
    let test_labels = pick(labels, &split.test);
    let mut cells = Vec::new();
    for &pre in &preprocs {
        for layer in &layers {
            let feats: Vec<Vec<f64>> = extract_batch(net, images, layer, pre)?
                .into_iter()
                .map(|f| f.values.into_iter().map(f64::from).collect())
                .collect();
            let (pred, c) = svm_predict(&feats, labels, split, cfg)?;
            let mut report = evaluate(&pred, &test_labels, class_names)?;
            report.fingerprint = Fingerprint {
                layer: Some(layer.clone()),
                preprocessing: Some(pre.name().into()),
                modalities: vec!["depth".into()],
                seeds: vec![cfg.seed],
                split: split.fingerprint(),
                note: "single split".into(),
            };
            log::info!("ablation {layer}/{}: accuracy {:.4} (C = {c})", pre.name(), report.overall_accuracy);
            cells.push(AblationCell {
                layer: layer.clone(),
                preprocessing: pre,
                c,
                report,
            });
        }
    }
    let mut order = Vec::new();
    for layer in &layers {
        for &pre in &preprocs {
            order.push(cells.iter().position(|c| &c.layer == layer && c.preprocessing == pre).unwrap());
        }
    }
    Ok(AblationGrid {
        split_fingerprint: split.fingerprint(),
        cells: order.into_iter().map(|i| cells[i].clone()).collect(),
    })
}

/// [`run_ablation`] over manifest records; labels are positions in `class_names`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_manifest<T: Scalar>(
    net: &Net<T>,
    manifest: &[SampleRecord],
    class_names: &[String],
    split: &Split,
    layers: &[String],
    preprocs: &[Preproc],
    cfg: &EvalConfig,
) -> Result<AblationGrid, EvalError> {
    let labels = manifest
        .iter()
        .map(|r| {
            class_names
                .iter()
                .position(|c| c == &r.class_label)
                .ok_or_else(|| EvalError::Net(NetError::LabelUnknown(r.class_label.clone())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let images = manifest
        .par_iter()
        .map(|r| DepthImage::load(&r.path))
        .collect::<Result<Vec<_>, _>>()?;
    run_ablation(net, &images, &labels, class_names, split, layers, preprocs, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub first: EvalReport,
    pub second: EvalReport,
    pub fused: EvalReport,
    pub beta: Vec<f64>,
    pub mkl_c: f64,
    pub mkl_p: f64,
}

/// Single-modality SVMs and the MKL fusion of both, on the same split.
pub fn run_fusion_eval(
    first: &[Vec<f64>],
    second: &[Vec<f64>],
    labels: &[usize],
    class_names: &[String],
    split: &Split,
    cfg: &EvalConfig,
) -> Result<FusionReport, EvalError> {
    if first.len() != second.len() || first.len() != labels.len() {
        return Err(EvalError::Alignment {
            first: first.len(),
            second: second.len(),
        });
    }
    check_split(split, labels.len())?;
    let test_labels = pick(labels, &split.test);
    let finger = |modalities: &[&str]| Fingerprint {
        layer: None,
        preprocessing: None,
        modalities: modalities.iter().map(|s| s.to_string()).collect(),
        seeds: vec![cfg.seed],
        split: split.fingerprint(),
        note: "single split".into(),
    };
    let single = |x: &[Vec<f64>], name: &str| -> Result<EvalReport, EvalError> {
        let (pred, _) = svm_predict(x, labels, split, cfg)?;
        let mut r = evaluate(&pred, &test_labels, class_names)?;
        r.fingerprint = finger(&[name]);
        Ok(r)
    };
    let first_report = single(first, "first")?;
    let second_report = single(second, "second")?;

    let train_y = pick(labels, &split.train);
    let (k1, g1) = FeatureKernel::fit(&pick(first, &split.train))?;
    let (k2, g2) = FeatureKernel::fit(&pick(second, &split.train))?;
    let kset = KernelSet::new(vec![g1, g2], train_y)?;
    let base = MklConfig {
        online_iters: cfg.online_iters,
        batch_iters: cfg.batch_iters,
        seed: cfg.seed,
        ..MklConfig::default()
    };
    let grid: Vec<GridPoint> = cfg
        .c_grid
        .iter()
        .flat_map(|&c| cfg.p_grid.iter().map(move |&p| GridPoint { c, p: Some(p) }))
        .collect();
    let folds = cfg.cv_folds.min(kset.len());
    let best = select_mkl(&kset, &grid, folds, &base)?.best;
    let mkl_p = best.p.unwrap_or(base.p);
    let model = train_mkl_with(
        &kset,
        &MklConfig {
            c: best.c,
            p: mkl_p,
            ..base
        },
    )?;
    let cross = vec![
        k1.cross(&pick(first, &split.test))?,
        k2.cross(&pick(second, &split.test))?,
    ];
    let mut fused = evaluate(&model.predict(&cross)?, &test_labels, class_names)?;
    fused.fingerprint = finger(&["first", "second"]);
    Ok(FusionReport {
        first: first_report,
        second: second_report,
        fused,
        beta: model.beta,
        mkl_c: best.c,
        mkl_p,
    })
}

/// One row per report: `layer,preprocessing,modality,accuracy`.
pub fn write_reports_csv<W: Write>(reports: &[&EvalReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "layer,preprocessing,modality,accuracy")?;
    for r in reports {
        let f = &r.fingerprint;
        writeln!(
            w,
            "{},{},{},{:.6}",
            f.layer.as_deref().unwrap_or(""),
            f.preprocessing.as_deref().unwrap_or(""),
            f.modalities.join("+"),
            r.overall_accuracy
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn all_correct() {
        let y = [0, 1, 2, 1, 0];
        let r = evaluate(&y, &y, &names(3)).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(r.confusion[i][j] > 0, i == j);
            }
        }
    }

    #[test]
    fn constant_prediction_on_balanced_data() {
        let y = [0, 1, 0, 1];
        let r = evaluate(&[0; 4], &y, &names(2)).unwrap();
        assert_eq!(r.overall_accuracy, 0.5);
        assert_eq!(r.per_class_accuracy, vec![Some(1.0), Some(0.0)]);
    }

    #[test]
    fn absent_class_is_null() {
        let r = evaluate(&[0, 1], &[0, 1], &names(3)).unwrap();
        assert_eq!(r.per_class_accuracy[2], None);
        assert_eq!(r.support[2], 0);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("null"));
    }

    #[test]
    fn errors() {
        assert!(matches!(evaluate(&[0], &[0, 1], &names(2)), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(evaluate(&[], &[], &names(2)), Err(EvalError::Empty)));
        assert!(matches!(evaluate(&[5], &[0], &names(2)), Err(EvalError::LabelOutOfRange(5))));
    }

    #[test]
    fn report_invariants_random() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = r.random_range(1..60);
            let k = 4;
            let y: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let p: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let rep = evaluate(&p, &y, &names(k)).unwrap();
            let total: usize = rep.confusion.iter().flatten().sum();
            let trace: usize = (0..k).map(|i| rep.confusion[i][i]).sum();
            assert_eq!(total, n);
            assert!((rep.overall_accuracy - trace as f64 / total as f64).abs() < 1e-15);
            for c in 0..k {
                assert_eq!(rep.support[c], y.iter().filter(|&&v| v == c).count());
            }
        }
        // Balanced data: per-class mean equals overall accuracy.
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let p: Vec<usize> = (0..30).map(|i| (i * 7 / 5) % 3).collect();
        let rep = evaluate(&p, &y, &names(3)).unwrap();
        assert!((rep.mean_class_accuracy().unwrap() - rep.overall_accuracy).abs() < 1e-12);
    }

    fn split(n: usize) -> Split {
        Split {
            train: (0..n).filter(|i| i % 5 != 0).collect(),
            test: (0..n).filter(|i| i % 5 == 0).collect(),
        }
    }

    /// Each class is a 4-bit code; `first` sees the low two bits, `second`
    /// the high two, both with noise.
    fn complementary(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = i % 4;
            let mut fa = vec![0.0; 6];
            let mut fb = vec![0.0; 6];
            fa[label & 1] += 2.0;
            fb[(label >> 1) & 1] += 2.0;
            fa[2] = 1.0;
            fb[2] = 1.0;
            for v in fa.iter_mut().chain(fb.iter_mut()) {
                *v += r.random_range(-0.6..0.6);
            }
            a.push(fa);
            b.push(fb);
            y.push(label);
        }
        (a, b, y)
    }

    fn small_cfg() -> EvalConfig {
        EvalConfig {
            c_grid: vec![0.1, 1.0, 10.0],
            p_grid: vec![1.5, 2.0],
            online_iters: 10,
            batch_iters: 50,
            ..EvalConfig::default()
        }
    }

    #[test]
    fn fusion_beats_single_on_complementary_modalities() {
        let (a, b, y) = complementary(1, 160);
        let r = run_fusion_eval(&a, &b, &y, &names(4), &split(160), &small_cfg()).unwrap();
        assert!(r.first.overall_accuracy < 0.8);
        assert!(r.fused.overall_accuracy > r.first.overall_accuracy.max(r.second.overall_accuracy));
        assert_eq!(r.fused.fingerprint.split, split(160).fingerprint());
    }

    #[test]
    fn fusion_with_duplicate_modality_matches_single() {
        let (a, _, y) = complementary(2, 1000);
        let cfg = EvalConfig {
            c_grid: vec![1.0],
            p_grid: vec![2.0],
            ..small_cfg()
        };
        let r = run_fusion_eval(&a, &a, &y, &names(4), &split(1000), &cfg).unwrap();
        assert!((r.fused.overall_accuracy - r.first.overall_accuracy).abs() <= 0.01);
        assert!((r.beta[0] - r.beta[1]).abs() < 1e-9);
    }

    #[test]
    fn fusion_errors() {
        let (a, b, y) = complementary(3, 40);
        let empty = Split {
            train: (0..40).collect(),
            test: vec![],
        };
        assert!(matches!(run_fusion_eval(&a, &b, &y, &names(4), &empty, &small_cfg()), Err(EvalError::Empty)));
        assert!(matches!(
            run_fusion_eval(&a, &b[..39], &y, &names(4), &split(40), &small_cfg()),
            Err(EvalError::Alignment { .. })
        ));
        let leaky = Split {
            train: vec![0, 1, 2],
            test: vec![2],
        };
        assert!(matches!(svm_predict(&a, &y, &leaky, &small_cfg()), Err(EvalError::Leakage(2))));
    }

    fn tiny_net() -> Net<f32> {
        use crate::convnet::{LayerDef, LayerKind, NetSpec};
        let l = |name: &str, kind| LayerDef { name: name.into(), kind };
        let spec = NetSpec {
            input: [1, 16, 16],
            layers: vec![
                l("conv1", LayerKind::Conv { out_channels: 4, kernel: 3, stride: 1, pad: 1 }),
                l("relu1", LayerKind::Relu),
                l("pool_last", LayerKind::MaxPool { size: 2, stride: 2 }),
                l("fc6", LayerKind::Fc { out: 8 }),
                l("fc7", LayerKind::Fc { out: 2 }),
                l("loss", LayerKind::SoftmaxLoss),
            ],
            taps: vec!["pool_last".into(), "fc6".into(), "fc7".into()],
        };
        Net::build(&spec, 1).unwrap()
    }

    fn bar_images(n: usize) -> (Vec<DepthImage>, Vec<usize>) {
        let mut imgs = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let mut img = DepthImage::filled(16, 16, 255);
            let off = (i / 2) % 3;
            for t in 2..14 {
                let (x, yy) = if label == 0 { (t, 4 + off) } else { (4 + off, t) };
                img.set(x, yy, 60 + (i % 7) as u8 * 10);
            }
            imgs.push(img);
            y.push(label);
        }
        (imgs, y)
    }

    #[test]
    fn ablation_grid_shape_and_dedup() {
        let net = tiny_net();
        let (imgs, y) = bar_images(40);
        let layers: Vec<String> = ["pool_last", "fc6", "fc7", "fc6"].iter().map(|s| s.to_string()).collect();
        let sp = split(40);
        let grid = run_ablation(&net, &imgs, &y, &names(2), &sp, &layers, &[Preproc::Raw, Preproc::MinMax], &small_cfg()).unwrap();
        assert_eq!(grid.cells.len(), 6);
        assert!(grid.cells.iter().all(|c| c.report.fingerprint.split == sp.fingerprint()));
        assert!(grid.cell("pool_last", Preproc::Raw).unwrap().report.overall_accuracy >= 0.9);
        let again = run_ablation(&net, &imgs, &y, &names(2), &sp, &layers, &[Preproc::Raw, Preproc::MinMax], &small_cfg()).unwrap();
        assert_eq!(grid, again);
        let bad = ["fc9".to_string()];
        assert!(matches!(
            run_ablation(&net, &imgs, &y, &names(2), &sp, &bad, &[Preproc::Raw], &small_cfg()),
            Err(EvalError::Net(NetError::UnknownLayer(_)))
        ));
    }

    #[test]
    fn csv_rows() {
        let mut r = evaluate(&[0, 1], &[0, 0], &names(2)).unwrap();
        r.fingerprint.layer = Some("fc6".into());
        r.fingerprint.preprocessing = Some("raw".into());
        r.fingerprint.modalities = vec!["depth".into()];
        let mut out = Vec::new();
        write_reports_csv(&[&r], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "layer,preprocessing,modality,accuracy\nfc6,raw,depth,0.500000\n");
    }
}
