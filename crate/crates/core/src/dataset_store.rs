//! Sample manifests (JSON lines), per-image min-max normalization, split
//! protocols and ingestion of `<class>/<instance>/<frame>_depth.png` trees.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth_render::{CameraConfig, DepthImage};
use crate::rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid record: {0}")]
    Validation(String),
    #[error("class `{0}` has a single instance; cannot hold one out")]
    SingleInstanceClass(String),
    #[error("split file line {line}: expected `class,model_id`")]
    SplitFile { line: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |e| DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Depth,
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub class_label: String,
    pub model_id: String,
    pub frame_index: u32,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<CameraConfig>,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.class_label.is_empty() {
            return Err(DatasetError::Validation("empty class_label".into()));
        }
        if self.model_id.is_empty() {
            return Err(DatasetError::Validation("empty model_id".into()));
        }
        if !self.path.is_file() {
            return Err(DatasetError::Validation(format!(
                "{} does not exist",
                self.path.display()
            )));
        }
        Ok(())
    }
}

/// Append-only manifest writer; one JSON object per line.
pub struct ManifestWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl ManifestWriter {
    pub fn create(path: &Path) -> Result<Self, DatasetError> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(ManifestWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn open_append(path: &Path) -> Result<Self, DatasetError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(ManifestWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, record: &SampleRecord) -> Result<(), DatasetError> {
        append_manifest(record, self)
    }

    pub fn flush(&mut self) -> Result<(), DatasetError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

impl Drop for ManifestWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn append_manifest(record: &SampleRecord, manifest: &mut ManifestWriter) -> Result<(), DatasetError> {
    record.validate()?;
    let line = serde_json::to_string(record).map_err(|e| DatasetError::Validation(e.to_string()))?;
    writeln!(manifest.out, "{line}").map_err(io_err(&manifest.path))
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<(), DatasetError> {
    let mut w = ManifestWriter::create(path)?;
    for r in records {
        w.append(r)?;
    }
    w.flush()
}

/// Reads every row; blank lines are skipped, the first malformed row aborts
/// with its 1-based line number.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Linear map of `[min, max]` onto `[0, 255]`, rounding half up. Constant
/// images map to 0.
pub fn minmax_normalize(img: &DepthImage) -> DepthImage {
    let lo = img.gray.iter().copied().min().unwrap_or(0);
    let hi = img.gray.iter().copied().max().unwrap_or(0);
    if lo == hi {
        return DepthImage::filled(img.width, img.height, 0);
    }
    let span = (hi - lo) as u32;
    let gray = img
        .gray
        .iter()
        // floor((g - lo) * 255 / span + 1/2) in integer arithmetic.
        .map(|&g| (((g - lo) as u32 * 510 + span) / (2 * span)) as u8)
        .collect();
    DepthImage::new(img.width, img.height, gray)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitProtocol {
    /// One instance per class (seeded choice) held out for testing.
    LeaveInstanceOut,
    /// Leave-instance-out, then only every `stride`-th frame of the test pool.
    FrameSubsample,
    /// Test instances given verbatim (typically read from a split file).
    FixedList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub protocol: SplitProtocol,
    /// Explicit held-out `(class, model_id)` pairs; used by `FixedList` and,
    /// when non-empty for a class, overrides the seeded choice.
    #[serde(default)]
    pub test_instances: Vec<(String, String)>,
    pub subsample_stride: u32,
    pub seed: u64,
}

impl SplitSpec {
    pub fn leave_instance_out(seed: u64) -> Self {
        SplitSpec {
            protocol: SplitProtocol::LeaveInstanceOut,
            test_instances: Vec::new(),
            subsample_stride: 5,
            seed,
        }
    }
}

/// Index sets into a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn records(&self, manifest: &[SampleRecord]) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
        let pick = |idx: &[usize]| idx.iter().map(|&i| manifest[i].clone()).collect();
        (pick(&self.train), pick(&self.test))
    }

    /// Stable identifier of the split contents.
    pub fn fingerprint(&self) -> u64 {
        let mut parts = vec![self.train.len() as u64];
        parts.extend(self.train.iter().map(|&i| i as u64));
        parts.push(u64::MAX);
        parts.extend(self.test.iter().map(|&i| i as u64));
        rng::derive_seed(&parts)
    }
}

pub fn make_splits(manifest: &[SampleRecord], spec: &SplitSpec) -> Result<Split, DatasetError> {
    let mut instances: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in manifest {
        instances
            .entry(r.class_label.as_str())
            .or_default()
            .insert(r.model_id.as_str());
    }
    let mut held_out: BTreeSet<(&str, &str)> = BTreeSet::new();
    for (class, models) in &instances {
        let fixed: Vec<&str> = spec
            .test_instances
            .iter()
            .filter(|(c, _)| c == class)
            .map(|(_, m)| m.as_str())
            .collect();
        if spec.protocol == SplitProtocol::FixedList || !fixed.is_empty() {
            held_out.extend(fixed.into_iter().map(|m| (*class, m)));
            continue;
        }
        if models.len() < 2 {
            return Err(DatasetError::SingleInstanceClass(class.to_string()));
        }
        let mut r = rng::rng_from(&[spec.seed, rng::hash_str(class)]);
        let pick = r.random_range(0..models.len());
        held_out.insert((class, models.iter().nth(pick).copied().unwrap()));
    }
    let stride = spec.subsample_stride.max(1);
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (i, r) in manifest.iter().enumerate() {
        if held_out.contains(&(r.class_label.as_str(), r.model_id.as_str())) {
            if spec.protocol != SplitProtocol::FrameSubsample || r.frame_index % stride == 0 {
                split.test.push(i);
            }
        } else {
            split.train.push(i);
        }
    }
    Ok(split)
}

/// Reads `class,model_id` lines; `#` comments and blank lines are ignored.
pub fn read_split_file(path: &Path) -> Result<Vec<(String, String)>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (c, m) = line
            .split_once(',')
            .ok_or(DatasetError::SplitFile { line: i + 1 })?;
        let (c, m) = (c.trim(), m.trim());
        if c.is_empty() || m.is_empty() {
            return Err(DatasetError::SplitFile { line: i + 1 });
        }
        pairs.push((c.to_string(), m.to_string()));
    }
    Ok(pairs)
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Scans `<root>/<class>/<instance>/<frame>_depth.png` (and `_rgb.png`).
/// The frame index is the leading integer of the file name.
pub fn ingest_directory(root: &Path) -> Result<Vec<SampleRecord>, DatasetError> {
    let mut records = Vec::new();
    for class_dir in sorted_dirs(root)?.into_iter().filter(|p| p.is_dir()) {
        let class = class_dir.file_name().unwrap().to_string_lossy().to_string();
        for inst_dir in sorted_dirs(&class_dir)?.into_iter().filter(|p| p.is_dir()) {
            let model_id = inst_dir.file_name().unwrap().to_string_lossy().to_string();
            for file in sorted_dirs(&inst_dir)? {
                let name = file.file_name().unwrap().to_string_lossy().to_string();
                let (stem, modality) = if let Some(s) = name.strip_suffix("_depth.png") {
                    (s.to_string(), Modality::Depth)
                } else if let Some(s) = name.strip_suffix("_rgb.png") {
                    (s.to_string(), Modality::Rgb)
                } else {
                    continue;
                };
                let digits: String = stem.chars().take_while(|c| c.is_ascii_digit()).collect();
                let Ok(frame_index) = digits.parse() else {
                    continue;
                };
                records.push(SampleRecord {
                    path: file,
                    class_label: class.clone(),
                    model_id: model_id.clone(),
                    frame_index,
                    modality,
                    config: None,
                });
            }
        }
    }
    records.sort_by(|a, b| {
        (&a.class_label, &a.model_id, a.frame_index, &a.path)
            .cmp(&(&b.class_label, &b.model_id, b.frame_index, &b.path))
    });
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn touch(dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        DepthImage::filled(4, 4, 9).save_png(&p).unwrap();
        p
    }

    fn record(path: PathBuf, class: &str, model: &str, frame: u32) -> SampleRecord {
        SampleRecord {
            path,
            class_label: class.into(),
            model_id: model.into(),
            frame_index: frame,
            modality: Modality::Depth,
            config: None,
        }
    }

    fn synthetic_manifest(classes: usize, instances: usize, frames: u32) -> Vec<SampleRecord> {
        let mut out = Vec::new();
        for c in 0..classes {
            for i in 0..instances {
                for f in 0..frames {
                    out.push(record(
                        PathBuf::from(format!("c{c}/m{i}/{f}.png")),
                        &format!("c{c}"),
                        &format!("c{c}_m{i}"),
                        f,
                    ));
                }
            }
        }
        out
    }

    #[test]
    fn manifest_round_trip_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = touch(dir.path(), "a.png");
        let mut recs: Vec<SampleRecord> = (0..3).map(|i| record(p.clone(), "mug", "mug_1", i)).collect();
        recs[1].config = Some(CameraConfig {
            distance: 2.0,
            fov_deg: 40.0,
            sphere_dir: [0.0, 0.0, 1.0],
            morph: Default::default(),
        });
        let m = dir.path().join("manifest.jsonl");
        write_manifest(&m, &recs).unwrap();
        let text = std::fs::read_to_string(&m).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(load_manifest(&m).unwrap(), recs);

        let mut w = ManifestWriter::open_append(&m).unwrap();
        w.append(&recs[0]).unwrap();
        w.flush().unwrap();
        assert_eq!(load_manifest(&m).unwrap().len(), 4);
    }

    #[test]
    fn append_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = touch(dir.path(), "a.png");
        let mut w = ManifestWriter::create(&dir.path().join("m.jsonl")).unwrap();
        assert!(matches!(
            w.append(&record(p.clone(), "", "m", 0)),
            Err(DatasetError::Validation(_))
        ));
        assert!(matches!(
            w.append(&record(dir.path().join("missing.png"), "c", "m", 0)),
            Err(DatasetError::Validation(_))
        ));
    }

    #[test]
    fn load_reports_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        assert!(load_manifest(&m).is_err());
        std::fs::write(&m, "").unwrap();
        assert!(load_manifest(&m).unwrap().is_empty());
        let good = serde_json::to_string(&record("x.png".into(), "c", "m", 0)).unwrap();
        let mut lines = vec![good; 10];
        lines[6] = "{not json".into();
        std::fs::write(&m, lines.join("\n")).unwrap();
        match load_manifest(&m) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn minmax_examples() {
        let img = DepthImage::new(3, 1, vec![10, 105, 200]);
        let out = minmax_normalize(&img);
        assert_eq!(out.gray[0], 0);
        assert_eq!(out.gray[2], 255);
        // (95 / 190) * 255 = 127.5 rounds up.
        assert_eq!(out.gray[1], 128);
        let full = DepthImage::new(3, 1, vec![0, 77, 255]);
        assert_eq!(minmax_normalize(&full), full);
        assert!(minmax_normalize(&DepthImage::filled(5, 5, 77)).gray.iter().all(|&g| g == 0));
    }

    #[test]
    fn leave_instance_out() {
        let manifest = synthetic_manifest(4, 3, 10);
        let split = make_splits(&manifest, &SplitSpec::leave_instance_out(1)).unwrap();
        let (train, test) = split.records(&manifest);
        assert_eq!(train.len() + test.len(), manifest.len());
        for c in 0..4 {
            let class = format!("c{c}");
            let held: BTreeSet<&str> = test
                .iter()
                .filter(|r| r.class_label == class)
                .map(|r| r.model_id.as_str())
                .collect();
            assert_eq!(held.len(), 1);
            assert!(train.iter().all(|r| !held.contains(r.model_id.as_str())));
        }
        assert_eq!(split, make_splits(&manifest, &SplitSpec::leave_instance_out(1)).unwrap());
    }

    #[test]
    fn frame_subsample_keeps_one_in_five() {
        let manifest = synthetic_manifest(1, 2, 100);
        let spec = SplitSpec {
            protocol: SplitProtocol::FrameSubsample,
            ..SplitSpec::leave_instance_out(3)
        };
        let split = make_splits(&manifest, &spec).unwrap();
        assert_eq!(split.test.len(), 20);
        assert_eq!(split.train.len(), 100);
    }

    #[test]
    fn fixed_list_and_split_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("split.txt");
        std::fs::write(&f, "# held out\nc0,c0_m2\nc1, c1_m0\n\n").unwrap();
        let pairs = read_split_file(&f).unwrap();
        assert_eq!(pairs[1], ("c1".to_string(), "c1_m0".to_string()));
        let manifest = synthetic_manifest(2, 3, 4);
        let spec = SplitSpec {
            protocol: SplitProtocol::FixedList,
            test_instances: pairs,
            subsample_stride: 1,
            seed: 0,
        };
        let split = make_splits(&manifest, &spec).unwrap();
        let (_, test) = split.records(&manifest);
        assert_eq!(test.len(), 8);
        assert!(test.iter().all(|r| r.model_id == "c0_m2" || r.model_id == "c1_m0"));

        std::fs::write(&f, "c0 c0_m2\n").unwrap();
        assert!(matches!(read_split_file(&f), Err(DatasetError::SplitFile { line: 1 })));
    }

    #[test]
    fn single_instance_class_rejected() {
        let manifest = synthetic_manifest(2, 1, 3);
        assert!(matches!(
            make_splits(&manifest, &SplitSpec::leave_instance_out(0)),
            Err(DatasetError::SingleInstanceClass(_))
        ));
    }

    #[test]
    fn ingests_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        for (c, i) in [("apple", "apple_1"), ("apple", "apple_2"), ("bowl", "bowl_1")] {
            let d = dir.path().join(c).join(i);
            std::fs::create_dir_all(&d).unwrap();
            for f in [10, 2] {
                touch(&d, &format!("{f}_depth.png"));
            }
            touch(&d, "2_rgb.png");
            std::fs::write(d.join("notes.txt"), "x").unwrap();
        }
        let recs = ingest_directory(dir.path()).unwrap();
        assert_eq!(recs.len(), 9);
        assert_eq!(recs[0].class_label, "apple");
        assert_eq!(recs[0].frame_index, 2);
        assert_eq!(recs.iter().filter(|r| r.modality == Modality::Rgb).count(), 3);
        assert!(recs.iter().all(|r| r.validate().is_ok()));
    }

    proptest! {
        #[test]
        fn minmax_is_idempotent(v in prop::collection::vec(any::<u8>(), 1..200)) {
            let img = DepthImage::new(v.len(), 1, v);
            let once = minmax_normalize(&img);
            prop_assert_eq!(minmax_normalize(&once), once);
        }

        #[test]
        fn splits_are_disjoint_and_cover(classes in 1usize..5, inst in 2usize..5, frames in 1u32..12, seed in any::<u64>()) {
            let manifest = synthetic_manifest(classes, inst, frames);
            let split = make_splits(&manifest, &SplitSpec::leave_instance_out(seed)).unwrap();
            let train: BTreeSet<usize> = split.train.iter().copied().collect();
            prop_assert!(split.test.iter().all(|i| !train.contains(i)));
            prop_assert_eq!(split.train.len() + split.test.len(), manifest.len());
        }
    }
}
