//! Manifest-backed datasets, synthetic corpora and cleaned split emission.
//!
//! Manifests are CSV files with a fixed column order:
//!
//! ```text
//! # classes=normal,anomaly
//! sample_id,split,group_id,frame_index,given_label,true_label,feature_0,...,feature_{d-1}
//! ```
//!
//! Image corpora replace the feature columns with a single `image_path`
//! column; their features come from [`embed_image`]. Lines starting with `#`
//! are comments. A `# classes=` comment names the classes; without it the
//! class count is inferred from the largest label.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::CleaningPlan;
use crate::util::round_sig9;

const FIXED_COLUMNS: [&str; 6] = [
    "sample_id",
    "split",
    "group_id",
    "frame_index",
    "given_label",
    "true_label",
];

/// Frames per synthetic group ("video").
pub const SYNTHETIC_GROUP_SIZE: usize = 20;
/// Frame index step between consecutive synthetic samples of one group.
pub const SYNTHETIC_FRAME_STRIDE: u64 = 25;
/// Side of the grayscale grid the image embedding stub pools into.
pub const EMBED_GRID: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected dev|test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub split: Split,
    pub group_id: String,
    pub frame_index: u64,
    pub given_label: usize,
    pub true_label: Option<usize>,
    /// Input features. For image corpora these are produced by [`embed_image`].
    pub features: Vec<f64>,
    pub image_path: Option<PathBuf>,
}

/// An immutable, validated collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SampleRecord>,
    num_classes: usize,
    class_names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Builds a dataset and checks every invariant: labels in range, unique
    /// ids, consistent feature dimension, and no group shared by dev and test.
    pub fn new(
        records: Vec<SampleRecord>,
        num_classes: usize,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Integrity(format!(
                "at least 2 classes required, got {num_classes}"
            )));
        }
        if class_names.len() != num_classes {
            return Err(Error::Integrity(format!(
                "{} class names for {num_classes} classes",
                class_names.len()
            )));
        }
        let mut index = HashMap::with_capacity(records.len());
        let mut group_splits: HashMap<&str, Split> = HashMap::new();
        let dim = records.first().map(|r| r.features.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.sample_id.clone(), i).is_some() {
                return Err(Error::Integrity(format!(
                    "duplicate sample_id `{}`",
                    r.sample_id
                )));
            }
            if r.given_label >= num_classes {
                return Err(Error::Integrity(format!(
                    "sample `{}` has given_label {} >= {num_classes}",
                    r.sample_id, r.given_label
                )));
            }
            if let Some(t) = r.true_label {
                if t >= num_classes {
                    return Err(Error::Integrity(format!(
                        "sample `{}` has true_label {t} >= {num_classes}",
                        r.sample_id
                    )));
                }
            }
            if r.features.is_empty() && r.image_path.is_none() {
                return Err(Error::Integrity(format!(
                    "sample `{}` has neither features nor an image",
                    r.sample_id
                )));
            }
            if Some(r.features.len()) != dim {
                return Err(Error::Integrity(format!(
                    "sample `{}` has {} features, expected {}",
                    r.sample_id,
                    r.features.len(),
                    dim.unwrap_or(0)
                )));
            }
            match group_splits.get(r.group_id.as_str()) {
                Some(&s) if s != r.split => {
                    return Err(Error::Integrity(format!(
                        "group `{}` appears in both dev and test",
                        r.group_id
                    )));
                }
                Some(_) => {}
                None => {
                    group_splits.insert(&r.group_id, r.split);
                }
            }
        }
        Ok(Self {
            records,
            num_classes,
            class_names,
            index,
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<SampleRecord> {
        self.records
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.features.len())
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.index.get(sample_id).map(|&i| &self.records[i])
    }

    pub fn position(&self, sample_id: &str) -> Option<usize> {
        self.index.get(sample_id).copied()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Dataset restricted to one split, preserving order.
    pub fn subset(&self, split: Split) -> Dataset {
        let records = self.split(split).cloned().collect();
        Dataset::new(records, self.num_classes, self.class_names.clone())
            .expect("subset of a valid dataset is valid")
    }

    /// Given-label histogram, optionally restricted to one split.
    pub fn class_histogram(&self, split: Option<Split>) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for r in &self.records {
            if split.is_none_or(|s| s == r.split) {
                hist[r.given_label] += 1;
            }
        }
        hist
    }

    /// Copy with some given labels replaced. Unknown ids are an integrity error.
    pub fn with_labels(&self, relabels: &BTreeMap<String, usize>) -> Result<Dataset> {
        let mut records = self.records.clone();
        for (id, &label) in relabels {
            let pos = self
                .position(id)
                .ok_or_else(|| Error::Integrity(format!("unknown sample_id `{id}`")))?;
            records[pos].given_label = label;
        }
        Dataset::new(records, self.num_classes, self.class_names.clone())
    }

    /// Copy without the listed samples. Unknown ids are an integrity error.
    pub fn without(&self, removed: &HashSet<&str>) -> Result<Dataset> {
        for id in removed {
            if self.position(id).is_none() {
                return Err(Error::Integrity(format!("unknown sample_id `{id}`")));
            }
        }
        let records = self
            .records
            .iter()
            .filter(|r| !removed.contains(r.sample_id.as_str()))
            .cloned()
            .collect();
        Dataset::new(records, self.num_classes, self.class_names.clone())
    }
}

/// Default class names: `normal,anomaly` for binary corpora.
pub fn default_class_names(num_classes: usize) -> Vec<String> {
    if num_classes == 2 {
        vec!["normal".into(), "anomaly".into()]
    } else {
        (0..num_classes).map(|c| format!("class_{c}")).collect()
    }
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        reason: reason.into(),
    }
}

/// Reads a manifest, preserving row order and validating dataset invariants.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut class_names: Option<Vec<String>> = None;
    for line in text.lines() {
        let Some(comment) = line.strip_prefix('#') else {
            break;
        };
        if let Some(names) = comment.trim().strip_prefix("classes=") {
            class_names = Some(names.split(',').map(|s| s.trim().to_owned()).collect());
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let header_line = text
        .lines()
        .position(|l| !l.starts_with('#'))
        .map_or(1, |p| p + 1);
    if header.len() < FIXED_COLUMNS.len() + 1
        || header.iter().zip(FIXED_COLUMNS).any(|(h, e)| h != e)
    {
        return Err(parse_err(
            path,
            header_line,
            format!(
                "header must start with `{}` followed by feature_0.. or image_path",
                FIXED_COLUMNS.join(",")
            ),
        ));
    }
    let tail: Vec<&str> = header.iter().skip(FIXED_COLUMNS.len()).collect();
    let image_mode = tail == ["image_path"];
    if !image_mode {
        for (i, h) in tail.iter().enumerate() {
            if *h != format!("feature_{i}") {
                return Err(parse_err(
                    path,
                    header_line,
                    format!("expected column `feature_{i}`, found `{h}`"),
                ));
            }
        }
    }
    let base_dir = path.parent().unwrap_or(Path::new("."));

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), row.len()),
            ));
        }
        let field = |i: usize| row.get(i).unwrap_or("");
        let split = field(1).parse::<Split>().map_err(|e| parse_err(path, line, e))?;
        let frame_index = field(3)
            .parse::<u64>()
            .map_err(|e| parse_err(path, line, format!("frame_index: {e}")))?;
        let given_label = field(4)
            .parse::<usize>()
            .map_err(|e| parse_err(path, line, format!("given_label: {e}")))?;
        let true_label = match field(5) {
            "" => None,
            s => Some(
                s.parse::<usize>()
                    .map_err(|e| parse_err(path, line, format!("true_label: {e}")))?,
            ),
        };
        let (features, image_path) = if image_mode {
            let rel = PathBuf::from(field(6));
            let full = if rel.is_absolute() {
                rel.clone()
            } else {
                base_dir.join(&rel)
            };
            let features = embed_image(&full)
                .map_err(|e| parse_err(path, line, format!("image_path: {e}")))?;
            (features, Some(rel))
        } else {
            let mut features = Vec::with_capacity(tail.len());
            for (i, s) in row.iter().skip(FIXED_COLUMNS.len()).enumerate() {
                let v = s
                    .parse::<f64>()
                    .map_err(|e| parse_err(path, line, format!("feature_{i}: {e}")))?;
                if !v.is_finite() {
                    return Err(parse_err(path, line, format!("feature_{i} is not finite")));
                }
                features.push(v);
            }
            (features, None)
        };
        records.push(SampleRecord {
            sample_id: field(0).to_owned(),
            split,
            group_id: field(2).to_owned(),
            frame_index,
            given_label,
            true_label,
            features,
            image_path,
        });
    }

    let class_names = match class_names {
        Some(names) => names,
        None => {
            let max_label = records
                .iter()
                .flat_map(|r| std::iter::once(r.given_label).chain(r.true_label))
                .max()
                .unwrap_or(0);
            default_class_names((max_label + 1).max(2))
        }
    };
    Dataset::new(records, class_names.len(), class_names)
}

/// Serializes a dataset as a manifest. `comments` are emitted as extra
/// `# ` lines after the class-name line.
pub fn manifest_bytes(ds: &Dataset, comments: &[String]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    writeln!(buf, "# classes={}", ds.class_names().join(",")).expect("vec write");
    for c in comments {
        writeln!(buf, "# {c}").expect("vec write");
    }
    let image_mode = ds.records().first().is_some_and(|r| r.image_path.is_some());
    let mut w = csv::Writer::from_writer(buf);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    if image_mode {
        header.push("image_path".into());
    } else {
        header.extend((0..ds.dim()).map(|i| format!("feature_{i}")));
    }
    w.write_record(&header)?;
    for r in ds.records() {
        let mut row = vec![
            r.sample_id.clone(),
            r.split.to_string(),
            r.group_id.clone(),
            r.frame_index.to_string(),
            r.given_label.to_string(),
            r.true_label.map(|t| t.to_string()).unwrap_or_default(),
        ];
        match (&r.image_path, image_mode) {
            (Some(p), true) => row.push(p.display().to_string()),
            // shortest representation that parses back to the same bits
            _ => row.extend(r.features.iter().map(|v| v.to_string())),
        }
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<manifest buffer>", e.into_error()))
}

pub fn write_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    write_manifest_with_comments(ds, path, &[])
}

pub fn write_manifest_with_comments(ds: &Dataset, path: &Path, comments: &[String]) -> Result<()> {
    let bytes = manifest_bytes(ds, comments)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Mean-pools an image into an 8x8 grayscale grid and standardizes the 64
/// values to zero mean and unit variance. Constant images map to zeros.
pub fn embed_image(path: &Path) -> Result<Vec<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Domain(format!("empty image {}", path.display())));
    }
    let mut cells = Vec::with_capacity((EMBED_GRID * EMBED_GRID) as usize);
    for gy in 0..EMBED_GRID {
        let y0 = gy * h / EMBED_GRID;
        let y1 = ((gy + 1) * h / EMBED_GRID).max(y0 + 1).min(h);
        for gx in 0..EMBED_GRID {
            let x0 = gx * w / EMBED_GRID;
            let x1 = ((gx + 1) * w / EMBED_GRID).max(x0 + 1).min(w);
            let mut sum = 0.0;
            let mut n = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += f64::from(img.get_pixel(x, y)[0]);
                    n += 1.0;
                }
            }
            cells.push(sum / n / 255.0);
        }
    }
    let mean = cells.iter().sum::<f64>() / cells.len() as f64;
    let var = cells.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cells.len() as f64;
    let sd = var.sqrt();
    Ok(cells
        .into_iter()
        .map(|v| if sd > 1e-12 { round_sig9((v - mean) / sd) } else { 0.0 })
        .collect())
}

/// Configuration of the synthetic Gaussian-blob corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Development-split sample count per class.
    pub n_per_class: Vec<usize>,
    /// Test-split sample count per class; empty for no test split.
    pub test_per_class: Vec<usize>,
    pub dim: usize,
    /// Distance between every pair of class means.
    pub class_separation: f64,
    /// Fraction of each class drawn around the class-mean midpoint region.
    pub ambiguous_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_per_class: vec![900, 100],
            test_per_class: Vec::new(),
            dim: 16,
            class_separation: 4.0,
            ambiguous_fraction: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.n_per_class.len();
        if c < 2 {
            return Err(Error::Config("n_per_class needs at least 2 classes".into()));
        }
        if let Some(n) = self.n_per_class.iter().find(|&&n| n < 10) {
            return Err(Error::Config(format!(
                "every class needs at least 10 dev samples, got {n}"
            )));
        }
        if !self.test_per_class.is_empty() && self.test_per_class.len() != c {
            return Err(Error::Config(format!(
                "test_per_class has {} entries for {c} classes",
                self.test_per_class.len()
            )));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("dim must be >= 2, got {}", self.dim)));
        }
        if c > self.dim {
            return Err(Error::Config(format!(
                "{c} classes need dim >= {c} for equidistant means"
            )));
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return Err(Error::Config("class_separation must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.ambiguous_fraction) {
            return Err(Error::Config(format!(
                "ambiguous_fraction must lie in [0, 0.5], got {}",
                self.ambiguous_fraction
            )));
        }
        Ok(())
    }
}

/// Draws isotropic unit-variance Gaussian blobs with pairwise mean distance
/// `class_separation`. Ambiguous samples are centred halfway between their
/// class mean and the centroid of all means. Groups are contiguous blocks of
/// [`SYNTHETIC_GROUP_SIZE`] samples within a split.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let c = cfg.n_per_class.len();
    let scale = cfg.class_separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let mut m = vec![0.0; cfg.dim];
            m[k] = scale;
            m
        })
        .collect();
    let centroid: Vec<f64> = (0..cfg.dim)
        .map(|j| means.iter().map(|m| m[j]).sum::<f64>() / c as f64)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let splits = [(Split::Dev, &cfg.n_per_class), (Split::Test, &cfg.test_per_class)];
    let mut next_id = 0usize;
    for (split, counts) in splits {
        let mut position = 0usize;
        for (label, &n) in counts.iter().enumerate() {
            let n_amb = (cfg.ambiguous_fraction * n as f64).round() as usize;
            let ambiguous: HashSet<usize> = index::sample(&mut rng, n, n_amb).into_iter().collect();
            for i in 0..n {
                let center: Vec<f64> = if ambiguous.contains(&i) {
                    means[label]
                        .iter()
                        .zip(&centroid)
                        .map(|(m, z)| 0.5 * (m + z))
                        .collect()
                } else {
                    means[label].clone()
                };
                let features = center
                    .iter()
                    .map(|&mu| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        round_sig9(mu + z)
                    })
                    .collect();
                let group = position / SYNTHETIC_GROUP_SIZE;
                let frame = (position % SYNTHETIC_GROUP_SIZE) as u64 * SYNTHETIC_FRAME_STRIDE;
                records.push(SampleRecord {
                    sample_id: format!("s{next_id:06}"),
                    split,
                    group_id: format!("{split}-v{group:04}"),
                    frame_index: frame,
                    given_label: label,
                    true_label: Some(label),
                    features,
                    image_path: None,
                });
                next_id += 1;
                position += 1;
            }
        }
    }
    Dataset::new(records, c, default_class_names(c))
}

/// Paths written by [`write_cleaned_splits`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CleanedSplitPaths {
    pub corrected: PathBuf,
    pub filtered: PathBuf,
    pub relabel: PathBuf,
}

/// Label the pipeline assigns to every sample: the corrected label, the
/// stage-two proposal for filtered samples, the given label otherwise.
pub fn pipeline_labels(ds: &Dataset, plan: &CleaningPlan) -> Result<Vec<usize>> {
    plan.check_references(ds)?;
    let corrected: HashMap<&str, usize> = plan
        .corrections
        .iter()
        .map(|c| (c.sample_id.as_str(), c.new_label))
        .collect();
    let filtered: HashMap<&str, usize> = plan
        .filters
        .iter()
        .map(|f| (f.sample_id.as_str(), f.proposed_label))
        .collect();
    Ok(ds
        .records()
        .iter()
        .map(|r| {
            let id = r.sample_id.as_str();
            corrected
                .get(id)
                .or_else(|| filtered.get(id))
                .copied()
                .unwrap_or(r.given_label)
        })
        .collect())
}

/// Writes `corrected.csv` (all rows, plan labels applied), `filtered.csv`
/// (corrections applied, filter set removed) and `relabel.csv`
/// (`sample_id,pipeline_label` with `anomaly|normal`; class 0 is normal).
pub fn write_cleaned_splits(
    ds: &Dataset,
    plan: &CleaningPlan,
    out_dir: &Path,
) -> Result<CleanedSplitPaths> {
    plan.check_references(ds)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let relabels: BTreeMap<String, usize> = plan
        .corrections
        .iter()
        .map(|c| (c.sample_id.clone(), c.new_label))
        .collect();
    let corrected = ds.with_labels(&relabels)?;
    let removed: HashSet<&str> = plan.filters.iter().map(|f| f.sample_id.as_str()).collect();
    let filtered = corrected.without(&removed)?;

    let provenance = vec![format!(
        "provenance: cleaning plan seed={} corrections={} filters={}",
        plan.metadata.seed, plan.k_c, plan.k_f
    )];
    let paths = CleanedSplitPaths {
        corrected: out_dir.join("corrected.csv"),
        filtered: out_dir.join("filtered.csv"),
        relabel: out_dir.join("relabel.csv"),
    };
    write_manifest_with_comments(&corrected, &paths.corrected, &provenance)?;
    write_manifest_with_comments(&filtered, &paths.filtered, &provenance)?;

    let labels = pipeline_labels(ds, plan)?;
    let mut w = csv::Writer::from_path(&paths.relabel)?;
    w.write_record(["sample_id", "pipeline_label"])?;
    for (r, &label) in ds.records().iter().zip(&labels) {
        let verdict = if label == 0 { "normal" } else { "anomaly" };
        w.write_record([r.sample_id.as_str(), verdict])?;
    }
    w.flush().map_err(|e| Error::io(&paths.relabel, e))?;
    Ok(paths)
}
