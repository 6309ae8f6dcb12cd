//! Datasets: IDX ingestion, synthetic generation, non-IID partitioning and
//! backdoor trigger poisoning.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use flate2::read::GzDecoder;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, IdxError, Result};
use crate::seed::{self, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feat_dim: usize,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, feat_dim: usize, num_classes: usize) -> Result<Self> {
        if feat_dim == 0 || num_classes == 0 {
            return invalid("feature dimension and class count must be positive");
        }
        if features.len() != labels.len() * feat_dim {
            return invalid(format!(
                "{} feature values do not form {} rows of width {feat_dim}",
                features.len(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return invalid(format!("label {bad} out of range for {num_classes} classes"));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return invalid("non-finite feature value");
        }
        Ok(LabeledDataset {
            features,
            labels,
            feat_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Copies the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.feat_dim);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        LabeledDataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            feat_dim: self.feat_dim,
            num_classes: self.num_classes,
        }
    }

    /// Widens the label space, e.g. when a small file lacks some classes.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if self.labels.iter().any(|&l| l >= num_classes) {
            return invalid("cannot shrink the label space below an existing label");
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// Returns the first `n` rows (or all of them).
    pub fn head(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.feat_dim..(i + 1) * self.feat_dim]
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn idx_err(path: &Path, kind: IdxError) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        kind,
    }
}

fn check_header(path: &Path, bytes: &[u8], magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(idx_err(path, IdxError::Truncated { expected: header_len, found: bytes.len() }));
    }
    let found = BigEndian::read_u32(bytes);
    if found != magic {
        return Err(idx_err(path, IdxError::BadMagic { expected: magic, found }));
    }
    if bytes.len() < header_len {
        return Err(idx_err(path, IdxError::Truncated { expected: header_len, found: bytes.len() }));
    }
    Ok(())
}

/// Reads an IDX image/label file pair (optionally gzip-compressed).
///
/// Pixels are scaled to `[0, 1]` by dividing by 255. The class count is one
/// more than the largest label present.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let img = read_maybe_gz(images_path)?;
    check_header(images_path, &img, IDX_IMAGES_MAGIC, 16)?;
    let count = BigEndian::read_u32(&img[4..]) as usize;
    let rows = BigEndian::read_u32(&img[8..]) as usize;
    let cols = BigEndian::read_u32(&img[12..]) as usize;
    let expected = 16 + count * rows * cols;
    if img.len() < expected {
        return Err(idx_err(images_path, IdxError::Truncated { expected, found: img.len() }));
    }

    let lab = read_maybe_gz(labels_path)?;
    check_header(labels_path, &lab, IDX_LABELS_MAGIC, 8)?;
    let label_count = BigEndian::read_u32(&lab[4..]) as usize;
    if lab.len() < 8 + label_count {
        return Err(idx_err(labels_path, IdxError::Truncated { expected: 8 + label_count, found: lab.len() }));
    }
    if label_count != count {
        return Err(idx_err(labels_path, IdxError::CountMismatch { images: count, labels: label_count }));
    }

    let features = img[16..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lab[8..8 + count].iter().map(|&b| usize::from(b)).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    LabeledDataset::new(features, labels, rows * cols, num_classes)
}

/// Writes `data` as an uncompressed IDX pair with `rows x cols` images.
/// Features are quantized with `round(255 x)`.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    data: &LabeledDataset,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if rows * cols != data.feat_dim() {
        return invalid(format!("{rows}x{cols} images do not match feature dimension {}", data.feat_dim()));
    }
    if data.labels().iter().any(|&l| l > 255) {
        return invalid("IDX labels must fit in one byte");
    }
    let mut img = vec![0u8; 16];
    BigEndian::write_u32(&mut img[0..], IDX_IMAGES_MAGIC);
    BigEndian::write_u32(&mut img[4..], data.len() as u32);
    BigEndian::write_u32(&mut img[8..], rows as u32);
    BigEndian::write_u32(&mut img[12..], cols as u32);
    img.extend(data.features().iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8));

    let mut lab = vec![0u8; 8];
    BigEndian::write_u32(&mut lab[0..], IDX_LABELS_MAGIC);
    BigEndian::write_u32(&mut lab[4..], data.len() as u32);
    lab.extend(data.labels().iter().map(|&l| l as u8));

    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Standard deviation of each synthetic feature around its class centroid.
pub const SYNTHETIC_NOISE_STD: f64 = 0.05;

/// Gaussian class clusters in `[0, 1]^feat_dim`, labels assigned round-robin.
///
/// Centroids are drawn uniformly from `[0.25, 0.75]` per coordinate, so with
/// 20 features the expected centroid gap is about 18 noise deviations.
pub fn gen_synthetic(num_classes: usize, feat_dim: usize, n_samples: usize, seed: u64) -> Result<LabeledDataset> {
    if num_classes == 0 || feat_dim == 0 || n_samples == 0 {
        return invalid("synthetic dataset sizes must be positive");
    }
    let mut rng = seed::stream_rng(seed, Stream::Synthetic, &[]);
    let centroids: Vec<f64> = (0..num_classes * feat_dim).map(|_| rng.random_range(0.25..0.75)).collect();
    let noise = Normal::new(0.0, SYNTHETIC_NOISE_STD).expect("valid normal");
    let mut features = Vec::with_capacity(n_samples * feat_dim);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class = i % num_classes;
        let centroid = &centroids[class * feat_dim..(class + 1) * feat_dim];
        features.extend(centroid.iter().map(|c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0)));
        labels.push(class);
    }
    LabeledDataset::new(features, labels, feat_dim, num_classes)
}

/// Assignment of every sample to a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub assignment: Vec<usize>,
    pub n_clients: usize,
    /// Dirichlet concentration; `None` means IID.
    pub beta: Option<f64>,
}

impl PartitionPlan {
    /// Sample indices of one client, ascending.
    pub fn client_indices(&self, client: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == client)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clients];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn shards(&self, data: &LabeledDataset) -> Vec<LabeledDataset> {
        let mut buckets = vec![Vec::new(); self.n_clients];
        for (i, &c) in self.assignment.iter().enumerate() {
            buckets[c].push(i);
        }
        buckets.iter().map(|idx| data.subset(idx)).collect()
    }
}

/// Label-skewed split: each class is divided among clients in proportions
/// drawn from `Dir(beta)`. `beta = None` gives a shuffled round-robin IID split.
/// Clients left empty take one sample from the currently largest client.
pub fn dirichlet_partition(labels: &[usize], n_clients: usize, beta: Option<f64>, seed: u64) -> Result<PartitionPlan> {
    let n = labels.len();
    if n_clients == 0 {
        return invalid("need at least one client");
    }
    if n_clients > n {
        return invalid(format!("{n_clients} clients cannot all receive one of {n} samples"));
    }
    let mut rng = seed::stream_rng(seed, Stream::Partition, &[]);
    let mut assignment = vec![0usize; n];
    match beta {
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for (pos, &i) in order.iter().enumerate() {
                assignment[i] = pos % n_clients;
            }
        }
        Some(b) => {
            if !(b > 0.0 && b.is_finite()) {
                return invalid(format!("Dirichlet concentration must be positive, got {b}"));
            }
            let gamma = Gamma::new(b, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let num_classes = labels.iter().max().map_or(0, |m| m + 1);
            for class in 0..num_classes {
                let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
                members.shuffle(&mut rng);
                let mut props: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = props.iter().sum();
                if total > 0.0 {
                    props.iter_mut().for_each(|p| *p /= total);
                } else {
                    // every draw underflowed; put the class on one random client
                    props.iter_mut().for_each(|p| *p = 0.0);
                    props[rng.random_range(0..n_clients)] = 1.0;
                }
                let m = members.len();
                let mut start = 0usize;
                let mut cum = 0.0;
                for (client, p) in props.iter().enumerate() {
                    cum += p;
                    let end = if client + 1 == n_clients {
                        m
                    } else {
                        ((cum * m as f64) as usize).min(m)
                    };
                    for &i in &members[start..end.max(start)] {
                        assignment[i] = client;
                    }
                    start = end.max(start);
                }
            }
        }
    }

    let mut plan = PartitionPlan {
        assignment,
        n_clients,
        beta,
    };
    repair_empty_clients(&mut plan);
    Ok(plan)
}

fn repair_empty_clients(plan: &mut PartitionPlan) {
    loop {
        let sizes = plan.client_sizes();
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..plan.n_clients)
            .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
            .expect("at least one client");
        let donor_sample = plan
            .assignment
            .iter()
            .rposition(|&c| c == largest)
            .expect("largest client is non-empty");
        plan.assignment[donor_sample] = empty;
    }
}

/// A "plus"-shaped pixel trigger on square images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerSpec {
    pub center_row: usize,
    pub center_col: usize,
    pub arm_len: usize,
    pub value: f64,
    pub target_label: usize,
    pub image_side: usize,
}

impl Default for TriggerSpec {
    fn default() -> Self {
        TriggerSpec {
            center_row: 3,
            center_col: 3,
            arm_len: 2,
            value: 1.0,
            target_label: 0,
            image_side: 28,
        }
    }
}

impl TriggerSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_side;
        let (r, c, a) = (self.center_row, self.center_col, self.arm_len);
        if r < a || c < a || r + a >= s || c + a >= s {
            return invalid(format!("trigger centered at ({r}, {c}) with arm {a} leaves a {s}x{s} image"));
        }
        if !(0.0..=1.0).contains(&self.value) {
            return invalid("trigger value must lie in [0, 1]");
        }
        Ok(())
    }

    /// Flat pixel indices of the full trigger, or of one of its four
    /// distributed parts: 0 = up arm plus center, 1 = down, 2 = left, 3 = right.
    pub fn pixels(&self, dba_part: Option<usize>) -> Result<Vec<usize>> {
        self.validate()?;
        let (r, c, a, s) = (self.center_row, self.center_col, self.arm_len, self.image_side);
        let at = |row: usize, col: usize| row * s + col;
        let up: Vec<usize> = std::iter::once(at(r, c)).chain((1..=a).map(|k| at(r - k, c))).collect();
        let down: Vec<usize> = (1..=a).map(|k| at(r + k, c)).collect();
        let left: Vec<usize> = (1..=a).map(|k| at(r, c - k)).collect();
        let right: Vec<usize> = (1..=a).map(|k| at(r, c + k)).collect();
        let mut px = match dba_part {
            None => [up, down, left, right].concat(),
            Some(0) => up,
            Some(1) => down,
            Some(2) => left,
            Some(3) => right,
            Some(p) => return invalid(format!("DBA part must be 0..=3, got {p}")),
        };
        px.sort_unstable();
        Ok(px)
    }

    /// Stamps the trigger onto one flattened image.
    pub fn apply(&self, image: &mut [f64], dba_part: Option<usize>) -> Result<()> {
        if image.len() != self.image_side * self.image_side {
            return invalid(format!(
                "image of {} pixels is not {}x{}",
                image.len(),
                self.image_side,
                self.image_side
            ));
        }
        for p in self.pixels(dba_part)? {
            image[p] = self.value;
        }
        Ok(())
    }
}

/// Stamps the trigger on a seeded `floor(ratio * n)` subset and relabels those
/// samples to the target class.
pub fn poison_dataset(
    data: &LabeledDataset,
    trigger: &TriggerSpec,
    poison_ratio: f64,
    seed: u64,
    dba_part: Option<usize>,
) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&poison_ratio) {
        return invalid(format!("poison ratio must lie in [0, 1], got {poison_ratio}"));
    }
    if trigger.image_side * trigger.image_side != data.feat_dim() {
        return invalid("trigger image side does not match the feature dimension");
    }
    if trigger.target_label >= data.num_classes() {
        return invalid("trigger target label outside the label space");
    }
    let pixels = trigger.pixels(dba_part)?;
    let count = (poison_ratio * data.len() as f64).floor() as usize;
    let mut rng = seed::stream_rng(seed, Stream::Poison, &[]);
    let chosen = index::sample(&mut rng, data.len(), count);
    let mut out = data.clone();
    for i in chosen.iter() {
        let img = out.sample_mut(i);
        for &p in &pixels {
            img[p] = trigger.value;
        }
        out.labels[i] = trigger.target_label;
    }
    Ok(out)
}

/// The backdoor test set: every sample whose true class differs from the
/// target, stamped with the full trigger and keeping its true label.
pub fn backdoor_test_set(clean: &LabeledDataset, trigger: &TriggerSpec) -> Result<LabeledDataset> {
    let keep: Vec<usize> = (0..clean.len()).filter(|&i| clean.label(i) != trigger.target_label).collect();
    let mut out = clean.subset(&keep);
    for i in 0..out.len() {
        trigger.apply(out.sample_mut(i), None)?;
    }
    Ok(out)
}
