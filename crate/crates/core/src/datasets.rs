//! Labelled datasets: IDX loading, synthetic Gaussian blobs, non-IID
//! partitioning and backdoor pattern embedding.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major feature matrix with integer labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("a dataset needs at least 2 classes"));
        }
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                found: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            dim: self.dim,
            classes: self.classes,
        }
    }

    /// Replaces the labels, keeping the features.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(self.features.clone(), labels, self.dim, self.classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;
const MNIST_CLASSES: usize = 10;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    let slice = bytes.get(offset..end).ok_or(Error::Truncated {
        needed: end,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("4-byte slice")))
}

/// Parses an IDX3 image file. Returns the count, the flattened image size
/// and pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let dim = rows * cols;
    let needed = 16 + count * dim;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..needed].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((count, dim, pixels))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an MNIST-style image/label file pair.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    mnist_from_bytes(&images, &labels)
}

pub fn mnist_from_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (count, dim, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    Dataset::new(pixels, labels, dim, MNIST_CLASSES)
}

/// `per_class` samples of each of `classes` isotropic Gaussians.
///
/// The class centers depend only on `(classes, dim)`, so datasets drawn with
/// different seeds (train and test, say) share the same classes.
pub fn synth_blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::invalid("per_class and dim must be positive"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!("spread must be non-negative, got {spread}")));
    }
    let centers = blob_centers(classes, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (c, center) in centers.chunks(dim).enumerate() {
            for &mu in center {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(mu + spread * noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, dim, classes)
}

fn blob_centers(classes: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB10B_5EED ^ ((classes as u64) << 32) ^ dim as u64);
    (0..classes * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

/// Sample indices held by each participant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn participants(&self) -> usize {
        self.assignments.len()
    }

    pub fn total(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    /// Checks disjointness, bounds and that nobody is empty.
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        let mut seen = vec![false; dataset_len];
        for (p, list) in self.assignments.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::invalid(format!("participant {p} holds no samples")));
            }
            for &i in list {
                if i >= dataset_len {
                    return Err(Error::invalid(format!("sample index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("sample {i} assigned twice")));
                }
            }
        }
        Ok(())
    }

    /// Truncates every participant to at most `cap` samples.
    pub fn capped(mut self, cap: usize) -> Self {
        for list in &mut self.assignments {
            list.truncate(cap);
        }
        self
    }
}

const SHARD_DEAL_ATTEMPTS: usize = 1000;

fn distinct(classes: &[usize]) -> bool {
    classes.iter().enumerate().all(|(i, c)| !classes[..i].contains(c))
}

/// Shard partition: every participant holds `classes_per_participant`
/// equal-size shards, each from a different class.
///
/// Shards are spread over classes as evenly as possible and dealt at
/// random, redealing until no participant draws one class twice. `shard_size` caps
/// the samples per shard; by default every shard takes as many samples as
/// the scarcest class allows.
pub fn partition_shards(
    ds: &Dataset,
    participants: usize,
    classes_per_participant: usize,
    shard_size: Option<usize>,
    seed: u64,
) -> Result<Partition> {
    let classes = ds.classes();
    if participants == 0 {
        return Err(Error::invalid("need at least one participant"));
    }
    if classes_per_participant == 0 || classes_per_participant > classes {
        return Err(Error::invalid(format!(
            "cannot give {classes_per_participant} classes per participant from {classes} classes"
        )));
    }
    let total_shards = participants * classes_per_participant;
    let base = total_shards / classes;
    let extra = total_shards % classes;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_order: Vec<usize> = (0..classes).collect();
    class_order.shuffle(&mut rng);
    let shards_of = |rank: usize| base + usize::from(rank < extra);

    let mut by_class = ds.indices_by_class();
    let mut size = usize::MAX;
    for (rank, &c) in class_order.iter().enumerate() {
        if let Some(n) = by_class[c].len().checked_div(shards_of(rank)) {
            size = size.min(n);
        }
    }
    if let Some(cap) = shard_size {
        size = size.min(cap);
    }
    if size == 0 {
        return Err(Error::invalid("not enough samples for the requested shards"));
    }

    let striped: Vec<usize> = class_order
        .iter()
        .enumerate()
        .flat_map(|(rank, &c)| std::iter::repeat_n(c, shards_of(rank)))
        .collect();
    let mut deal = striped.clone();
    let mut found = false;
    for _ in 0..SHARD_DEAL_ATTEMPTS {
        deal.shuffle(&mut rng);
        if deal.chunks(classes_per_participant).all(distinct) {
            found = true;
            break;
        }
    }
    // Striping hands participant p the slots p, p + K, ...; no class has
    // more shards than participants, so those classes are distinct.
    let owner_classes: Vec<Vec<usize>> = if found {
        deal.chunks(classes_per_participant).map(<[usize]>::to_vec).collect()
    } else {
        (0..participants)
            .map(|p| striped.iter().skip(p).step_by(participants).copied().collect())
            .collect()
    };

    for pool in &mut by_class {
        pool.shuffle(&mut rng);
    }
    let mut next = vec![0; classes];
    let mut assignments = vec![Vec::new(); participants];
    for (owner, list) in owner_classes.iter().enumerate() {
        for &c in list {
            let start = next[c] * size;
            assignments[owner].extend_from_slice(&by_class[c][start..start + size]);
            next[c] += 1;
        }
    }
    let partition = Partition { assignments };
    partition.validate(ds.len())?;
    Ok(partition)
}

/// Per class, splits samples across participants in proportions drawn from
/// a symmetric Dirichlet(`alpha`). Participants left empty receive one
/// sample from the largest holder.
pub fn partition_dirichlet(ds: &Dataset, participants: usize, alpha: f64, seed: u64) -> Result<Partition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if participants == 0 || participants > ds.len() {
        return Err(Error::invalid(format!(
            "cannot split {} samples among {participants} participants",
            ds.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![Vec::new(); participants];
    for mut pool in ds.indices_by_class() {
        if pool.is_empty() {
            continue;
        }
        pool.shuffle(&mut rng);
        let draws: Vec<f64> = (0..participants).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let counts = apportion(pool.len(), &draws, total);
        let mut start = 0;
        for (p, count) in counts.into_iter().enumerate() {
            assignments[p].extend_from_slice(&pool[start..start + count]);
            start += count;
        }
    }
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let largest = (0..participants)
            .max_by_key(|&p| (assignments[p].len(), std::cmp::Reverse(p)))
            .expect("at least one participant");
        let moved = assignments[largest].pop().expect("largest holder is non-empty");
        assignments[empty].push(moved);
    }
    let partition = Partition { assignments };
    partition.validate(ds.len())?;
    Ok(partition)
}

/// Largest-remainder rounding of `n * w_i / total`.
fn apportion(n: usize, weights: &[f64], total: f64) -> Vec<usize> {
    let share = |w: f64| if total > 0.0 { n as f64 * w / total } else { n as f64 / weights.len() as f64 };
    let mut counts: Vec<usize> = weights.iter().map(|&w| share(w).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = share(weights[a]) - counts[a] as f64;
        let rb = share(weights[b]) - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Uniformly random equal split.
pub fn partition_iid(ds: &Dataset, participants: usize, seed: u64) -> Result<Partition> {
    if participants == 0 || participants > ds.len() {
        return Err(Error::invalid(format!(
            "cannot split {} samples among {participants} participants",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let per = ds.len() / participants;
    let assignments = order.chunks_exact(per).take(participants).map(<[usize]>::to_vec).collect();
    Ok(Partition { assignments })
}

/// A set of feature overwrites plus the label the backdoor should trigger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorPattern {
    entries: Vec<(usize, f64)>,
    target_label: usize,
}

impl BackdoorPattern {
    pub fn new(entries: Vec<(usize, f64)>, target_label: usize) -> Result<Self> {
        if entries.iter().any(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid("pattern values must be finite"));
        }
        Ok(Self {
            entries,
            target_label,
        })
    }

    /// `size x size` block at `(top, left)` of a row-major image `width` pixels wide.
    pub fn block(width: usize, top: usize, left: usize, size: usize, value: f64, target_label: usize) -> Result<Self> {
        if left + size > width {
            return Err(Error::invalid("pattern block exceeds the image width"));
        }
        let entries = (top..top + size)
            .flat_map(|r| (left..left + size).map(move |c| (r * width + c, value)))
            .collect();
        Self::new(entries, target_label)
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn target_label(&self) -> usize {
        self.target_label
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks every coordinate against a feature dimension.
    pub fn check(&self, dim: usize) -> Result<()> {
        if let Some(&(i, _)) = self.entries.iter().find(|(i, _)| *i >= dim) {
            return Err(Error::invalid(format!("pattern coordinate {i} outside {dim} features")));
        }
        Ok(())
    }

    /// Overwrites the pattern coordinates of `row` in place.
    pub fn embed(&self, row: &mut [f64]) -> Result<()> {
        self.check(row.len())?;
        for &(i, v) in &self.entries {
            row[i] = v;
        }
        Ok(())
    }
}

pub fn embed_backdoor(row: &[f64], pattern: &BackdoorPattern) -> Result<Vec<f64>> {
    let mut out = row.to_vec();
    pattern.embed(&mut out)?;
    Ok(out)
}

/// Declarative form of a pattern, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PatternSpec {
    /// Square block in the top-left corner of a row-major image.
    Block {
        width: usize,
        #[serde(default = "default_block")]
        size: usize,
        #[serde(default = "default_value")]
        value: f64,
    },
    /// Explicit feature indices set to one value.
    Features { indices: Vec<usize>, value: f64 },
}

fn default_block() -> usize {
    3
}
fn default_value() -> f64 {
    1.0
}

impl PatternSpec {
    pub fn build(&self, target_label: usize) -> Result<BackdoorPattern> {
        match self {
            PatternSpec::Block { width, size, value } => BackdoorPattern::block(*width, 0, 0, *size, *value, target_label),
            PatternSpec::Features { indices, value } => {
                BackdoorPattern::new(indices.iter().map(|&i| (i, *value)).collect(), target_label)
            }
        }
    }
}
