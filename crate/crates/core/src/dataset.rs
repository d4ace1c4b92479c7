//! Line-delimited annotation manifests, decoded in-memory datasets, and the
//! seeded batch iterator.
//!
//! A manifest starts with a header line `{"labels": [...]}` listing class
//! names in index order, followed by one JSON record per line:
//!
//! ```text
//! {"labels":["jumping","waving"]}
//! {"image":"images/a.png","label":"waving","split":"train","boxes":[[4,6,40,90]]}
//! {"image":"images/b.png","label":"jumping","split":"test","boxes":[],"keypoints":[[10,12,1], ...]}
//! ```
//!
//! Image paths are relative to the manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, derive_seed, AugmentationConfig};
use crate::data::{
    load_image, resize_bilinear, ActionLabelSpace, AnnotatedSample, BoundingBox, HeatmapTarget, HumanMask, Image,
    Joint, Keypoints, NUM_JOINTS,
};
use crate::error::{Error, Result};
use crate::mask::{mask_to_target, sample_mask, MaskTargetMode, DEFAULT_MIN_EXTENT};
use crate::network::BACKBONE_STRIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
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
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    /// Path relative to the manifest directory.
    pub image: String,
    pub label: usize,
    pub split: Split,
    pub boxes: Vec<BoundingBox>,
    pub keypoints: Option<Keypoints>,
}

impl ManifestRecord {
    pub fn has_person_evidence(&self) -> bool {
        !self.boxes.is_empty() || self.keypoints.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub label_space: ActionLabelSpace,
    pub records: Vec<ManifestRecord>,
    /// Directory image paths are resolved against.
    pub base_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    image: String,
    label: String,
    split: Split,
    #[serde(default)]
    boxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoints: Option<Vec<[f64; 3]>>,
}

impl Manifest {
    /// Parses manifest text without touching the file system. `source` names
    /// the input in diagnostics.
    pub fn parse(text: &str, base_dir: &Path, source: &str) -> Result<Manifest> {
        let perr = |line: usize, message: String| Error::Parse {
            path: source.to_string(),
            line,
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines.next().ok_or_else(|| perr(1, "missing labels header".into()))?;
        let header: HeaderLine =
            serde_json::from_str(header).map_err(|e| perr(hline, format!("bad labels header: {e}")))?;
        let label_space = ActionLabelSpace::new(header.labels).map_err(|e| perr(hline, e.to_string()))?;

        let mut records = Vec::new();
        for (line, raw) in lines {
            let rec: RecordLine = serde_json::from_str(raw).map_err(|e| perr(line, e.to_string()))?;
            let label = label_space.index_of(&rec.label).ok_or_else(|| Error::UnknownLabel {
                path: source.to_string(),
                line,
                label: rec.label.clone(),
            })?;
            if rec.image.is_empty() {
                return Err(perr(line, "empty image path".into()));
            }
            let boxes = rec
                .boxes
                .iter()
                .map(|&[a, b, c, d]| BoundingBox::new(a, b, c, d))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| perr(line, e.to_string()))?;
            let keypoints = match rec.keypoints {
                None => None,
                Some(kps) => {
                    if kps.len() != NUM_JOINTS {
                        return Err(perr(line, format!("expected {NUM_JOINTS} keypoints, got {}", kps.len())));
                    }
                    if kps.iter().flatten().any(|v| !v.is_finite()) {
                        return Err(perr(line, "non-finite keypoint".into()));
                    }
                    let joints = kps
                        .iter()
                        .map(|&[x, y, v]| Joint { x, y, visible: v > 0.0 })
                        .collect();
                    Some(Keypoints::new(joints)?)
                }
            };
            let record = ManifestRecord {
                image: rec.image,
                label,
                split: rec.split,
                boxes,
                keypoints,
            };
            if record.split == Split::Train && !record.has_person_evidence() {
                return Err(Error::MissingPersonEvidence {
                    path: source.to_string(),
                    line,
                    image: record.image,
                });
            }
            records.push(record);
        }
        Ok(Manifest {
            label_space,
            records,
            base_dir: base_dir.to_path_buf(),
        })
    }

    /// Canonical text form; `parse(to_text(m)) == m`.
    pub fn to_text(&self) -> String {
        let mut out = serde_json::to_string(&HeaderLine {
            labels: self.label_space.names().to_vec(),
        })
        .expect("serializable");
        out.push('\n');
        for r in &self.records {
            let line = RecordLine {
                image: r.image.clone(),
                label: self.label_space.name(r.label).expect("validated label").to_string(),
                split: r.split,
                boxes: r.boxes.iter().map(BoundingBox::to_array).collect(),
                keypoints: r.keypoints.as_ref().map(|k| {
                    k.joints()
                        .iter()
                        .map(|j| [j.x, j.y, if j.visible { 1.0 } else { 0.0 }])
                        .collect()
                }),
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        self.base_dir.join(&record.image)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Copy with every box and keypoint removed.
    pub fn without_annotations(&self) -> Manifest {
        let mut m = self.clone();
        for r in &mut m.records {
            r.boxes.clear();
            r.keypoints = None;
        }
        m
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// Reads and validates a manifest, checking that every image can be opened.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let source = path.display().to_string();
    let manifest = Manifest::parse(&text, base, &source)?;
    let mut line_of = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .skip(1);
    for record in &manifest.records {
        let line = line_of.next().unwrap_or(0);
        let full = manifest.image_path(record);
        let ok = image::ImageReader::open(&full)
            .map_err(|e| e.to_string())
            .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
            .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()));
        if let Err(reason) = ok {
            return Err(Error::MissingImage {
                path: source.clone(),
                line,
                image: record.image.clone(),
                reason,
            });
        }
    }
    Ok(manifest)
}

/// Decodes every image of a manifest, in record order.
pub fn load_images(manifest: &Manifest) -> Result<Vec<Image>> {
    manifest.records.iter().map(|r| load_image(&manifest.image_path(r))).collect()
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Images are resized to `image_size x image_size`.
    pub image_size: usize,
    pub min_extent: f64,
    pub mask_target: MaskTargetMode,
    pub augmentation: AugmentationConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 448,
            min_extent: DEFAULT_MIN_EXTENT,
            mask_target: MaskTargetMode::Soft,
            augmentation: AugmentationConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample: AnnotatedSample,
    pub split: Split,
    /// Image-resolution person mask; `None` without person evidence.
    pub mask: Option<HumanMask>,
}

/// A manifest with every image decoded and resized.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub label_space: ActionLabelSpace,
    pub config: DatasetConfig,
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    pub fn load(manifest: &Manifest, config: DatasetConfig) -> Result<Dataset> {
        Dataset::from_images(manifest, load_images(manifest)?, config)
    }

    /// Builds a dataset from already decoded images, one per record.
    pub fn from_images(manifest: &Manifest, images: Vec<Image>, config: DatasetConfig) -> Result<Dataset> {
        let s = config.image_size;
        if s == 0 || !s.is_multiple_of(BACKBONE_STRIDE) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of {BACKBONE_STRIDE}, got {s}"
            )));
        }
        if images.len() != manifest.records.len() {
            return Err(Error::mismatch(manifest.records.len(), images.len()));
        }
        let mut samples = Vec::with_capacity(images.len());
        for (record, pixels) in manifest.records.iter().zip(images) {
            let (h, w, _) = pixels.dim();
            let (sx, sy) = (s as f64 / w as f64, s as f64 / h as f64);
            let boxes: Vec<BoundingBox> = record.boxes.iter().map(|b| b.scaled(sx, sy)).collect();
            let keypoints = record.keypoints.as_ref().map(|k| k.scaled(sx, sy));
            let mask = if record.has_person_evidence() {
                Some(sample_mask(&boxes, keypoints.as_ref(), config.min_extent, s, s)?)
            } else {
                None
            };
            samples.push(LoadedSample {
                sample: AnnotatedSample {
                    image_path: manifest.image_path(record),
                    pixels: resize_bilinear(&pixels, s, s),
                    label: record.label,
                    boxes,
                    keypoints,
                },
                split: record.split,
                mask,
            });
        }
        Ok(Dataset {
            label_space: manifest.label_space.clone(),
            config,
            samples,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label_space.len()
    }

    pub fn feature_size(&self) -> usize {
        self.config.image_size / BACKBONE_STRIDE
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter_map(|(i, s)| (s.split == split).then_some(i))
            .collect()
    }

    /// Heatmap target of an un-augmented sample.
    pub fn target(&self, index: usize) -> Option<HeatmapTarget> {
        let f = self.feature_size();
        self.samples[index]
            .mask
            .as_ref()
            .map(|m| mask_to_target(m, f, f, self.config.mask_target).expect("image size is a multiple of the stride"))
    }

    /// Batches of one split. Training batches are shuffled per `(seed, epoch)`
    /// and augmented per `(seed, epoch, sample index)`; other splits keep
    /// manifest order and are not augmented.
    pub fn batches(&self, split: Split, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchIter<'_>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut order = self.split_indices(split);
        if order.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        let train = split == Split::Train;
        if train {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch, SHUFFLE_STREAM]));
            order.shuffle(&mut rng);
        }
        Ok(BatchIter {
            dataset: self,
            order,
            batch_size,
            next: 0,
            seed,
            epoch,
            augment: train,
        })
    }

    /// Image, label and target of one sample as seen in a given epoch.
    pub fn prepare(&self, index: usize, seed: u64, epoch: u64, augment: bool) -> (Image, Option<HeatmapTarget>) {
        let s = &self.samples[index];
        let f = self.feature_size();
        let size = self.config.image_size;
        if !augment {
            return (s.sample.pixels.clone(), self.target(index));
        }
        let params = self.config.augmentation.draw(seed, epoch, index as u64);
        let mask = s.mask.clone().unwrap_or_else(|| HumanMask::zeros(size, size));
        let (img, mask) = augment::apply(&s.sample.pixels, &mask, &params);
        let target = s
            .mask
            .as_ref()
            .map(|_| mask_to_target(&mask, f, f, self.config.mask_target).expect("image size is a multiple of the stride"));
        (img, target)
    }
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone)]
pub struct Batch {
    /// Dataset indices of the samples.
    pub indices: Vec<usize>,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub targets: Vec<Option<HeatmapTarget>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
    seed: u64,
    epoch: u64,
    augment: bool,
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Yields the original images and targets even for the training split.
    pub fn without_augmentation(mut self) -> Self {
        self.augment = false;
        self
    }

    /// Advances past `n` batches without preparing them.
    pub fn skip_batches(&mut self, n: usize) {
        self.next = self.next.saturating_add(n.saturating_mul(self.batch_size));
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let indices = self.order[self.next..end].to_vec();
        self.next = end;
        let mut batch = Batch {
            indices: indices.clone(),
            images: Vec::with_capacity(indices.len()),
            labels: Vec::with_capacity(indices.len()),
            targets: Vec::with_capacity(indices.len()),
        };
        for i in indices {
            let (img, target) = self.dataset.prepare(i, self.seed, self.epoch, self.augment);
            batch.images.push(img);
            batch.labels.push(self.dataset.samples[i].sample.label);
            batch.targets.push(target);
        }
        Some(batch)
    }

    fn nth(&mut self, n: usize) -> Option<Batch> {
        self.skip_batches(n);
        self.next()
    }
}
