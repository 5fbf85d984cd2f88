//! Datasets, synthetic generators, metrics, and the dataset cache.
//!
//! Two dataset families: labeled sequences for the chain CRF (handwriting
//! words or synthetic Markov chains) and binary segmentation images for the
//! Gaussian CRF. The synthetic generators are deliberately tunable so that
//! structure matters: weak per-position evidence plus strong transitions
//! makes a unary-only classifier clearly worse than a structured one.

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, RngDomain, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Bumped whenever the cache file layout changes; part of cache file names
/// so stale files are never misread.
pub const DATASET_FORMAT_VERSION: u32 = 1;

const DATASET_MAGIC: &[u8; 8] = b"CRFDATA\0";
const KIND_SEQUENCE: u8 = 1;
const KIND_SEGMENTATION: u8 = 2;

/// One labeled sequence: per-position feature rows and a label per position.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInstance {
    /// L x F feature matrix.
    pub features: Tensor,
    /// Length-L labels in [0, num_labels).
    pub labels: Vec<usize>,
    /// Cross-validation fold id.
    pub fold: usize,
}

/// A set of labeled sequences with a shared label alphabet and feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub instances: Vec<SequenceInstance>,
    pub num_labels: usize,
    pub feature_dim: usize,
}

impl SequenceDataset {
    pub fn validate(&self) -> Result<()> {
        for (i, inst) in self.instances.iter().enumerate() {
            let len = inst.labels.len();
            if inst.features.rows() != len || inst.features.cols() != self.feature_dim {
                return Err(Error::ShapeMismatch(format!(
                    "instance {i}: features {}x{} vs {} labels, feature dim {}",
                    inst.features.rows(),
                    inst.features.cols(),
                    len,
                    self.feature_dim
                )));
            }
            if len == 0 {
                return Err(Error::ShapeMismatch(format!("instance {i}: empty sequence")));
            }
            for (pos, &label) in inst.labels.iter().enumerate() {
                if label >= self.num_labels {
                    return Err(Error::LabelOutOfRange {
                        label,
                        num_labels: self.num_labels,
                        pos,
                    });
                }
            }
        }
        Ok(())
    }

    /// Instances whose fold id is in `folds`.
    pub fn subset_by_fold(&self, folds: &[usize]) -> SequenceDataset {
        SequenceDataset {
            instances: self
                .instances
                .iter()
                .filter(|inst| folds.contains(&inst.fold))
                .cloned()
                .collect(),
            num_labels: self.num_labels,
            feature_dim: self.feature_dim,
        }
    }
}

/// One segmentation image, flattened row-major to length L = height*width.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationInstance {
    /// L x F feature matrix, one row per pixel.
    pub features: Tensor,
    /// Length-L binary mask.
    pub mask: Vec<usize>,
}

/// A set of equally sized segmentation images.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationDataset {
    pub instances: Vec<SegmentationInstance>,
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
}

impl SegmentationDataset {
    pub fn validate(&self) -> Result<()> {
        let pixels = self.height * self.width;
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.features.rows() != pixels
                || inst.features.cols() != self.feature_dim
                || inst.mask.len() != pixels
            {
                return Err(Error::ShapeMismatch(format!(
                    "instance {i}: features {}x{}, mask {}, expected {} pixels x {} features",
                    inst.features.rows(),
                    inst.features.cols(),
                    inst.mask.len(),
                    pixels,
                    self.feature_dim
                )));
            }
            if let Some(pos) = inst.mask.iter().position(|&m| m > 1) {
                return Err(Error::LabelOutOfRange {
                    label: inst.mask[pos],
                    num_labels: 2,
                    pos,
                });
            }
        }
        Ok(())
    }
}

/// Loads the tab-separated handwriting dataset: one letter per row with
/// fields id, letter, next_id, word_id, position, fold, then 128 binary
/// pixels of the 16x8 image. Letters chain into words through next_id, with
/// -1 closing a word; rows must appear in chain order.
pub fn load_taskar_ocr(path: &Path) -> Result<SequenceDataset> {
    let text = fs::read_to_string(path)?;
    let mut instances = Vec::new();
    let mut features: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut fold = 0usize;
    let mut expected_id: Option<i64> = None;

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 6 + 128 {
            return Err(Error::DataFormat {
                line: line_no,
                msg: format!("expected at least {} fields, found {}", 6 + 128, fields.len()),
            });
        }
        let id: i64 = fields[0].parse().map_err(|_| Error::DataFormat {
            line: line_no,
            msg: format!("bad id {:?}", fields[0]),
        })?;
        if let Some(want) = expected_id {
            if id != want {
                return Err(Error::DataFormat {
                    line: line_no,
                    msg: format!("broken letter chain: expected id {want}, found {id}"),
                });
            }
        }
        let letter = fields[1];
        if letter.len() != 1 || !letter.as_bytes()[0].is_ascii_lowercase() {
            return Err(Error::DataFormat {
                line: line_no,
                msg: format!("bad letter {letter:?}"),
            });
        }
        let label = (letter.as_bytes()[0] - b'a') as usize;
        let next_id: i64 = fields[2].parse().map_err(|_| Error::DataFormat {
            line: line_no,
            msg: format!("bad next_id {:?}", fields[2]),
        })?;
        let row_fold: usize = fields[5].parse().map_err(|_| Error::DataFormat {
            line: line_no,
            msg: format!("bad fold {:?}", fields[5]),
        })?;
        if labels.is_empty() {
            fold = row_fold;
        } else if row_fold != fold {
            return Err(Error::DataFormat {
                line: line_no,
                msg: format!("fold changed mid-word: {fold} then {row_fold}"),
            });
        }
        for (k, raw) in fields[6..6 + 128].iter().enumerate() {
            match *raw {
                "0" => features.push(0.0),
                "1" => features.push(1.0),
                other => {
                    return Err(Error::DataFormat {
                        line: line_no,
                        msg: format!("pixel {k} is {other:?}, expected 0 or 1"),
                    })
                }
            }
        }
        labels.push(label);

        if next_id < 0 {
            let len = labels.len();
            instances.push(SequenceInstance {
                features: Tensor::from_vec(vec![len, 128], std::mem::take(&mut features))?,
                labels: std::mem::take(&mut labels),
                fold,
            });
            expected_id = None;
        } else {
            expected_id = Some(next_id);
        }
    }
    if !labels.is_empty() {
        return Err(Error::DataFormat {
            line: text.lines().count(),
            msg: "file ended mid-word (last row has next_id >= 0)".into(),
        });
    }

    let dataset = SequenceDataset {
        instances,
        num_labels: 26,
        feature_dim: 128,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Parameters of the synthetic sequence generator, also the cache key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSeqParams {
    pub seed: u64,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_labels: usize,
    pub feature_dim: usize,
    /// Multiplier on the one-hot label signal inside the features.
    pub unary_snr: f64,
    /// Multiplier on the random transition log-potentials.
    pub transition_strength: f64,
}

impl SynthSeqParams {
    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "bad length range {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.num_labels < 2 {
            return Err(Error::Config("need at least 2 labels".into()));
        }
        if self.feature_dim < self.num_labels {
            return Err(Error::Config(format!(
                "feature dim {} must be >= label count {}",
                self.feature_dim, self.num_labels
            )));
        }
        if !self.unary_snr.is_finite() || !self.transition_strength.is_finite() {
            return Err(Error::Config("snr and transition strength must be finite".into()));
        }
        Ok(())
    }
}

fn sample_categorical(rng: &mut impl Rng, log_weights: &[f64]) -> usize {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|&w| (w - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        draw -= w;
        if draw <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Labels follow a random Markov chain whose transition log-potentials are
/// scaled by `transition_strength`; features are the one-hot label times
/// `unary_snr` plus unit Gaussian noise. Weak snr with strong transitions
/// makes the pairwise structure carry most of the signal.
pub fn synth_sequences(params: &SynthSeqParams) -> Result<SequenceDataset> {
    params.validate()?;
    let mut rng = seeded_rng(params.seed, RngDomain::DataGen);
    let m = params.num_labels;

    let transitions: Vec<f64> = (0..m * m)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * params.transition_strength
        })
        .collect();

    let mut instances = Vec::with_capacity(params.count);
    for i in 0..params.count {
        let len = rng.random_range(params.min_len..=params.max_len);
        let mut labels = Vec::with_capacity(len);
        let uniform = vec![0.0; m];
        labels.push(sample_categorical(&mut rng, &uniform));
        for _ in 1..len {
            let prev = *labels.last().unwrap();
            labels.push(sample_categorical(&mut rng, &transitions[prev * m..(prev + 1) * m]));
        }

        let mut features = Vec::with_capacity(len * params.feature_dim);
        for &label in &labels {
            for k in 0..params.feature_dim {
                let signal = if k == label { params.unary_snr } else { 0.0 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(signal + noise);
            }
        }
        instances.push(SequenceInstance {
            features: Tensor::from_vec(vec![len, params.feature_dim], features)?,
            labels,
            fold: i % 10,
        });
    }

    let dataset = SequenceDataset {
        instances,
        num_labels: m,
        feature_dim: params.feature_dim,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Parameters of the synthetic segmentation generator, also the cache key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSegParams {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    /// Multiplier on the mask signal inside the features.
    pub snr: f64,
}

impl SynthSegParams {
    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be positive".into()));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::Config(format!(
                "image dims {}x{} must be at least 2x2",
                self.height, self.width
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature dim must be positive".into()));
        }
        if !self.snr.is_finite() {
            return Err(Error::Config("snr must be finite".into()));
        }
        Ok(())
    }
}

/// Masks are smooth blobs: a coarse 4x4 Gaussian grid bilinearly upsampled
/// to the image size and thresholded at zero. Features carry the signed mask
/// along a random unit direction, scaled by `snr`, plus unit Gaussian noise.
pub fn synth_segmentation(params: &SynthSegParams) -> Result<SegmentationDataset> {
    params.validate()?;
    let mut rng = seeded_rng(params.seed, RngDomain::DataGen);
    let (h, w, f) = (params.height, params.width, params.feature_dim);
    let pixels = h * w;

    let mut direction: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
    for d in &mut direction {
        *d /= norm;
    }

    const GRID: usize = 4;
    let mut instances = Vec::with_capacity(params.count);
    for _ in 0..params.count {
        let coarse: Vec<f64> = (0..GRID * GRID).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut mask = Vec::with_capacity(pixels);
        for r in 0..h {
            for c in 0..w {
                let u = r as f64 * (GRID - 1) as f64 / (h - 1) as f64;
                let v = c as f64 * (GRID - 1) as f64 / (w - 1) as f64;
                let (r0, c0) = (u.floor() as usize, v.floor() as usize);
                let (r1, c1) = ((r0 + 1).min(GRID - 1), (c0 + 1).min(GRID - 1));
                let (du, dv) = (u - r0 as f64, v - c0 as f64);
                let value = coarse[r0 * GRID + c0] * (1.0 - du) * (1.0 - dv)
                    + coarse[r0 * GRID + c1] * (1.0 - du) * dv
                    + coarse[r1 * GRID + c0] * du * (1.0 - dv)
                    + coarse[r1 * GRID + c1] * du * dv;
                mask.push(usize::from(value > 0.0));
            }
        }

        let mut features = Vec::with_capacity(pixels * f);
        for &m in &mask {
            let signed = 2.0 * m as f64 - 1.0;
            for dir in &direction {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(params.snr * signed * dir + noise);
            }
        }
        instances.push(SegmentationInstance {
            features: Tensor::from_vec(vec![pixels, f], features)?,
            mask,
        });
    }

    let dataset = SegmentationDataset {
        instances,
        height: h,
        width: w,
        feature_dim: f,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Fraction of positions labeled correctly, averaged per sequence first and
/// then over sequences, so short and long sequences weigh equally.
pub fn metric_accuracy(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(golds) {
        if p.len() != g.len() {
            return Err(Error::LengthMismatch {
                left: p.len(),
                right: g.len(),
            });
        }
        let hits = p.iter().zip(g).filter(|(a, b)| a == b).count();
        total += hits as f64 / p.len() as f64;
    }
    Ok(total / preds.len() as f64)
}

/// Jaccard index averaged over images. Two empty masks agree perfectly, so
/// an empty union scores 1.0 by convention.
pub fn metric_iou(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(golds) {
        if p.len() != g.len() {
            return Err(Error::LengthMismatch {
                left: p.len(),
                right: g.len(),
            });
        }
        let mut intersection = 0usize;
        let mut union = 0usize;
        for (&a, &b) in p.iter().zip(g) {
            intersection += usize::from(a == 1 && b == 1);
            union += usize::from(a == 1 || b == 1);
        }
        total += if union == 0 {
            1.0
        } else {
            intersection as f64 / union as f64
        };
    }
    Ok(total / preds.len() as f64)
}

pub(crate) struct ByteWriter {
    pub(crate) buf: Vec<u8>,
}

impl ByteWriter {
    pub(crate) fn new() -> Self {
        Self { buf: Vec::new() }
    }
    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated dataset file".into()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

fn write_tensor(w: &mut ByteWriter, t: &Tensor) {
    w.u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.u64(d as u64);
    }
    for &v in t.data() {
        w.f64(v);
    }
}

fn read_tensor(r: &mut ByteReader) -> Result<Tensor> {
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.f64()?);
    }
    Tensor::from_vec(shape, data)
}

/// Writes a sequence dataset in the versioned binary layout. Bit-exact:
/// floats round-trip through their bit patterns.
pub fn save_sequence_dataset(path: &Path, dataset: &SequenceDataset) -> Result<()> {
    dataset.validate()?;
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(DATASET_MAGIC);
    w.u32(DATASET_FORMAT_VERSION);
    w.buf.push(KIND_SEQUENCE);
    w.u64(dataset.num_labels as u64);
    w.u64(dataset.feature_dim as u64);
    w.u64(dataset.instances.len() as u64);
    for inst in &dataset.instances {
        w.u64(inst.fold as u64);
        w.u64(inst.labels.len() as u64);
        for &label in &inst.labels {
            w.u64(label as u64);
        }
        write_tensor(&mut w, &inst.features);
    }
    atomic_write(path, &w.buf)
}

fn read_header(r: &mut ByteReader, expect_kind: u8) -> Result<()> {
    if r.take(8)? != DATASET_MAGIC {
        return Err(Error::Checkpoint("not a dataset file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "dataset format version {version}, expected {DATASET_FORMAT_VERSION}"
        )));
    }
    let kind = r.take(1)?[0];
    if kind != expect_kind {
        return Err(Error::Checkpoint(format!(
            "dataset kind {kind}, expected {expect_kind}"
        )));
    }
    Ok(())
}

pub fn load_sequence_dataset(path: &Path) -> Result<SequenceDataset> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    read_header(&mut r, KIND_SEQUENCE)?;
    let num_labels = r.u64()? as usize;
    let feature_dim = r.u64()? as usize;
    let count = r.u64()? as usize;
    let mut instances = Vec::with_capacity(count);
    for _ in 0..count {
        let fold = r.u64()? as usize;
        let len = r.u64()? as usize;
        let mut labels = Vec::with_capacity(len);
        for _ in 0..len {
            labels.push(r.u64()? as usize);
        }
        let features = read_tensor(&mut r)?;
        instances.push(SequenceInstance {
            features,
            labels,
            fold,
        });
    }
    let dataset = SequenceDataset {
        instances,
        num_labels,
        feature_dim,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save_segmentation_dataset(path: &Path, dataset: &SegmentationDataset) -> Result<()> {
    dataset.validate()?;
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(DATASET_MAGIC);
    w.u32(DATASET_FORMAT_VERSION);
    w.buf.push(KIND_SEGMENTATION);
    w.u64(dataset.height as u64);
    w.u64(dataset.width as u64);
    w.u64(dataset.feature_dim as u64);
    w.u64(dataset.instances.len() as u64);
    for inst in &dataset.instances {
        for &m in &inst.mask {
            w.buf.push(m as u8);
        }
        write_tensor(&mut w, &inst.features);
    }
    atomic_write(path, &w.buf)
}

pub fn load_segmentation_dataset(path: &Path) -> Result<SegmentationDataset> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    read_header(&mut r, KIND_SEGMENTATION)?;
    let height = r.u64()? as usize;
    let width = r.u64()? as usize;
    let feature_dim = r.u64()? as usize;
    let count = r.u64()? as usize;
    let pixels = height * width;
    let mut instances = Vec::with_capacity(count);
    for _ in 0..count {
        let mask: Vec<usize> = r.take(pixels)?.iter().map(|&b| b as usize).collect();
        let features = read_tensor(&mut r)?;
        instances.push(SegmentationInstance { features, mask });
    }
    let dataset = SegmentationDataset {
        instances,
        height,
        width,
        feature_dim,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn format_knob(v: f64) -> String {
    format!("{v:.4}").replace('.', "p").replace('-', "m")
}

/// Cache file name for a synthetic sequence dataset, unique per generator
/// argument set and format version.
pub fn synth_seq_cache_name(params: &SynthSeqParams) -> String {
    format!(
        "synthseq_v{}_s{}_n{}_l{}-{}_m{}_f{}_snr{}_ts{}.bin",
        DATASET_FORMAT_VERSION,
        params.seed,
        params.count,
        params.min_len,
        params.max_len,
        params.num_labels,
        params.feature_dim,
        format_knob(params.unary_snr),
        format_knob(params.transition_strength),
    )
}

/// Cache file name for a synthetic segmentation dataset.
pub fn synth_seg_cache_name(params: &SynthSegParams) -> String {
    format!(
        "synthseg_v{}_s{}_n{}_h{}_w{}_f{}_snr{}.bin",
        DATASET_FORMAT_VERSION,
        params.seed,
        params.count,
        params.height,
        params.width,
        params.feature_dim,
        format_knob(params.snr),
    )
}

/// Returns the cached dataset for these parameters, generating and saving it
/// on first use.
pub fn cached_synth_sequences(cache_dir: &Path, params: &SynthSeqParams) -> Result<SequenceDataset> {
    let path: PathBuf = cache_dir.join(synth_seq_cache_name(params));
    if path.exists() {
        if let Ok(dataset) = load_sequence_dataset(&path) {
            return Ok(dataset);
        }
    }
    let dataset = synth_sequences(params)?;
    save_sequence_dataset(&path, &dataset)?;
    Ok(dataset)
}

/// Segmentation counterpart of `cached_synth_sequences`.
pub fn cached_synth_segmentation(
    cache_dir: &Path,
    params: &SynthSegParams,
) -> Result<SegmentationDataset> {
    let path: PathBuf = cache_dir.join(synth_seg_cache_name(params));
    if path.exists() {
        if let Ok(dataset) = load_segmentation_dataset(&path) {
            return Ok(dataset);
        }
    }
    let dataset = synth_segmentation(params)?;
    save_segmentation_dataset(&path, &dataset)?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as IoWrite;

    fn ocr_fixture_line(
        id: i64,
        letter: char,
        next_id: i64,
        word_id: i64,
        position: usize,
        fold: usize,
        pixels: &[u8],
    ) -> String {
        let mut fields = vec![
            id.to_string(),
            letter.to_string(),
            next_id.to_string(),
            word_id.to_string(),
            position.to_string(),
            fold.to_string(),
        ];
        fields.extend(pixels.iter().map(|p| p.to_string()));
        fields.join("\t")
    }

    fn write_fixture(lines: &[String]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        file.flush().unwrap();
        file
    }

    #[test]
    fn ocr_fixture_parses_two_words() {
        let mut px = vec![0u8; 128];
        px[0] = 1;
        let lines = vec![
            ocr_fixture_line(1, 'c', 2, 1, 0, 0, &px),
            ocr_fixture_line(2, 'a', 3, 1, 1, 0, &px),
            ocr_fixture_line(3, 't', -1, 1, 2, 0, &px),
            ocr_fixture_line(4, 'o', 5, 2, 0, 3, &px),
            ocr_fixture_line(5, 'x', -1, 2, 1, 3, &px),
        ];
        let file = write_fixture(&lines);
        let ds = load_taskar_ocr(file.path()).unwrap();
        assert_eq!(ds.instances.len(), 2);
        assert_eq!(ds.num_labels, 26);
        assert_eq!(ds.feature_dim, 128);
        assert_eq!(ds.instances[0].labels, vec![2, 0, 19]);
        assert_eq!(ds.instances[1].labels, vec![14, 23]);
        assert_eq!(ds.instances[0].fold, 0);
        assert_eq!(ds.instances[1].fold, 3);
        assert_eq!(ds.instances[0].features.rows(), 3);
        assert_eq!(ds.instances[0].features.at(0, 0), 1.0);
        assert_eq!(ds.instances[0].features.at(0, 1), 0.0);
    }

    #[test]
    fn ocr_loader_reports_line_numbers() {
        let px = vec![0u8; 128];
        let lines = vec![
            ocr_fixture_line(1, 'a', 2, 1, 0, 0, &px),
            ocr_fixture_line(7, 'b', -1, 1, 1, 0, &px),
        ];
        let file = write_fixture(&lines);
        match load_taskar_ocr(file.path()) {
            Err(Error::DataFormat { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("chain"), "{msg}");
            }
            other => panic!("expected chain error, got {other:?}"),
        }

        let mut bad_pixel = vec![0u8; 128];
        bad_pixel[5] = 2;
        let file = write_fixture(&[ocr_fixture_line(1, 'a', -1, 1, 0, 0, &bad_pixel)]);
        match load_taskar_ocr(file.path()) {
            Err(Error::DataFormat { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected pixel error, got {other:?}"),
        }

        let file = write_fixture(&["1\ta\t-1".to_string()]);
        assert!(matches!(
            load_taskar_ocr(file.path()),
            Err(Error::DataFormat { line: 1, .. })
        ));

        let file = write_fixture(&[ocr_fixture_line(1, 'a', 2, 1, 0, 0, &px)]);
        assert!(load_taskar_ocr(file.path()).is_err());
    }

    fn seq_params() -> SynthSeqParams {
        SynthSeqParams {
            seed: 7,
            count: 30,
            min_len: 3,
            max_len: 8,
            num_labels: 4,
            feature_dim: 6,
            unary_snr: 1.5,
            transition_strength: 2.0,
        }
    }

    #[test]
    fn synth_sequences_deterministic_and_valid() {
        let a = synth_sequences(&seq_params()).unwrap();
        let b = synth_sequences(&seq_params()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.instances.len(), 30);
        for inst in &a.instances {
            assert!(inst.labels.len() >= 3 && inst.labels.len() <= 8);
            assert!(inst.labels.iter().all(|&y| y < 4));
        }
        let folds: std::collections::HashSet<_> = a.instances.iter().map(|i| i.fold).collect();
        assert_eq!(folds.len(), 10);

        let mut other = seq_params();
        other.seed = 8;
        assert_ne!(synth_sequences(&other).unwrap(), a);
    }

    #[test]
    fn synth_sequences_transitions_shape_label_statistics() {
        // Strong transitions with the signal off should produce visibly
        // non-uniform bigram counts; zero-strength transitions should not.
        let strong = synth_sequences(&SynthSeqParams {
            transition_strength: 5.0,
            unary_snr: 0.0,
            count: 200,
            ..seq_params()
        })
        .unwrap();
        let mut bigrams = vec![0usize; 16];
        let mut total = 0usize;
        for inst in &strong.instances {
            for pair in inst.labels.windows(2) {
                bigrams[pair[0] * 4 + pair[1]] += 1;
                total += 1;
            }
        }
        let max_share = bigrams.iter().map(|&c| c as f64 / total as f64).fold(0.0, f64::max);
        assert!(max_share > 0.15, "expected a dominant transition, max share {max_share}");
    }

    #[test]
    fn synth_sequences_rejects_bad_params() {
        assert!(synth_sequences(&SynthSeqParams { count: 0, ..seq_params() }).is_err());
        assert!(synth_sequences(&SynthSeqParams { min_len: 5, max_len: 3, ..seq_params() }).is_err());
        assert!(synth_sequences(&SynthSeqParams { feature_dim: 2, ..seq_params() }).is_err());
        assert!(synth_sequences(&SynthSeqParams { num_labels: 1, ..seq_params() }).is_err());
    }

    fn seg_params() -> SynthSegParams {
        SynthSegParams {
            seed: 9,
            count: 12,
            height: 8,
            width: 8,
            feature_dim: 3,
            snr: 2.0,
        }
    }

    #[test]
    fn synth_segmentation_deterministic_and_valid() {
        let a = synth_segmentation(&seg_params()).unwrap();
        let b = synth_segmentation(&seg_params()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.instances.len(), 12);
        for inst in &a.instances {
            assert_eq!(inst.mask.len(), 64);
            assert!(inst.mask.iter().all(|&m| m <= 1));
        }
        // Smooth masks: both classes should appear somewhere in the set.
        let ones: usize = a.instances.iter().flat_map(|i| i.mask.iter()).sum();
        assert!(ones > 0 && ones < 12 * 64);
        assert!(synth_segmentation(&SynthSegParams { height: 1, ..seg_params() }).is_err());
    }

    #[test]
    fn masks_are_spatially_smooth() {
        // Neighboring pixels should agree far more often than chance at the
        // working image size.
        let ds = synth_segmentation(&SynthSegParams {
            height: 16,
            width: 16,
            ..seg_params()
        })
        .unwrap();
        let mut same = 0usize;
        let mut pairs = 0usize;
        for inst in &ds.instances {
            for r in 0..16 {
                for c in 0..15 {
                    same += usize::from(inst.mask[r * 16 + c] == inst.mask[r * 16 + c + 1]);
                    pairs += 1;
                }
            }
        }
        assert!(same as f64 / pairs as f64 > 0.8);
    }

    #[test]
    fn accuracy_averages_per_sequence() {
        let preds = vec![vec![1, 1, 1, 1, 1, 1], vec![0, 0]];
        let golds = vec![vec![1, 1, 1, 1, 1, 1], vec![1, 1]];
        assert_eq!(metric_accuracy(&preds, &golds).unwrap(), 0.5);

        let perfect = metric_accuracy(&golds, &golds).unwrap();
        assert_eq!(perfect, 1.0);
        assert!(metric_accuracy(&preds, &golds[..1].to_vec()).is_err());
        assert!(metric_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_invariant_to_instance_order() {
        let preds = vec![vec![1, 0, 1], vec![0, 0], vec![1, 1, 1, 1]];
        let golds = vec![vec![1, 1, 1], vec![0, 1], vec![1, 0, 1, 1]];
        let forward = metric_accuracy(&preds, &golds).unwrap();
        let rp: Vec<_> = preds.iter().rev().cloned().collect();
        let rg: Vec<_> = golds.iter().rev().cloned().collect();
        assert!((forward - metric_accuracy(&rp, &rg).unwrap()).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&forward));
    }

    #[test]
    fn iou_conventions() {
        let a = vec![vec![1, 1, 0, 0]];
        let b = vec![vec![0, 0, 1, 1]];
        assert_eq!(metric_iou(&a, &b).unwrap(), 0.0);
        assert_eq!(metric_iou(&a, &a).unwrap(), 1.0);
        let empty = vec![vec![0, 0, 0]];
        assert_eq!(metric_iou(&empty, &empty).unwrap(), 1.0);
        let half = metric_iou(&vec![vec![1, 1]], &vec![vec![1, 0]]).unwrap();
        assert!((half - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sequence_dataset_round_trip() {
        let ds = synth_sequences(&seq_params()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.bin");
        save_sequence_dataset(&path, &ds).unwrap();
        let loaded = load_sequence_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn segmentation_dataset_round_trip() {
        let ds = synth_segmentation(&seg_params()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.bin");
        save_segmentation_dataset(&path, &ds).unwrap();
        let loaded = load_segmentation_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn loader_rejects_wrong_kind_and_version() {
        let ds = synth_sequences(&seq_params()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.bin");
        save_sequence_dataset(&path, &ds).unwrap();
        assert!(load_segmentation_dataset(&path).is_err());

        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99; // version field
        let bad = dir.path().join("bad.bin");
        fs::write(&bad, &bytes).unwrap();
        assert!(load_sequence_dataset(&bad).is_err());
    }

    #[test]
    fn cache_generates_once_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let params = seq_params();
        let first = cached_synth_sequences(dir.path(), &params).unwrap();
        let name = synth_seq_cache_name(&params);
        assert!(dir.path().join(&name).exists());
        let second = cached_synth_sequences(dir.path(), &params).unwrap();
        assert_eq!(first, second);

        let seg = seg_params();
        let s1 = cached_synth_segmentation(dir.path(), &seg).unwrap();
        let s2 = cached_synth_segmentation(dir.path(), &seg).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn ocr_round_trip_through_cache_format() {
        let mut px = vec![0u8; 128];
        px[10] = 1;
        let lines = vec![
            ocr_fixture_line(1, 'h', 2, 1, 0, 5, &px),
            ocr_fixture_line(2, 'i', -1, 1, 1, 5, &px),
        ];
        let file = write_fixture(&lines);
        let ds = load_taskar_ocr(file.path()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ocr.bin");
        save_sequence_dataset(&path, &ds).unwrap();
        assert_eq!(load_sequence_dataset(&path).unwrap(), ds);
    }
}
