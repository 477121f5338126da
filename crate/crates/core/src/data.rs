//! Synthetic labeled image datasets, the two training-set manipulations,
//! forget-set sampling, and the affected-domain evaluation sets.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::Path;

/// Template value on the border ring, far below any trigger pixel.
const BORDER_LEVEL: f64 = 0.1;

/// Noise attenuation on the border ring. The ring stays dim so a
/// stamped trigger is the only salient event there, while interior
/// pixels keep full per-sample noise.
const BORDER_NOISE_SCALE: f64 = 0.35;

/// Extra appearance variability on the confusable pair. The two
/// classes are told apart by modest template deltas under heavier
/// noise, so samples with swapped labels can only be fit one by one.
const PAIR_NOISE_SCALE: f64 = 1.25;

/// Binary template levels. Every class is a random dark/bright pixel
/// pattern, so pairwise template distances concentrate tightly and
/// training quality does not swing with the draw.
const TEMPLATE_LO: f64 = 0.15;
const TEMPLATE_HI: f64 = 0.55;

/// Per-pixel offset magnitude separating the confusable pair's
/// templates from their shared base.
const PAIR_DELTA: f64 = 0.18;

/// Generator settings for the synthetic benchmark data.
///
/// Each class owns a fixed pixel template; samples are the template plus
/// Gaussian noise, clamped to [0, clamp_max]. The clamp ceiling sits
/// well below the trigger value 1.0: a trained model only picks the
/// trigger up as a feature (rather than memorizing poisoned samples
/// one by one) when the trigger is clearly out of the natural pixel
/// range. The confusable pair shares a common base pattern, which makes
/// label confusion between those two classes plausible rather than
/// trivially separable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub noise_sigma: f64,
    pub clamp_max: f64,
    pub confusable_pair: (usize, usize),
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_classes: 10,
            channels: 1,
            height: 16,
            width: 16,
            train: 3500,
            val: 1000,
            test: 1000,
            noise_sigma: 0.25,
            clamp_max: 0.8,
            confusable_pair: (3, 5),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        for (name, size) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if size < self.num_classes {
                return Err(Error::InvalidConfig(format!(
                    "{name} split of {size} cannot cover {} classes",
                    self.num_classes
                )));
            }
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("sample dimensions must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be non-negative".into()));
        }
        if !(0.0 < self.clamp_max && self.clamp_max <= 1.0) {
            return Err(Error::InvalidConfig("clamp_max must lie in (0, 1]".into()));
        }
        let (a, b) = self.confusable_pair;
        if a == b || a >= self.num_classes || b >= self.num_classes {
            return Err(Error::InvalidConfig(format!("bad confusable pair ({a}, {b})")));
        }
        Ok(())
    }

    pub fn sample_numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// A labeled split stored flat: sample i occupies
/// x[i·chw .. (i+1)·chw] in (C,H,W) row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    x: Vec<f64>,
    labels: Vec<usize>,
}

impl SampleSet {
    pub fn new(channels: usize, height: usize, width: usize, x: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let chw = channels * height * width;
        if labels.len() * chw != x.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for {} samples", labels.len() * chw, labels.len()),
                got: format!("{}", x.len()),
            });
        }
        Ok(SampleSet { channels, height, width, x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let chw = self.sample_numel();
        &self.x[i * chw..(i + 1) * chw]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let chw = self.sample_numel();
        &mut self.x[i * chw..(i + 1) * chw]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn set_label(&mut self, i: usize, y: usize) {
        self.labels[i] = y;
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gather the given rows into a (n, C, H, W) batch tensor.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let chw = self.sample_numel();
        let mut x = Vec::with_capacity(rows.len() * chw);
        let mut y = Vec::with_capacity(rows.len());
        for &i in rows {
            x.extend_from_slice(self.sample(i));
            y.push(self.labels[i]);
        }
        let t = Tensor::new(vec![rows.len(), self.channels, self.height, self.width], x)
            .expect("gathered batch is shape-consistent");
        (t, y)
    }

    /// The whole split as one batch.
    pub fn all(&self) -> (Tensor, Vec<usize>) {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.batch(&rows)
    }

    /// Subset copy, preserving row order.
    pub fn select(&self, rows: &[usize]) -> SampleSet {
        let chw = self.sample_numel();
        let mut x = Vec::with_capacity(rows.len() * chw);
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            x.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        SampleSet { channels: self.channels, height: self.height, width: self.width, x, labels }
    }

    pub fn indices_with_label(&self, y: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == y).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: SampleSet,
    pub val: SampleSet,
    pub test: SampleSet,
    pub num_classes: usize,
    pub seed: u64,
    pub gen: GenConfig,
}

/// Generate the synthetic dataset: fixed per-class templates plus
/// per-sample Gaussian noise, labels assigned round-robin so every
/// class appears in every split.
pub fn generate_dataset(gen: &GenConfig, seed: u64) -> Result<Dataset> {
    gen.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chw = gen.sample_numel();
    let (ca, cb) = gen.confusable_pair;

    // The confusable pair shares a base pattern plus small per-class
    // deltas; other classes draw independent binary patterns.
    let binary = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..chw)
            .map(|_| if rng.random::<f64>() < 0.5 { TEMPLATE_LO } else { TEMPLATE_HI })
            .collect()
    };
    let base = binary(&mut rng);
    let mut templates: Vec<Vec<f64>> = Vec::with_capacity(gen.num_classes);
    for class in 0..gen.num_classes {
        if class == ca || class == cb {
            let t = base
                .iter()
                .map(|&v| v + (rng.random::<f64>() * 2.0 * PAIR_DELTA - PAIR_DELTA))
                .collect();
            templates.push(t);
        } else {
            templates.push(binary(&mut rng));
        }
    }
    // A dim, low-noise border ring on every template keeps class signal
    // and most pixel variance out of the image margin, so a trigger
    // stamped there is the one bright event a detector can latch onto.
    let margin = (gen.height.min(gen.width) / 5).max(1);
    let noise_scale: Vec<f64> = (0..chw)
        .map(|p| {
            let y = (p / gen.width) % gen.height;
            let x = p % gen.width;
            let inside = y >= margin
                && y < gen.height - margin
                && x >= margin
                && x < gen.width - margin;
            if inside {
                1.0
            } else {
                BORDER_NOISE_SCALE
            }
        })
        .collect();
    for t in templates.iter_mut() {
        for (p, v) in t.iter_mut().enumerate() {
            if noise_scale[p] < 1.0 {
                *v = BORDER_LEVEL;
            }
        }
    }

    let noise = if gen.noise_sigma > 0.0 {
        Some(Normal::new(0.0, gen.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?)
    } else {
        None
    };
    let mut make_split = |count: usize| -> SampleSet {
        let mut x = Vec::with_capacity(count * chw);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let y = i % gen.num_classes;
            labels.push(y);
            let class_scale = if y == ca || y == cb { PAIR_NOISE_SCALE } else { 1.0 };
            for (p, &t) in templates[y].iter().enumerate() {
                let v = match &noise {
                    Some(n) => t + n.sample(&mut rng) * noise_scale[p] * class_scale,
                    None => t,
                };
                x.push(v.clamp(0.0, gen.clamp_max));
            }
        }
        SampleSet { channels: gen.channels, height: gen.height, width: gen.width, x, labels }
    };

    let train = make_split(gen.train);
    let val = make_split(gen.val);
    let test = make_split(gen.test);
    Ok(Dataset { train, val, test, num_classes: gen.num_classes, seed, gen: gen.clone() })
}

// ── Manipulations ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipKind {
    Poison,
    InterclassConfusion,
}

impl std::fmt::Display for ManipKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ManipKind::Poison => write!(f, "poison"),
            ManipKind::InterclassConfusion => write!(f, "interclass_confusion"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationSpec {
    pub kind: ManipKind,
    /// Manipulation size |S_m|.
    pub n: usize,
    pub seed: u64,
    /// Poison: class every triggered sample is relabeled to.
    pub target_class: usize,
    /// Confusion: the swapped class pair.
    pub class_a: usize,
    pub class_b: usize,
}

impl ManipulationSpec {
    pub fn poison(n: usize, seed: u64) -> Self {
        ManipulationSpec {
            kind: ManipKind::Poison,
            n,
            seed,
            target_class: 0,
            class_a: 3,
            class_b: 5,
        }
    }

    pub fn interclass_confusion(n: usize, seed: u64) -> Self {
        ManipulationSpec {
            kind: ManipKind::InterclassConfusion,
            n,
            seed,
            target_class: 0,
            class_a: 3,
            class_b: 5,
        }
    }
}

/// Trigger pixel positions for an (h, w) grid: max(1, ceil(0.003·h·w))
/// pixels filling the bottom-right corner, scanning right-to-left then
/// bottom-to-top, never leaving the bottom-right quadrant.
pub fn trigger_pixels(h: usize, w: usize) -> Vec<(usize, usize)> {
    let count = ((0.003 * (h * w) as f64).ceil() as usize).max(1);
    let mut out = Vec::with_capacity(count);
    'fill: for y in (h / 2..h).rev() {
        for x in (w / 2..w).rev() {
            out.push((y, x));
            if out.len() == count {
                break 'fill;
            }
        }
    }
    out
}

pub fn stamp_trigger(sample: &mut [f64], channels: usize, h: usize, w: usize, pixels: &[(usize, usize)]) {
    for &(y, x) in pixels {
        for c in 0..channels {
            sample[c * h * w + y * w + x] = 1.0;
        }
    }
}

/// Per-train-sample manipulation record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub manipulated: bool,
    pub original_label: usize,
    pub in_forget_set: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManipulatedDataset {
    pub data: Dataset,
    pub provenance: Vec<Provenance>,
    pub spec: ManipulationSpec,
}

impl ManipulatedDataset {
    pub fn manipulated_indices(&self) -> Vec<usize> {
        (0..self.provenance.len()).filter(|&i| self.provenance[i].manipulated).collect()
    }

    pub fn forget_indices(&self) -> Vec<usize> {
        (0..self.provenance.len()).filter(|&i| self.provenance[i].in_forget_set).collect()
    }

    /// Train rows with in_forget_set == false (S_tr \ S_f).
    pub fn retained_indices(&self) -> Vec<usize> {
        (0..self.provenance.len()).filter(|&i| !self.provenance[i].in_forget_set).collect()
    }

    /// The identified forget set with its training-time labels.
    pub fn forget_set(&self) -> SampleSet {
        self.data.train.select(&self.forget_indices())
    }

    pub fn retained_set(&self) -> SampleSet {
        self.data.train.select(&self.retained_indices())
    }
}

fn untouched_provenance(data: &Dataset) -> Vec<Provenance> {
    data.train
        .labels()
        .iter()
        .map(|&y| Provenance { manipulated: false, original_label: y, in_forget_set: false })
        .collect()
}

/// Trigger poisoning: n seeded-uniform train samples get the trigger
/// pixels set to 1.0 and their label forced to the target class.
pub fn apply_badnet(data: &Dataset, spec: &ManipulationSpec) -> Result<ManipulatedDataset> {
    if spec.kind != ManipKind::Poison {
        return Err(Error::InvalidConfig(format!("apply_badnet got {:?}", spec.kind)));
    }
    if spec.n > data.train.len() {
        return Err(Error::InsufficientSamples(format!(
            "cannot poison {} of {} train samples",
            spec.n,
            data.train.len()
        )));
    }
    if spec.target_class >= data.num_classes {
        return Err(Error::LabelOutOfRange { label: spec.target_class, num_classes: data.num_classes });
    }
    let mut out = data.clone();
    let mut provenance = untouched_provenance(data);
    let pixels = trigger_pixels(data.train.height, data.train.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chosen = sample_indices(&mut rng, data.train.len(), spec.n);
    let (channels, h, w) = (data.train.channels, data.train.height, data.train.width);
    for i in chosen {
        stamp_trigger(out.train.sample_mut(i), channels, h, w, &pixels);
        out.train.set_label(i, spec.target_class);
        provenance[i].manipulated = true;
    }
    Ok(ManipulatedDataset { data: out, provenance, spec: spec.clone() })
}

/// Label confusion: n/2 seeded-uniform samples of class A are relabeled
/// B and vice versa; features stay untouched.
pub fn apply_interclass_confusion(
    data: &Dataset,
    spec: &ManipulationSpec,
) -> Result<ManipulatedDataset> {
    if spec.kind != ManipKind::InterclassConfusion {
        return Err(Error::InvalidConfig(format!("apply_interclass_confusion got {:?}", spec.kind)));
    }
    if spec.n % 2 != 0 {
        return Err(Error::InvalidConfig(format!("confusion size {} must be even", spec.n)));
    }
    if spec.class_a == spec.class_b
        || spec.class_a >= data.num_classes
        || spec.class_b >= data.num_classes
    {
        return Err(Error::InvalidConfig(format!(
            "bad class pair ({}, {})",
            spec.class_a, spec.class_b
        )));
    }
    let half = spec.n / 2;
    let mut out = data.clone();
    let mut provenance = untouched_provenance(data);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for (from, to) in [(spec.class_a, spec.class_b), (spec.class_b, spec.class_a)] {
        let pool = data.train.indices_with_label(from);
        if pool.len() < half {
            return Err(Error::InsufficientSamples(format!(
                "class {from} has {} train samples, need {half}",
                pool.len()
            )));
        }
        for pick in sample_indices(&mut rng, pool.len(), half) {
            let i = pool[pick];
            out.train.set_label(i, to);
            provenance[i].manipulated = true;
        }
    }
    Ok(ManipulatedDataset { data: out, provenance, spec: spec.clone() })
}

/// Mark round(fraction·|S_m|) manipulated samples as the identified
/// forget set. Prior flags are cleared first, so fractions can be swept
/// over one manipulated dataset.
pub fn sample_forget_set(
    md: &ManipulatedDataset,
    fraction: f64,
    seed: u64,
) -> Result<ManipulatedDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidFraction(fraction));
    }
    let manipulated = md.manipulated_indices();
    if manipulated.is_empty() {
        return Err(Error::EmptySet("manipulated set".into()));
    }
    let count = ((fraction * manipulated.len() as f64).round() as usize)
        .clamp(1, manipulated.len());
    let mut out = md.clone();
    for p in &mut out.provenance {
        p.in_forget_set = false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for pick in sample_indices(&mut rng, manipulated.len(), count) {
        out.provenance[manipulated[pick]].in_forget_set = true;
    }
    Ok(out)
}

/// Evaluation sets over the affected domain.
#[derive(Clone, Debug)]
pub struct AffectedDomainSets {
    /// Affected-domain test samples with clean labels: the full test
    /// set with the trigger stamped in (poison), or the test samples of
    /// the two confused classes (confusion).
    pub dm_test: SampleSet,
    /// Test samples outside the affected domain: the untriggered test
    /// set (poison) or the remaining classes (confusion).
    pub utility_test: SampleSet,
    /// The manipulated train samples, features as trained on, paired
    /// with their original labels.
    pub sm_clean: SampleSet,
}

pub fn build_affected_sets(md: &ManipulatedDataset) -> AffectedDomainSets {
    let test = &md.data.test;
    let (dm_test, utility_test) = match md.spec.kind {
        ManipKind::Poison => {
            let mut triggered = test.clone();
            let pixels = trigger_pixels(test.height, test.width);
            for i in 0..triggered.len() {
                let (c, h, w) = (triggered.channels, triggered.height, triggered.width);
                stamp_trigger(triggered.sample_mut(i), c, h, w, &pixels);
            }
            (triggered, test.clone())
        }
        ManipKind::InterclassConfusion => {
            let (a, b) = (md.spec.class_a, md.spec.class_b);
            let affected: Vec<usize> =
                (0..test.len()).filter(|&i| test.label(i) == a || test.label(i) == b).collect();
            let rest: Vec<usize> =
                (0..test.len()).filter(|&i| test.label(i) != a && test.label(i) != b).collect();
            (test.select(&affected), test.select(&rest))
        }
    };
    let manipulated = md.manipulated_indices();
    let mut sm_clean = md.data.train.select(&manipulated);
    for (row, &i) in manipulated.iter().enumerate() {
        sm_clean.set_label(row, md.provenance[i].original_label);
    }
    AffectedDomainSets { dm_test, utility_test, sm_clean }
}

// ── Dataset container ────────────────────────────────────────────────
//
// Layout (little-endian):
//   magic "CMUD" | u32 version | u64 seed | u32 num_classes |
//   u32 channels | u32 height | u32 width |
//   u64 train count | u64 val count | u64 test count |
//   per split: samples as f64 LE, then labels as u32 LE |
//   u8 manipulation flag | if set: u32 spec JSON length | spec JSON |
//   per train sample: u8 manipulated | u32 original label | u8 in
//   forget set.

const DATASET_MAGIC: &[u8; 4] = b"CMUD";
const DATASET_VERSION: u32 = 1;

pub fn save_dataset(md: &ManipulatedDataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = &md.data;
    f.write_all(DATASET_MAGIC)?;
    f.write_all(&DATASET_VERSION.to_le_bytes())?;
    f.write_all(&d.seed.to_le_bytes())?;
    for v in [d.num_classes, d.train.channels, d.train.height, d.train.width] {
        f.write_all(&(v as u32).to_le_bytes())?;
    }
    for split in [&d.train, &d.val, &d.test] {
        f.write_all(&(split.len() as u64).to_le_bytes())?;
    }
    for split in [&d.train, &d.val, &d.test] {
        for v in &split.x {
            f.write_all(&v.to_le_bytes())?;
        }
        for &y in split.labels() {
            f.write_all(&(y as u32).to_le_bytes())?;
        }
    }
    f.write_all(&[1u8])?;
    let spec_json = serde_json::to_vec(&md.spec)?;
    f.write_all(&(spec_json.len() as u32).to_le_bytes())?;
    f.write_all(&spec_json)?;
    for p in &md.provenance {
        f.write_all(&[p.manipulated as u8])?;
        f.write_all(&(p.original_label as u32).to_le_bytes())?;
        f.write_all(&[p.in_forget_set as u8])?;
    }
    f.into_inner().map_err(|e| Error::Format(format!("dataset flush: {e}")))?.sync_all()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<ManipulatedDataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset container (bad magic)".into()));
    }
    let version = read_u32(&mut f)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let seed = read_u64(&mut f)?;
    let num_classes = read_u32(&mut f)? as usize;
    let channels = read_u32(&mut f)? as usize;
    let height = read_u32(&mut f)? as usize;
    let width = read_u32(&mut f)? as usize;
    let counts = [read_u64(&mut f)? as usize, read_u64(&mut f)? as usize, read_u64(&mut f)? as usize];
    let chw = channels * height * width;
    let mut splits = Vec::with_capacity(3);
    for count in counts {
        let mut x = vec![0.0f64; count * chw];
        let mut buf = [0u8; 8];
        for v in &mut x {
            f.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            labels.push(read_u32(&mut f)? as usize);
        }
        splits.push(SampleSet::new(channels, height, width, x, labels)?);
    }
    let test = splits.pop().expect("three splits read");
    let val = splits.pop().expect("three splits read");
    let train = splits.pop().expect("three splits read");
    let mut flag = [0u8; 1];
    f.read_exact(&mut flag)?;
    if flag[0] != 1 {
        return Err(Error::Format("container carries no manipulation record".into()));
    }
    let spec_len = read_u32(&mut f)? as usize;
    let mut spec_json = vec![0u8; spec_len];
    f.read_exact(&mut spec_json)?;
    let spec: ManipulationSpec = serde_json::from_slice(&spec_json)?;
    let mut provenance = Vec::with_capacity(counts[0]);
    for _ in 0..counts[0] {
        let mut rec = [0u8; 1];
        f.read_exact(&mut rec)?;
        let manipulated = rec[0] != 0;
        let original_label = read_u32(&mut f)? as usize;
        f.read_exact(&mut rec)?;
        let in_forget_set = rec[0] != 0;
        provenance.push(Provenance { manipulated, original_label, in_forget_set });
    }
    let gen = GenConfig {
        num_classes,
        channels,
        height,
        width,
        train: counts[0],
        val: counts[1],
        test: counts[2],
        ..GenConfig::default()
    };
    let data = Dataset { train, val, test, num_classes, seed, gen };
    Ok(ManipulatedDataset { data, provenance, spec })
}

fn read_u32(f: &mut impl std::io::Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(f: &mut impl std::io::Read) -> Result<u64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_gen() -> GenConfig {
        GenConfig { train: 200, val: 40, test: 40, ..GenConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_gen(), 3).unwrap();
        let b = generate_dataset(&small_gen(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small_gen(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_noise_reproduces_templates() {
        let gen = GenConfig { noise_sigma: 0.0, ..small_gen() };
        let d = generate_dataset(&gen, 1).unwrap();
        // All samples of one class are identical.
        let rows = d.train.indices_with_label(2);
        for &i in &rows[1..] {
            assert_eq!(d.train.sample(i), d.train.sample(rows[0]));
        }
    }

    #[test]
    fn every_class_in_every_split_and_values_bounded() {
        let d = generate_dataset(&small_gen(), 9).unwrap();
        for split in [&d.train, &d.val, &d.test] {
            for class in 0..d.num_classes {
                assert!(!split.indices_with_label(class).is_empty());
            }
            assert!(split.x.iter().all(|&v| (0.0..=small_gen().clamp_max).contains(&v)));
        }
        assert_eq!(d.train.len(), 200);
        assert_eq!(d.val.len(), 40);
        assert_eq!(d.test.len(), 40);
    }

    #[test]
    fn trigger_is_one_corner_pixel_on_16x16() {
        let px = trigger_pixels(16, 16);
        assert_eq!(px, vec![(15, 15)]);
        // Larger grids grow the trigger but stay in the corner quadrant.
        let px = trigger_pixels(32, 32);
        assert_eq!(px.len(), 4);
        assert!(px.iter().all(|&(y, x)| y >= 16 && x >= 16));
    }

    #[test]
    fn badnet_marks_and_relabels_exactly_n() {
        let d = generate_dataset(&small_gen(), 5).unwrap();
        let spec = ManipulationSpec::poison(20, 11);
        let md = apply_badnet(&d, &spec).unwrap();
        let marked = md.manipulated_indices();
        assert_eq!(marked.len(), 20);
        for &i in &marked {
            assert_eq!(md.data.train.label(i), 0);
            assert_eq!(md.data.train.sample(i)[15 * 16 + 15], 1.0);
            assert_eq!(md.provenance[i].original_label, d.train.label(i));
        }
        // Untouched rows are bit-identical.
        for i in 0..d.train.len() {
            if !md.provenance[i].manipulated {
                assert_eq!(md.data.train.sample(i), d.train.sample(i));
                assert_eq!(md.data.train.label(i), d.train.label(i));
            }
        }
    }

    #[test]
    fn badnet_rejects_oversized_n() {
        let d = generate_dataset(&small_gen(), 5).unwrap();
        assert!(apply_badnet(&d, &ManipulationSpec::poison(201, 0)).is_err());
    }

    #[test]
    fn confusion_swaps_labels_only() {
        let d = generate_dataset(&small_gen(), 6).unwrap();
        let spec = ManipulationSpec::interclass_confusion(20, 13);
        let md = apply_interclass_confusion(&d, &spec).unwrap();
        let marked = md.manipulated_indices();
        assert_eq!(marked.len(), 20);
        let mut from_a = 0;
        let mut from_b = 0;
        for &i in &marked {
            let orig = md.provenance[i].original_label;
            let now = md.data.train.label(i);
            match (orig, now) {
                (3, 5) => from_a += 1,
                (5, 3) => from_b += 1,
                other => panic!("unexpected swap {other:?}"),
            }
            // Features untouched.
            assert_eq!(md.data.train.sample(i), d.train.sample(i));
        }
        assert_eq!(from_a, 10);
        assert_eq!(from_b, 10);
    }

    #[test]
    fn confusion_rejects_odd_n() {
        let d = generate_dataset(&small_gen(), 6).unwrap();
        assert!(apply_interclass_confusion(&d, &ManipulationSpec::interclass_confusion(21, 0)).is_err());
    }

    #[test]
    fn forget_set_is_subset_of_manipulated() {
        let d = generate_dataset(&small_gen(), 7).unwrap();
        let md = apply_badnet(&d, &ManipulationSpec::poison(50, 1)).unwrap();
        let with_f = sample_forget_set(&md, 0.1, 2).unwrap();
        let forget = with_f.forget_indices();
        assert_eq!(forget.len(), 5);
        for &i in &forget {
            assert!(with_f.provenance[i].manipulated);
        }
        // Same seed reproduces membership; full fraction takes all.
        assert_eq!(sample_forget_set(&md, 0.1, 2).unwrap().forget_indices(), forget);
        assert_eq!(sample_forget_set(&md, 1.0, 9).unwrap().forget_indices().len(), 50);
        // Resampling clears prior flags.
        let resampled = sample_forget_set(&with_f, 0.2, 3).unwrap();
        assert_eq!(resampled.forget_indices().len(), 10);
        assert!(sample_forget_set(&md, 0.0, 0).is_err());
        assert!(sample_forget_set(&md, 1.1, 0).is_err());
    }

    #[test]
    fn affected_sets_for_poison() {
        let d = generate_dataset(&small_gen(), 8).unwrap();
        let md = apply_badnet(&d, &ManipulationSpec::poison(30, 3)).unwrap();
        let sets = build_affected_sets(&md);
        assert_eq!(sets.dm_test.len(), 40);
        assert_eq!(sets.utility_test.len(), 40);
        assert_eq!(sets.sm_clean.len(), 30);
        for i in 0..sets.dm_test.len() {
            // Triggered features, clean labels.
            assert_eq!(sets.dm_test.sample(i)[15 * 16 + 15], 1.0);
            assert_eq!(sets.dm_test.label(i), d.test.label(i));
            // dm and utility features differ exactly on the trigger pixel.
            let diff: Vec<usize> = (0..256)
                .filter(|&j| sets.dm_test.sample(i)[j] != sets.utility_test.sample(i)[j])
                .collect();
            assert_eq!(diff, vec![15 * 16 + 15]);
        }
        // sm_clean keeps the trigger but restores pre-poison labels.
        let marked = md.manipulated_indices();
        for i in 0..sets.sm_clean.len() {
            assert_eq!(sets.sm_clean.sample(i)[15 * 16 + 15], 1.0);
            assert_eq!(sets.sm_clean.label(i), d.train.label(marked[i]));
        }
    }

    #[test]
    fn affected_sets_for_confusion() {
        let d = generate_dataset(&small_gen(), 9).unwrap();
        let md =
            apply_interclass_confusion(&d, &ManipulationSpec::interclass_confusion(16, 4)).unwrap();
        let sets = build_affected_sets(&md);
        assert_eq!(sets.dm_test.len(), 8);
        assert_eq!(sets.utility_test.len(), 32);
        assert!(sets.dm_test.labels().iter().all(|&y| y == 3 || y == 5));
        assert!(sets.utility_test.labels().iter().all(|&y| y != 3 && y != 5));
        // sm_clean carries the original labels.
        assert!(sets.sm_clean.labels().iter().all(|&y| y == 3 || y == 5));
    }

    #[test]
    fn container_roundtrip() {
        let gen = GenConfig { train: 60, val: 20, test: 20, ..GenConfig::default() };
        let d = generate_dataset(&gen, 21).unwrap();
        let md = apply_badnet(&d, &ManipulationSpec::poison(10, 5)).unwrap();
        let md = sample_forget_set(&md, 0.5, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.cmud");
        save_dataset(&md, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.data.train, md.data.train);
        assert_eq!(back.data.val, md.data.val);
        assert_eq!(back.data.test, md.data.test);
        assert_eq!(back.provenance, md.provenance);
        assert_eq!(back.spec, md.spec);
    }
}
