//! Classifier architectures with a flat parameter registry.
//!
//! Two desk-scale architectures: a one-hidden-layer MLP and a two-block
//! CNN (conv 3x3 → relu → pool, twice, then a linear head). The CNN
//! keeps spatial locality, so a small pixel trigger stays learnable by
//! few weights; the MLP is the contrast model.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{conv2d, matmul, maxpool2, ConvDims, Tensor};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    /// Flattened input → hidden (ReLU) → classes.
    Mlp { input: usize, hidden: usize, num_classes: usize },
    /// (in_ch, h, w) input → conv c1 → pool → conv c2 → pool → classes.
    Cnn { in_ch: usize, h: usize, w: usize, c1: usize, c2: usize, num_classes: usize },
}

impl Arch {
    pub fn num_classes(&self) -> usize {
        match self {
            Arch::Mlp { num_classes, .. } | Arch::Cnn { num_classes, .. } => *num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Arch::Mlp { input, hidden, num_classes } => input > 0 && hidden > 0 && num_classes > 1,
            Arch::Cnn { in_ch, h, w, c1, c2, num_classes } => {
                in_ch > 0
                    && c1 > 0
                    && c2 > 0
                    && num_classes > 1
                    && h % 4 == 0
                    && w % 4 == 0
                    && h >= 4
                    && w >= 4
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArch(format!("{self:?}")))
        }
    }

    /// Layer shapes in registry order: (name, shape, fan_in).
    fn layers(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        match *self {
            Arch::Mlp { input, hidden, num_classes } => vec![
                ("fc1.weight", vec![input, hidden], input),
                ("fc1.bias", vec![hidden], input),
                ("head.weight", vec![hidden, num_classes], hidden),
                ("head.bias", vec![num_classes], hidden),
            ],
            Arch::Cnn { in_ch, h, w, c1, c2, num_classes } => {
                let flat = c2 * (h / 4) * (w / 4);
                vec![
                    ("conv1.weight", vec![c1, in_ch, 3, 3], in_ch * 9),
                    ("conv1.bias", vec![c1], in_ch * 9),
                    ("conv2.weight", vec![c2, c1, 3, 3], c1 * 9),
                    ("conv2.bias", vec![c2], c1 * 9),
                    ("head.weight", vec![flat, num_classes], flat),
                    ("head.bias", vec![num_classes], flat),
                ]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub params: IndexMap<String, Tensor>,
    pub seed: u64,
}

/// Uniform init in [−1/√fan_in, +1/√fan_in], seed-derived.
pub fn build_model(arch: &Arch, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::new();
    for (name, shape, fan_in) in arch.layers() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> =
            (0..numel).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect();
        params.insert(name.to_string(), Tensor::new(shape, data)?);
    }
    Ok(Model { arch: arch.clone(), params, seed })
}

impl Model {
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Reshape a batch to what the architecture expects; MLP accepts
    /// either (n, d) or (n, c, h, w) with matching flat size.
    fn check_input(&self, inputs: &Tensor) -> Result<usize> {
        let s = inputs.shape();
        let n = *s.first().unwrap_or(&0);
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let per_sample: usize = s[1..].iter().product();
        match &self.arch {
            Arch::Mlp { input, .. } if per_sample == *input => Ok(n),
            Arch::Cnn { in_ch, h, w, .. }
                if s.len() == 4 && s[1] == *in_ch && s[2] == *h && s[3] == *w =>
            {
                Ok(n)
            }
            _ => Err(Error::ShapeMismatch {
                expected: format!("input compatible with {:?}", self.arch),
                got: format!("{s:?}"),
            }),
        }
    }

    /// Plain logits, no tape. Shares the kernels the tape records.
    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let n = self.check_input(inputs)?;
        match self.arch {
            Arch::Mlp { input, hidden, num_classes } => {
                let h1 = matmul(inputs.data(), self.params["fc1.weight"].data(), n, input, hidden);
                let mut h1 = add_bias_rows(h1, self.params["fc1.bias"].data(), n, hidden);
                for v in &mut h1 {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                let out = matmul(&h1, self.params["head.weight"].data(), n, hidden, num_classes);
                let out = add_bias_rows(out, self.params["head.bias"].data(), n, num_classes);
                Tensor::new(vec![n, num_classes], out)
            }
            Arch::Cnn { in_ch, h, w, c1, c2, num_classes } => {
                let d1 = ConvDims { batch: n, in_ch, out_ch: c1, h, w, kh: 3, kw: 3, pad: 1 };
                let mut a1 = conv2d(
                    inputs.data(),
                    self.params["conv1.weight"].data(),
                    self.params["conv1.bias"].data(),
                    &d1,
                );
                for v in &mut a1 {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                let (p1, _) = maxpool2(&a1, n * c1, h, w);
                let (h2, w2) = (h / 2, w / 2);
                let d2 = ConvDims { batch: n, in_ch: c1, out_ch: c2, h: h2, w: w2, kh: 3, kw: 3, pad: 1 };
                let mut a2 = conv2d(
                    &p1,
                    self.params["conv2.weight"].data(),
                    self.params["conv2.bias"].data(),
                    &d2,
                );
                for v in &mut a2 {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                let (p2, _) = maxpool2(&a2, n * c2, h2, w2);
                let flat = c2 * (h / 4) * (w / 4);
                let out = matmul(&p2, self.params["head.weight"].data(), n, flat, num_classes);
                let out = add_bias_rows(out, self.params["head.bias"].data(), n, num_classes);
                Tensor::new(vec![n, num_classes], out)
            }
        }
    }

    /// Record the forward pass on a tape. Returns the logits node and
    /// the parameter leaves in registry order.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        inputs: &Tensor,
    ) -> Result<(NodeId, IndexMap<String, NodeId>)> {
        let n = self.check_input(inputs)?;
        let mut leaves = IndexMap::new();
        for (name, p) in &self.params {
            leaves.insert(name.clone(), tape.leaf(p.clone()));
        }
        let logits = match self.arch {
            Arch::Mlp { input, .. } => {
                let x = tape.leaf(Tensor::new(
                    vec![n, input],
                    inputs.data().to_vec(),
                )?);
                let h = tape.matmul(x, leaves["fc1.weight"])?;
                let h = tape.add_bias(h, leaves["fc1.bias"])?;
                let h = tape.relu(h);
                let h = tape.matmul(h, leaves["head.weight"])?;
                tape.add_bias(h, leaves["head.bias"])?
            }
            Arch::Cnn { .. } => {
                let x = tape.leaf(inputs.clone());
                let h = tape.conv2d(x, leaves["conv1.weight"], leaves["conv1.bias"], 1)?;
                let h = tape.relu(h);
                let h = tape.maxpool2(h)?;
                let h = tape.conv2d(h, leaves["conv2.weight"], leaves["conv2.bias"], 1)?;
                let h = tape.relu(h);
                let h = tape.maxpool2(h)?;
                let h = tape.flatten(h)?;
                let h = tape.matmul(h, leaves["head.weight"])?;
                tape.add_bias(h, leaves["head.bias"])?
            }
        };
        Ok((logits, leaves))
    }
}

fn add_bias_rows(mut x: Vec<f64>, bias: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    for i in 0..rows {
        for (v, b) in x[i * cols..(i + 1) * cols].iter_mut().zip(bias) {
            *v += b;
        }
    }
    x
}

/// Argmax labels per logits row; ties take the lowest class index.
pub fn predict(model: &Model, inputs: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let logits = model.forward(inputs)?;
    let labels = argmax_rows(&logits);
    Ok((logits, labels))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let n = logits.rows();
    (0..n)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Bijection between flat coordinates [0, P) and (name, offset) pairs.
#[derive(Clone, Debug)]
pub struct ParamIndex {
    entries: Vec<(String, usize, usize)>, // name, flat start, len
    total: usize,
}

impl ParamIndex {
    pub fn total(&self) -> usize {
        self.total
    }

    /// (parameter name, offset within it) for a flat coordinate.
    pub fn locate(&self, flat: usize) -> Result<(&str, usize)> {
        let i = self
            .entries
            .partition_point(|(_, start, _)| *start <= flat)
            .checked_sub(1)
            .ok_or_else(|| Error::InvalidConfig(format!("flat index {flat} out of range")))?;
        let (name, start, len) = &self.entries[i];
        if flat < start + len {
            Ok((name, flat - start))
        } else {
            Err(Error::InvalidConfig(format!("flat index {flat} out of range")))
        }
    }

    pub fn flat_start(&self, name: &str) -> Option<usize> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, s, _)| *s)
    }
}

pub fn flatten_params(model: &Model) -> (Vec<f64>, ParamIndex) {
    let mut flat = Vec::with_capacity(model.num_params());
    let mut entries = Vec::with_capacity(model.params.len());
    for (name, p) in &model.params {
        entries.push((name.clone(), flat.len(), p.numel()));
        flat.extend_from_slice(p.data());
    }
    let total = flat.len();
    (flat, ParamIndex { entries, total })
}

/// Rebuild a model from a flat vector in registry order.
pub fn unflatten_params(model: &Model, flat: &[f64]) -> Result<Model> {
    if flat.len() != model.num_params() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} flat parameters", model.num_params()),
            got: format!("{}", flat.len()),
        });
    }
    let mut out = model.clone();
    let mut off = 0;
    for p in out.params.values_mut() {
        let n = p.numel();
        p.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(out)
}

// ── Checkpoint container ─────────────────────────────────────────────
//
// Layout (little-endian):
//   magic "CMCK" | u32 version | u64 seed | u32 arch JSON length |
//   arch JSON (serde) | u64 param count | params as f64 LE in
//   registry order.

const CHECKPOINT_MAGIC: &[u8; 4] = b"CMCK";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&model.seed.to_le_bytes())?;
    let arch_json = serde_json::to_vec(&model.arch)?;
    f.write_all(&(arch_json.len() as u32).to_le_bytes())?;
    f.write_all(&arch_json)?;
    f.write_all(&(model.num_params() as u64).to_le_bytes())?;
    for p in model.params.values() {
        for v in p.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.into_inner().map_err(|e| Error::Format(format!("checkpoint flush: {e}")))?.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut f)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let seed = read_u64(&mut f)?;
    let arch_len = read_u32(&mut f)? as usize;
    let mut arch_json = vec![0u8; arch_len];
    f.read_exact(&mut arch_json)?;
    let arch: Arch = serde_json::from_slice(&arch_json)?;
    let count = read_u64(&mut f)? as usize;
    let mut model = build_model(&arch, seed)?;
    if count != model.num_params() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, arch needs {}",
            model.num_params()
        )));
    }
    let mut buf = [0u8; 8];
    for p in model.params.values_mut() {
        for v in p.data_mut() {
            f.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok(model)
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
