//! Per-representation students: feature assembly, a two-layer tanh
//! classifier with hand-derived gradients, and SGD with momentum.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::data::{Label, PointCloud};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::repr::{cell_features, project, ReprConfig, ReprMapping, CELL_CHANNELS};
use crate::rng::SeedStreams;

pub const POINT_CHANNELS: usize = 5;
pub const FEATURES: usize = POINT_CHANNELS + CELL_CHANNELS;
pub const DEFAULT_HIDDEN: usize = 32;
pub const MOMENTUM: f64 = 0.9;

// Fixed per-channel scales keep tanh out of saturation for scenes tens of
// meters across.
const POINT_SCALE: [f64; POINT_CHANNELS] = [0.1, 0.1, 0.5, 1.0, 0.1];
const CELL_SCALE: [f64; CELL_CHANNELS] = [0.1, 0.1, 0.5, 1.0, 0.5, 0.1];

/// Per-point input rows: scaled (x, y, z, intensity, range) followed by the
/// scaled channels of the point's cell. Out-of-grid points get zero cell channels.
pub fn assemble_features(cloud: &PointCloud, mapping: &ReprMapping) -> Matrix {
    let cells = cell_features(cloud, mapping);
    let mut x = Matrix::zeros(cloud.len(), FEATURES);
    for (i, p) in cloud.points().iter().enumerate() {
        let row = x.row_mut(i);
        let pc = [
            f64::from(p.x),
            f64::from(p.y),
            f64::from(p.z),
            f64::from(p.intensity),
            p.range(),
        ];
        for c in 0..POINT_CHANNELS {
            row[c] = pc[c] * POINT_SCALE[c];
        }
        if let Some(s) = mapping.point_slot(i) {
            for c in 0..CELL_CHANNELS {
                row[POINT_CHANNELS + c] = cells[s][c] * CELL_SCALE[c];
            }
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Params {
    pub fn zeros(features: usize, hidden: usize, classes: usize) -> Self {
        Self {
            w1: Matrix::zeros(features, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, classes),
            b2: vec![0.0; classes],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w1.rows(), self.w1.cols(), self.w2.cols())
    }

    /// All values in checkpoint order: W1, b1, W2, b2.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .as_slice()
            .iter()
            .chain(&self.b1)
            .chain(self.w2.as_slice())
            .chain(&self.b2)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .as_mut_slice()
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.as_mut_slice().iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutput {
    pub logits: Matrix,
    pub probs: Matrix,
    pub predictions: Vec<Label>,
    pub confidence: Vec<f64>,
}

impl StudentOutput {
    fn from_logits(logits: Matrix) -> Self {
        let probs = logits.softmax_rows();
        let (predictions, confidence) = (0..probs.rows())
            .map(|i| {
                // first maximum wins
                let (arg, max) = probs
                    .row(i)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (j, &p)| if p > acc.1 { (j, p) } else { acc });
                (arg as Label, max)
            })
            .unzip();
        Self {
            logits,
            probs,
            predictions,
            confidence,
        }
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

/// `f64::tanh` through a single `exp`, about twice as fast; relative error
/// stays below 1e-12.
fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 1e-3 {
        let x2 = x * x;
        return x * (1.0 - x2 * (1.0 / 3.0 - x2 * (2.0 / 15.0)));
    }
    if a > 20.0 {
        return x.signum();
    }
    let e = (-2.0 * a).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// Forward pass with the intermediates needed for backward.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub mapping: ReprMapping,
    pub features: Matrix,
    pub hidden: Matrix,
    pub output: StudentOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub id: u32,
    pub repr: ReprConfig,
    pub params: Params,
    momentum: Params,
}

impl StudentModel {
    /// Uniform init in ±sqrt(1 / fan_in) per layer from the student's own stream.
    pub fn new(id: u32, repr: ReprConfig, hidden: usize, classes: usize, streams: &SeedStreams) -> Result<Self> {
        repr.validate()?;
        if hidden == 0 || classes < 2 {
            return Err(Error::Config(format!(
                "student needs hidden >= 1 and classes >= 2 (got {hidden}, {classes})"
            )));
        }
        let mut rng = streams.stream("init", u64::from(id));
        let mut params = Params::zeros(FEATURES, hidden, classes);
        let a1 = (1.0 / FEATURES as f64).sqrt();
        let a2 = (1.0 / hidden as f64).sqrt();
        for v in params.w1.as_mut_slice().iter_mut().chain(params.b1.iter_mut()) {
            *v = rng.gen_range(-a1..=a1);
        }
        for v in params.w2.as_mut_slice().iter_mut().chain(params.b2.iter_mut()) {
            *v = rng.gen_range(-a2..=a2);
        }
        Ok(Self::from_params(id, repr, params))
    }

    pub fn from_params(id: u32, repr: ReprConfig, params: Params) -> Self {
        let (f, h, k) = params.dims();
        Self {
            id,
            repr,
            params,
            momentum: Params::zeros(f, h, k),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.params.b2.len()
    }

    pub fn hidden(&self) -> usize {
        self.params.b1.len()
    }

    pub fn momentum(&self) -> &Params {
        &self.momentum
    }

    pub fn forward(&self, cloud: &PointCloud) -> Result<ForwardPass> {
        let mapping = project(cloud, &self.repr)?;
        let features = assemble_features(cloud, &mapping);
        let (hidden, logits) = self.forward_features(&features);
        Ok(ForwardPass {
            mapping,
            features,
            hidden,
            output: StudentOutput::from_logits(logits),
        })
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<StudentOutput> {
        Ok(self.forward(cloud)?.output)
    }

    /// Returns (tanh activations, logits).
    pub fn forward_features(&self, x: &Matrix) -> (Matrix, Matrix) {
        let Params { w1, b1, w2, b2 } = &self.params;
        let (m, f) = x.shape();
        let (h, k) = (b1.len(), b2.len());
        assert_eq!(f, w1.rows(), "feature width");
        let mut hidden = Matrix::zeros(m, h);
        let mut logits = Matrix::zeros(m, k);
        for i in 0..m {
            let hrow = hidden.row_mut(i);
            hrow.copy_from_slice(b1);
            for (fi, &xv) in x.row(i).iter().enumerate() {
                for (hv, &wv) in hrow.iter_mut().zip(w1.row(fi)) {
                    *hv += xv * wv;
                }
            }
            for v in hrow.iter_mut() {
                *v = tanh(*v);
            }
            let zrow = logits.row_mut(i);
            zrow.copy_from_slice(b2);
            for (hi, &hv) in hidden.row(i).iter().enumerate() {
                for (zv, &wv) in zrow.iter_mut().zip(w2.row(hi)) {
                    *zv += hv * wv;
                }
            }
        }
        (hidden, logits)
    }

    /// Parameter gradients for an upstream gradient at the logits.
    pub fn backward(&self, pass: &ForwardPass, dlogits: &Matrix) -> Result<Params> {
        self.backward_features(&pass.features, &pass.hidden, dlogits)
    }

    pub fn backward_features(&self, x: &Matrix, hidden: &Matrix, dlogits: &Matrix) -> Result<Params> {
        let (m, k) = (hidden.rows(), self.num_classes());
        if dlogits.shape() != (m, k) {
            return Err(Error::LengthMismatch {
                what: "logit gradient rows x classes",
                expected: m * k,
                actual: dlogits.rows() * dlogits.cols(),
            });
        }
        let (f, h, _) = self.params.dims();
        let mut g = Params::zeros(f, h, k);
        let mut dh = vec![0.0; h];
        for i in 0..m {
            let gz = dlogits.row(i);
            if gz.iter().all(|&v| v == 0.0) {
                continue;
            }
            let hrow = hidden.row(i);
            for (hi, &hv) in hrow.iter().enumerate() {
                let wrow = self.params.w2.row(hi);
                let mut acc = 0.0;
                for ((gw, &gzv), &wv) in g.w2.row_mut(hi).iter_mut().zip(gz).zip(wrow) {
                    *gw += hv * gzv;
                    acc += gzv * wv;
                }
                dh[hi] = acc * (1.0 - hv * hv);
            }
            for (gb, &gzv) in g.b2.iter_mut().zip(gz) {
                *gb += gzv;
            }
            for (fi, &xv) in x.row(i).iter().enumerate() {
                for (gw, &d) in g.w1.row_mut(fi).iter_mut().zip(&dh) {
                    *gw += xv * d;
                }
            }
            for (gb, &d) in g.b1.iter_mut().zip(&dh) {
                *gb += d;
            }
        }
        Ok(g)
    }

    /// SGD with momentum: `v ← 0.9 v + g; θ ← θ − lr v`.
    pub fn step(&mut self, grads: &Params, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("gradient of student {}", self.id)));
        }
        for ((p, v), g) in self
            .params
            .values_mut()
            .zip(self.momentum.values_mut())
            .zip(grads.values())
        {
            *v = MOMENTUM * *v + g;
            *p -= lr * *v;
        }
        if !self.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters of student {}", self.id)));
        }
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 4] = b"CKPT";

pub fn encode_checkpoint(student: &StudentModel) -> Vec<u8> {
    let (f, h, k) = student.params.dims();
    let mut buf = Vec::with_capacity(20 + 8 * (f * h + h + h * k + k));
    buf.extend_from_slice(CKPT_MAGIC);
    for v in [student.id, f as u32, h as u32, k as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in student.params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decodes a checkpoint into (student id, parameters).
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(u32, Params)> {
    if bytes.len() < 20 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (id, f, h, k) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
    let n = f * h + h + h * k + k;
    if bytes.len() != 20 + 8 * n {
        return Err(Error::Format(format!(
            "checkpoint body has {} bytes, expected {}",
            bytes.len() - 20,
            8 * n
        )));
    }
    let mut params = Params::zeros(f, h, k);
    for (v, chunk) in params.values_mut().zip(bytes[20..].chunks_exact(8)) {
        *v = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok((id, params))
}

pub fn write_checkpoint(student: &StudentModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(student))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(u32, Params)> {
    decode_checkpoint(&fs::read(path)?)
}
