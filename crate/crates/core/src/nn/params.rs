use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "llmsched-params";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors plus an update counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
    version: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Array2<f64> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            tensors: self
                .tensors
                .iter()
                .map(|t| Array2::zeros(t.raw_dim()))
                .collect(),
        }
    }

    /// Scalar at a flat index (tensor order, row-major inside a tensor).
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in &self.tensors {
            if idx < t.len() {
                return t.as_slice().expect("standard layout")[idx];
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, value: f64) {
        for t in &mut self.tensors {
            if idx < t.len() {
                t.as_slice_mut().expect("standard layout")[idx] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }
}

/// Gradient tensors, index-aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn tensor(&self, i: usize) -> &Array2<f64> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// Checks shape congruence with `params`.
    pub fn check_shapes(&self, params: &ParamSet) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Dimension {
                expected: params.len(),
                got: self.tensors.len(),
            });
        }
        for (i, (g, p)) in self.tensors.iter().zip(params.tensors()).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::InvalidArgument(format!(
                    "gradient for `{}` has shape {:?}, parameter has {:?}",
                    params.name(i),
                    g.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Affine layer `y = x W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    /// Glorot-uniform weights scaled by `gain`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let limit = gain * (6.0 / (inputs + outputs) as f64).sqrt();
        let w = Array2::from_shape_fn((inputs, outputs), |_| {
            if limit > 0.0 {
                rng.random_range(-limit..limit)
            } else {
                0.0
            }
        });
        let w = params.push(format!("{name}.w"), w);
        let b = params.push(format!("{name}.b"), Array2::zeros((1, outputs)));
        Dense {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(params.tensor(self.w)) + params.tensor(self.b)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        params: &ParamSet,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grads: &mut Gradients,
    ) -> Array2<f64> {
        self.backward_params(x, dy, grads);
        dy.dot(&params.tensor(self.w).t())
    }

    pub fn backward_params(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grads: &mut Gradients) {
        *grads.tensor_mut(self.w) += &x.t().dot(&dy);
        *grads.tensor_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
}

/// Central finite-difference gradient of `loss` over every parameter scalar.
pub fn finite_difference<F>(params: &ParamSet, step: f64, mut loss: F) -> Vec<f64>
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut probe = params.clone();
    (0..params.num_scalars())
        .map(|i| {
            let orig = probe.get_flat(i);
            probe.set_flat(i, orig + step);
            let plus = loss(&probe);
            probe.set_flat(i, orig - step);
            let minus = loss(&probe);
            probe.set_flat(i, orig);
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vectors are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = crate::linalg::norm(a).max(crate::linalg::norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    format_version: u32,
    update: u64,
    tensors: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

/// Writes a JSON-lines checkpoint: one header line, then one line per tensor.
pub fn write_checkpoint(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        format_version: CHECKPOINT_VERSION,
        update: params.version(),
        tensors: params.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let rec = CheckpointTensor {
            name: name.clone(),
            shape: [t.nrows(), t.ncols()],
            values: t.iter().copied().collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse {
        line: line + 1,
        msg,
    };
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty checkpoint".into()))?;
    let header: CheckpointHeader =
        serde_json::from_str(&first?).map_err(|e| parse_err(0, e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.format_version != CHECKPOINT_VERSION {
        return Err(parse_err(
            0,
            format!(
                "unsupported checkpoint format {} v{}",
                header.format, header.format_version
            ),
        ));
    }
    let mut params = ParamSet::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CheckpointTensor =
            serde_json::from_str(&line).map_err(|e| parse_err(i, e.to_string()))?;
        let t = Array2::from_shape_vec((rec.shape[0], rec.shape[1]), rec.values)
            .map_err(|e| parse_err(i, e.to_string()))?;
        params.push(rec.name, t);
    }
    if params.len() != header.tensors {
        return Err(parse_err(
            0,
            format!(
                "header lists {} tensors, found {}",
                header.tensors,
                params.len()
            ),
        ));
    }
    params.version = header.update;
    Ok(params)
}
