//! Dense feed-forward classifier: ReLU hidden layers, softmax output, mean
//! cross-entropy loss, plain SGD.
//!
//! Parameters live in one flat `f64` vector. For each layer in order the weight
//! matrix is stored row-major as `[output][input]`, followed by the bias vector.
//! Every node that exchanges parameters relies on this layout.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::SplitMix64;

/// Network shape. Construct through [`ModelSpec::new`] so the dims are validated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec")]
pub struct ModelSpec {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    output_dim: usize,
}

#[derive(Deserialize)]
struct RawModelSpec {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    output_dim: usize,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = Error;

    fn try_from(raw: RawModelSpec) -> Result<Self> {
        ModelSpec::new(raw.input_dim, raw.hidden_dims, raw.output_dim)
    }
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::Schema(format!(
                "all layer widths must be positive, got {input_dim}-{hidden_dims:?}-{output_dim}"
            )));
        }
        if hidden_dims.len() + 1 > u8::MAX as usize {
            return Err(Error::Schema("too many layers".into()));
        }
        if std::iter::once(input_dim)
            .chain(hidden_dims.iter().copied())
            .chain(std::iter::once(output_dim))
            .any(|d| d > u32::MAX as usize)
        {
            return Err(Error::Schema("layer width exceeds u32".into()));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// `(fan_in, fan_out)` for every weight layer, input side first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let widths: Vec<usize> = std::iter::once(self.input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect();
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }

    fn layers(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let layout = LayerLayout {
                    fan_in,
                    fan_out,
                    weights: offset,
                    bias: offset + fan_in * fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                layout
            })
            .collect()
    }
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.input_dim)?;
        for h in &self.hidden_dims {
            write!(f, "-{h}")?;
        }
        write!(f, "-{}", self.output_dim)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

/// Model weights as a flat vector in canonical layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    spec: ModelSpec,
    values: Vec<f64>,
}

impl ParameterVector {
    /// Wraps `values`, checking length against `spec` and that every entry is finite.
    pub fn new(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::Schema(format!(
                "spec {spec} needs {} parameters, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Corruption(format!("parameter {i} is not finite")));
        }
        Ok(Self { spec, values })
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        let values = vec![0.0; spec.param_count()];
        Self { spec, values }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute per-coordinate difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn ensure_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Divergence(format!("parameter {i} became non-finite"))),
            None => Ok(()),
        }
    }
}

/// Gradient of the batch loss, same layout as the parameters it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A borrowed block of rows: `features` is row-major with `width` columns.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    features: &'a [f64],
    labels: &'a [u8],
    width: usize,
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], labels: &'a [u8], width: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Usage("batch has no rows".into()));
        }
        if width == 0 || features.len() != labels.len() * width {
            return Err(Error::Schema(format!(
                "batch of {} rows and width {width} needs {} feature values, got {}",
                labels.len(),
                labels.len() * width,
                features.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            width,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.width != spec.input_dim() {
            return Err(Error::Schema(format!(
                "batch width {} does not match model input {}",
                self.width,
                spec.input_dim()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= spec.output_dim()) {
            return Err(Error::Schema(format!(
                "label {bad} out of range for {} classes",
                spec.output_dim()
            )));
        }
        Ok(())
    }
}

impl<'a> From<&'a Dataset> for Batch<'a> {
    fn from(ds: &'a Dataset) -> Self {
        Batch {
            features: ds.features(),
            labels: ds.labels(),
            width: ds.width(),
        }
    }
}

/// Glorot-uniform weights, zero biases, drawn from one SplitMix64 stream.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = SplitMix64::new(seed);
    let mut values = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut values[layer.weights..layer.bias] {
            *w = (2.0 * rng.next_f64() - 1.0) * limit;
        }
    }
    ParameterVector {
        spec: spec.clone(),
        values,
    }
}

/// Per-row scratch space for one forward/backward pass.
struct Workspace {
    /// `acts[0]` is the input row, `acts[l]` the output of layer `l - 1`;
    /// the last entry holds logits and then probabilities.
    acts: Vec<Vec<f64>>,
    logits: Vec<f64>,
    delta: Vec<f64>,
    prev_delta: Vec<f64>,
}

impl Workspace {
    fn new(spec: &ModelSpec) -> Self {
        let mut acts = vec![vec![0.0; spec.input_dim()]];
        acts.extend(spec.layer_dims().iter().map(|&(_, out)| vec![0.0; out]));
        let widest = acts.iter().map(Vec::len).max().unwrap_or(0);
        Self {
            acts,
            logits: vec![0.0; spec.output_dim()],
            delta: Vec::with_capacity(widest),
            prev_delta: Vec::with_capacity(widest),
        }
    }

    /// Fills `acts` for `row`, keeps the raw logits in `logits`, leaves
    /// probabilities in the last slot and returns the log-sum-exp of the logits.
    fn forward(&mut self, values: &[f64], layers: &[LayerLayout], row: &[f64]) -> f64 {
        self.acts[0].copy_from_slice(row);
        let last = layers.len() - 1;
        for (l, layer) in layers.iter().enumerate() {
            let (inputs, outputs) = self.acts.split_at_mut(l + 1);
            let input = &inputs[l];
            let out = &mut outputs[0];
            let weights = &values[layer.weights..layer.bias];
            let bias = &values[layer.bias..layer.bias + layer.fan_out];
            for (o, slot) in out.iter_mut().enumerate() {
                let w_row = &weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                let z = bias[o] + dot(w_row, input);
                *slot = if l < last { z.max(0.0) } else { z };
            }
        }
        self.logits.copy_from_slice(&self.acts[layers.len()]);
        softmax_in_place(&mut self.acts[layers.len()])
    }

    /// Cross-entropy of the last forwarded row: `lse - z_label`.
    fn row_loss(&self, lse: f64, label: usize) -> f64 {
        lse - self.logits[label]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Replaces logits with probabilities; returns log-sum-exp of the logits.
fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for p in logits.iter_mut() {
        *p /= sum;
    }
    max + sum.ln()
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Class probabilities for every row of `batch`.
pub fn forward(params: &ParameterVector, batch: &Batch<'_>) -> Result<Vec<Vec<f64>>> {
    let spec = params.spec();
    if batch.width() != spec.input_dim() {
        return Err(Error::Schema(format!(
            "batch width {} does not match model input {}",
            batch.width(),
            spec.input_dim()
        )));
    }
    let layers = spec.layers();
    let chunks = exec::map_row_chunks(batch.rows(), |rows| {
        let mut ws = Workspace::new(spec);
        rows.map(|r| {
            ws.forward(&params.values, &layers, batch.row(r));
            ws.acts[layers.len()].clone()
        })
        .collect::<Vec<_>>()
    });
    Ok(chunks.into_iter().flatten().collect())
}

/// Mean cross-entropy over the batch and its analytic gradient.
pub fn loss_and_grad(params: &ParameterVector, batch: &Batch<'_>) -> Result<(f64, Gradient)> {
    let spec = params.spec();
    batch.check(spec)?;
    let layers = spec.layers();
    let n_params = params.len();

    let partials = exec::map_row_chunks(batch.rows(), |rows| {
        let mut ws = Workspace::new(spec);
        let mut grad = vec![0.0; n_params];
        let mut loss = 0.0;
        for r in rows {
            let lse = ws.forward(&params.values, &layers, batch.row(r));
            let label = batch.label(r) as usize;
            loss += ws.row_loss(lse, label);
            backward(&params.values, &layers, &mut ws, label, &mut grad);
        }
        (loss, grad)
    });

    let scale = 1.0 / batch.rows() as f64;
    let mut total_loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for (loss, partial) in partials {
        total_loss += loss;
        for (g, p) in grad.iter_mut().zip(&partial) {
            *g += p;
        }
    }
    for g in &mut grad {
        *g *= scale;
    }
    Ok((total_loss * scale, Gradient { values: grad }))
}

/// Mean cross-entropy only.
pub fn mean_loss(params: &ParameterVector, batch: &Batch<'_>) -> Result<f64> {
    let spec = params.spec();
    batch.check(spec)?;
    let layers = spec.layers();
    let partials = exec::map_row_chunks(batch.rows(), |rows| {
        let mut ws = Workspace::new(spec);
        rows.map(|r| {
            let lse = ws.forward(&params.values, &layers, batch.row(r));
            ws.row_loss(lse, batch.label(r) as usize)
        })
        .sum::<f64>()
    });
    Ok(partials.into_iter().sum::<f64>() / batch.rows() as f64)
}

/// Accumulates the gradient of one row's loss into `grad`. Expects `ws` to hold
/// the forward pass of that row.
fn backward(
    values: &[f64],
    layers: &[LayerLayout],
    ws: &mut Workspace,
    label: usize,
    grad: &mut [f64],
) {
    let n = layers.len();
    ws.delta.clear();
    ws.delta.extend_from_slice(&ws.acts[n]);
    ws.delta[label] -= 1.0;

    for l in (0..n).rev() {
        let layer = layers[l];
        let input = &ws.acts[l];
        {
            let (gw, gb) = grad[layer.weights..layer.bias + layer.fan_out].split_at_mut(layer.bias - layer.weights);
            for (o, &d) in ws.delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (g, &x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
        }
        if l == 0 {
            break;
        }
        ws.prev_delta.clear();
        ws.prev_delta.resize(layer.fan_in, 0.0);
        let weights = &values[layer.weights..layer.bias];
        for (o, &d) in ws.delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let w_row = &weights[o * layer.fan_in..(o + 1) * layer.fan_in];
            for (acc, &w) in ws.prev_delta.iter_mut().zip(w_row) {
                *acc += w * d;
            }
        }
        // ReLU derivative: the stored activation is zero exactly where z <= 0.
        for (acc, &a) in ws.prev_delta.iter_mut().zip(&ws.acts[l]) {
            if a <= 0.0 {
                *acc = 0.0;
            }
        }
        std::mem::swap(&mut ws.delta, &mut ws.prev_delta);
    }
}

/// `params - eta * grad`.
pub fn sgd_step(params: &ParameterVector, grad: &Gradient, eta: f64) -> Result<ParameterVector> {
    let mut next = params.clone();
    apply_sgd(&mut next, grad, eta)?;
    Ok(next)
}

/// In-place form of [`sgd_step`].
pub fn apply_sgd(params: &mut ParameterVector, grad: &Gradient, eta: f64) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::Schema(format!(
            "gradient length {} does not match {} parameters",
            grad.len(),
            params.len()
        )));
    }
    for (w, g) in params.values.iter_mut().zip(&grad.values) {
        *w -= eta * g;
    }
    params.ensure_finite()
}

/// Fraction of rows whose most probable class equals the label.
pub fn evaluate_accuracy(params: &ParameterVector, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let batch = Batch::from(dataset);
    let spec = params.spec();
    batch.check(spec)?;
    let layers = spec.layers();
    let counts = exec::map_row_chunks(batch.rows(), |rows| {
        let mut ws = Workspace::new(spec);
        rows.filter(|&r| {
            ws.forward(&params.values, &layers, batch.row(r));
            argmax(&ws.acts[layers.len()]) == batch.label(r) as usize
        })
        .count()
    });
    Ok(counts.into_iter().sum::<usize>() as f64 / batch.rows() as f64)
}

const BLOB_MAGIC: &[u8; 4] = b"FAVG";
const BLOB_VERSION: u8 = 1;
const BLOB_FIXED_HEADER: usize = 8;

/// Size in bytes of the serialized form of parameters for `spec`.
pub fn blob_len(spec: &ModelSpec) -> usize {
    BLOB_FIXED_HEADER + 4 * spec.num_layers() + 8 * spec.param_count()
}

/// Binary form: `"FAVG"`, version `1`, layer count, two reserved zero bytes, one
/// little-endian `u32` output width per weight layer, then every value as a
/// little-endian binary64 in canonical order.
pub fn serialize_params(params: &ParameterVector) -> Vec<u8> {
    let spec = params.spec();
    let mut out = Vec::with_capacity(blob_len(spec));
    out.extend_from_slice(BLOB_MAGIC);
    out.push(BLOB_VERSION);
    out.push(spec.num_layers() as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    for (_, fan_out) in spec.layer_dims() {
        out.extend_from_slice(&(fan_out as u32).to_le_bytes());
    }
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn deserialize_params(bytes: &[u8], spec: &ModelSpec) -> Result<ParameterVector> {
    if bytes.len() < BLOB_FIXED_HEADER {
        return Err(Error::Format(format!("blob of {} bytes is shorter than its header", bytes.len())));
    }
    if &bytes[..4] != BLOB_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[4] != BLOB_VERSION {
        return Err(Error::Format(format!("unsupported blob version {}", bytes[4])));
    }
    let layer_count = bytes[5] as usize;
    if u16::from_le_bytes([bytes[6], bytes[7]]) != 0 {
        return Err(Error::Format("reserved header bytes are not zero".into()));
    }
    if layer_count != spec.num_layers() {
        return Err(Error::Format(format!(
            "blob has {layer_count} layers, spec {spec} has {}",
            spec.num_layers()
        )));
    }
    if bytes.len() != blob_len(spec) {
        return Err(Error::Format(format!(
            "blob is {} bytes, spec {spec} needs {}",
            bytes.len(),
            blob_len(spec)
        )));
    }
    let dims_end = BLOB_FIXED_HEADER + 4 * layer_count;
    for (i, (chunk, (_, fan_out))) in bytes[BLOB_FIXED_HEADER..dims_end]
        .chunks_exact(4)
        .zip(spec.layer_dims())
        .enumerate()
    {
        let width = u32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as usize;
        if width != fan_out {
            return Err(Error::Format(format!(
                "layer {i} width {width} does not match spec width {fan_out}"
            )));
        }
    }
    let values: Vec<f64> = bytes[dims_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ParameterVector::new(spec.clone(), values)
}

/// Parses a blob without knowing its spec up front. The input width is
/// recovered from the value count and the per-layer output widths.
pub fn deserialize_params_any(bytes: &[u8]) -> Result<ParameterVector> {
    if bytes.len() < BLOB_FIXED_HEADER {
        return Err(Error::Format(format!("blob of {} bytes is shorter than its header", bytes.len())));
    }
    let layer_count = bytes[5] as usize;
    if layer_count == 0 {
        return Err(Error::Format("blob declares no layers".into()));
    }
    let dims_end = BLOB_FIXED_HEADER + 4 * layer_count;
    if bytes.len() < dims_end || (bytes.len() - dims_end) % 8 != 0 {
        return Err(Error::Format(format!("blob length {} is not header plus whole values", bytes.len())));
    }
    let widths: Vec<usize> = bytes[BLOB_FIXED_HEADER..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    if widths.contains(&0) {
        return Err(Error::Format("blob declares a zero-width layer".into()));
    }
    let values = (bytes.len() - dims_end) / 8;
    let rest: usize = widths
        .windows(2)
        .map(|w| w[0].saturating_mul(w[1]).saturating_add(w[1]))
        .fold(0usize, usize::saturating_add);
    let first = values
        .checked_sub(rest)
        .filter(|&f| f % widths[0] == 0 && f / widths[0] >= 2)
        .ok_or_else(|| Error::Format(format!("{values} values do not fit layer widths {widths:?}")))?;
    let input_dim = first / widths[0] - 1;
    let spec = ModelSpec::new(input_dim, widths[..layer_count - 1].to_vec(), widths[layer_count - 1])
        .map_err(|e| Error::Format(e.to_string()))?;
    deserialize_params(bytes, &spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(i: usize, h: &[usize], o: usize) -> ModelSpec {
        ModelSpec::new(i, h.to_vec(), o).unwrap()
    }

    #[test]
    fn rejects_zero_width_layers() {
        assert!(ModelSpec::new(0, vec![2], 2).is_err());
        assert!(ModelSpec::new(2, vec![0], 2).is_err());
        assert!(ModelSpec::new(2, vec![2], 0).is_err());
        assert!(serde_json::from_str::<ModelSpec>(r#"{"input_dim":3,"hidden_dims":[0],"output_dim":2}"#).is_err());
    }

    #[test]
    fn full_scale_parameter_count() {
        let s = spec(71, &[3072], 2);
        assert_eq!(s.param_count(), 227_330);
        assert_eq!(init_params(&s, 3).len(), 227_330);
    }

    #[test]
    fn init_zeroes_biases_and_respects_glorot_limit() {
        let s = spec(2, &[2], 2);
        let p = init_params(&s, 99);
        let v = p.values();
        // layout: W1 (4) b1 (2) W2 (4) b2 (2)
        assert_eq!(&v[4..6], &[0.0, 0.0]);
        assert_eq!(&v[10..12], &[0.0, 0.0]);
        let limit = (6.0f64 / 4.0).sqrt();
        assert!(v[..4].iter().chain(&v[6..10]).all(|w| w.abs() <= limit));
        assert!(v[..4].iter().any(|w| *w != 0.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let s = spec(5, &[7, 3], 2);
        assert!(init_params(&s, 11).bits_eq(&init_params(&s, 11)));
        assert!(!init_params(&s, 11).bits_eq(&init_params(&s, 12)));
    }

    #[test]
    fn zero_params_predict_uniform() {
        let s = spec(3, &[4], 2);
        let p = ParameterVector::zeros(s);
        let x = [0.3, -1.0, 2.0, 5.0, 5.0, 5.0];
        let probs = forward(&p, &Batch::new(&x, &[0, 1], 3).unwrap()).unwrap();
        for row in probs {
            assert_eq!(row, vec![0.5, 0.5]);
        }
        let (loss, _) = loss_and_grad(&p, &Batch::new(&x, &[0, 1], 3).unwrap()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dead_relu_gives_softmax_of_output_bias() {
        let s = spec(1, &[2], 2);
        // hidden weights negative, biases negative -> z_h < 0 for positive input
        let values = vec![-1.0, -2.0, -0.5, -0.5, 3.0, 1.0, 1.0, 3.0, 0.2, -0.4];
        let p = ParameterVector::new(s, values).unwrap();
        let probs = forward(&p, &Batch::new(&[1.0], &[0], 1).unwrap()).unwrap();
        let e0 = 0.2f64.exp();
        let e1 = (-0.4f64).exp();
        assert!((probs[0][0] - e0 / (e0 + e1)).abs() < 1e-15);
        assert!((probs[0][1] - e1 / (e0 + e1)).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_forward() {
        // 1-1-2: w_h=2, b_h=0, input 1.5 -> h=3; logits [3, -3]
        let s = spec(1, &[1], 2);
        let p = ParameterVector::new(s, vec![2.0, 0.0, 1.0, -1.0, 0.0, 0.0]).unwrap();
        let probs = forward(&p, &Batch::new(&[1.5], &[0], 1).unwrap()).unwrap();
        let expected0 = 3f64.exp() / (3f64.exp() + (-3f64).exp());
        assert!((probs[0][0] - expected0).abs() < 1e-15);
        assert!((probs[0][0] - 0.99753).abs() < 1e-5);
        assert!((probs[0][1] - 0.00247).abs() < 1e-5);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = ParameterVector::zeros(spec(3, &[2], 2));
        let err = forward(&p, &Batch::new(&[1.0, 2.0], &[0], 2).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(matches!(loss_and_grad(&p, &Batch::new(&[1.0, 2.0], &[0], 2).unwrap()), Err(Error::Schema(_))));
    }

    #[test]
    fn batch_rejects_ragged_rows() {
        assert!(matches!(Batch::new(&[1.0, 2.0, 3.0], &[0, 1], 2), Err(Error::Schema(_))));
        assert!(matches!(Batch::new(&[], &[], 2), Err(Error::Usage(_))));
    }

    #[test]
    fn sgd_step_examples() {
        let s = spec(1, &[], 1);
        let p = ParameterVector::new(s, vec![1.0, 2.0]).unwrap();
        let g = Gradient { values: vec![0.5, -1.0] };
        let next = sgd_step(&p, &g, 0.1).unwrap();
        assert_eq!(next.values(), &[1.0 - 0.1 * 0.5, 2.0 + 0.1]);
        assert!((next.values()[0] - 0.95).abs() < 1e-15);
        assert!((next.values()[1] - 2.1).abs() < 1e-15);
        assert!(sgd_step(&p, &g, 0.0).unwrap().bits_eq(&p));
        assert!(sgd_step(&p, &Gradient { values: vec![0.0, 0.0] }, 0.3).unwrap().bits_eq(&p));
        assert!(sgd_step(&p, &Gradient { values: vec![0.0] }, 0.3).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.8]), 1);
        assert_eq!(argmax(&[0.4, 0.3, 0.3]), 0);
    }

    #[test]
    fn blob_length_for_small_spec() {
        let s = spec(2, &[2], 2);
        let blob = serialize_params(&init_params(&s, 1));
        assert_eq!(blob.len(), 112);
        assert_eq!(&blob[..4], b"FAVG");
        assert_eq!(blob_len(&s), 112);
    }

    #[test]
    fn blob_round_trip_is_bitwise() {
        let s = spec(4, &[5, 3], 2);
        let p = init_params(&s, 8);
        let back = deserialize_params(&serialize_params(&p), &s).unwrap();
        assert!(back.bits_eq(&p));
    }

    #[test]
    fn blob_spec_is_recoverable() {
        for s in [spec(2, &[2], 2), spec(71, &[30], 2), spec(1, &[], 3), spec(4, &[5, 3], 2)] {
            let p = init_params(&s, 4);
            let back = deserialize_params_any(&serialize_params(&p)).unwrap();
            assert_eq!(back.spec(), &s);
            assert!(back.bits_eq(&p));
        }
        let blob = serialize_params(&init_params(&spec(3, &[2], 2), 0));
        assert!(deserialize_params_any(&blob[..blob.len() - 8]).is_err());
        assert!(deserialize_params_any(&blob[..5]).is_err());
    }

    #[test]
    fn blob_errors() {
        let s = spec(2, &[2], 2);
        let blob = serialize_params(&init_params(&s, 1));
        for cut in [0, 3, 8, 15, 111] {
            assert!(matches!(deserialize_params(&blob[..cut], &s), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = blob.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize_params(&bad, &s), Err(Error::Format(_))));
        let mut bad = blob.clone();
        bad[4] = 2;
        assert!(matches!(deserialize_params(&bad, &s), Err(Error::Format(_))));
        let other = spec(2, &[3], 2);
        assert!(matches!(deserialize_params(&blob, &other), Err(Error::Format(_))));
        let mut nan = blob.clone();
        nan[16..24].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(deserialize_params(&nan, &s), Err(Error::Corruption(_))));
    }
}
