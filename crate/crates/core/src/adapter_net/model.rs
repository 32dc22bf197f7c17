use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{streams, FlatParams, LayerSpan, RngStream};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self * x`
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `out = self^T * g`
    pub fn matvec_transposed_into(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&gi, row) in g.iter().zip(self.data.chunks_exact(self.cols)) {
            if gi != 0.0 {
                out.iter_mut().zip(row).for_each(|(o, a)| *o += gi * a);
            }
        }
    }

    /// `self += scale * a * b^T`
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        for (&ai, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            let s = scale * ai;
            if s != 0.0 {
                row.iter_mut().zip(b).for_each(|(r, bj)| *r += s * bj);
            }
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    out_row
                        .iter_mut()
                        .zip(other.row(k))
                        .for_each(|(o, b)| *o += a * b);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn scale(mut self, s: f64) -> Matrix {
        self.data.iter_mut().for_each(|v| *v *= s);
        self
    }

    /// Haar-ish random orthogonal matrix: Gram-Schmidt on a Gaussian matrix.
    pub fn random_orthogonal(n: usize, rng: &mut RngStream) -> Matrix {
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| rng.gaussian(n)).collect();
        for i in 0..n {
            // twice is enough for numerical orthogonality
            for _ in 0..2 {
                for j in 0..i {
                    let (done, rest) = rows.split_at_mut(i);
                    let proj: f64 = rest[0].iter().zip(&done[j]).map(|(a, b)| a * b).sum();
                    rest[0].iter_mut().zip(&done[j]).for_each(|(a, b)| *a -= proj * b);
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        Matrix {
            rows: n,
            cols: n,
            data: rows.into_iter().flatten().collect(),
        }
    }
}

/// Trainable bottleneck adapter: `up * relu(down * f) + f`, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// bottleneck_dim x feature_dim
    pub down_proj: Matrix,
    /// feature_dim x bottleneck_dim
    pub up_proj: Matrix,
}

impl AdapterParams {
    pub fn new(down_proj: Matrix, up_proj: Matrix) -> Result<Self> {
        let (b, f) = (down_proj.rows(), down_proj.cols());
        if up_proj.rows() != f || up_proj.cols() != b {
            return Err(Error::invalid(format!(
                "up_proj must be {f}x{b}, got {}x{}",
                up_proj.rows(),
                up_proj.cols()
            )));
        }
        if b >= f {
            return Err(Error::invalid(format!(
                "bottleneck_dim {b} must be smaller than feature_dim {f}"
            )));
        }
        Ok(AdapterParams { down_proj, up_proj })
    }

    pub fn feature_dim(&self) -> usize {
        self.down_proj.cols()
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.down_proj.rows()
    }

    pub fn param_count(&self) -> usize {
        2 * self.feature_dim() * self.bottleneck_dim()
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.down_proj.as_slice());
        out.extend_from_slice(self.up_proj.as_slice());
    }

    fn load(&mut self, values: &[f64]) {
        let n = self.down_proj.as_slice().len();
        self.down_proj.as_mut_slice().copy_from_slice(&values[..n]);
        self.up_proj.as_mut_slice().copy_from_slice(&values[n..]);
    }
}

/// Applies one adapter to a feature vector.
pub fn adapter_forward(f: &[f64], a: &AdapterParams) -> Result<Vec<f64>> {
    if f.len() != a.feature_dim() {
        return Err(Error::invalid(format!(
            "feature length {} does not match adapter width {}",
            f.len(),
            a.feature_dim()
        )));
    }
    let hidden: Vec<f64> = a.down_proj.matvec(f).into_iter().map(relu).collect();
    let mut out = a.up_proj.matvec(&hidden);
    out.iter_mut().zip(f).for_each(|(o, x)| *o += x);
    Ok(out)
}

pub(crate) fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// A frozen linear map `weight * h + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBlock {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub blocks: usize,
    pub feature_dim: usize,
    pub bottleneck_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            blocks: 6,
            feature_dim: 256,
            bottleneck_dim: 16,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::invalid(format!("need at least 2 blocks, got {}", self.blocks)));
        }
        if self.bottleneck_dim == 0 || self.bottleneck_dim >= self.feature_dim {
            return Err(Error::invalid(format!(
                "bottleneck_dim must be in 1..{}, got {}",
                self.feature_dim, self.bottleneck_dim
            )));
        }
        Ok(())
    }

    /// Scalars in one adapter layer.
    pub fn adapter_len(&self) -> usize {
        2 * self.feature_dim * self.bottleneck_dim
    }

    /// Manifest for adapter layers `1..=layers`.
    pub fn manifest(&self, layers: usize) -> Vec<LayerSpan> {
        (1..=layers as u32)
            .map(|layer| LayerSpan {
                layer,
                len: self.adapter_len(),
            })
            .collect()
    }
}

/// How the frozen backbone is built.
///
/// Each block is `relu(gain * Q_k * h + b_k)` with `Q_k` random orthogonal.
/// With `b_1 = offset` and `b_k = offset - gain * Q_k * offset`, activations
/// stay centered on `offset`, so a large offset keeps every unit in its
/// linear range and a small one lets the ReLUs gate. The head is fitted once, by ridge regression on a generic pretraining
/// corpus, to read out `readout_scale * (x - readout_threshold)` per pixel
/// through the identity-adapter network. The result is an intensity-threshold
/// segmenter that adapters then specialize per client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub gain: f64,
    pub offset: f64,
    pub readout_scale: f64,
    pub readout_threshold: f64,
    pub pretrain_samples: usize,
    /// ridge penalty, relative to the mean feature variance
    pub ridge: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            gain: 1.0,
            offset: 0.1,
            readout_scale: 8.0,
            readout_threshold: 0.5,
            pretrain_samples: 2048,
            ridge: 1e-4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::invalid("backbone gain must be positive"));
        }
        if !self.offset.is_finite() || !self.readout_scale.is_finite() || !self.readout_threshold.is_finite() {
            return Err(Error::invalid("backbone offset and readout must be finite"));
        }
        if self.pretrain_samples == 0 {
            return Err(Error::invalid("pretrain_samples must be positive"));
        }
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            return Err(Error::invalid("ridge must be positive"));
        }
        Ok(())
    }
}

/// Generic pretraining images: i.i.d. pixels, each foreground with a
/// per-image probability, foreground intensities spread over `[0.2, 1.2]`
/// and a faint noisy background, all clamped to `[0, 1]`.
fn pretrain_corpus(f: usize, n: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let density = rng.uniform(0.02, 0.9);
            let level = rng.uniform(0.2, 1.2);
            (0..f)
                .map(|_| {
                    let v = if rng.uniform(0.0, 1.0) < density {
                        level * rng.uniform(0.5, 1.0)
                    } else {
                        0.1 * rng.standard_normal()
                    };
                    v.clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect()
}

fn block_features(blocks: &[FrozenBlock], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for b in blocks {
        h = b.weight.matvec(&h);
        for (v, bias) in h.iter_mut().zip(&b.bias) {
            *v = (*v + bias).max(0.0);
        }
    }
    h
}

/// Ridge fit of `y = head_w * phi + head_b`, with features and targets
/// centered so the bias is not penalized.
fn fit_readout(features: &[Vec<f64>], targets: &[Vec<f64>], ridge: f64) -> Result<FrozenBlock> {
    use nalgebra::DMatrix;
    let n = features.len();
    let f_in = features[0].len();
    let f_out = targets[0].len();
    let mean = |rows: &[Vec<f64>], d: usize| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for r in rows {
            for (a, v) in m.iter_mut().zip(r) {
                *a += v;
            }
        }
        m.iter().map(|v| v / n as f64).collect()
    };
    let phi_mean = mean(features, f_in);
    let y_mean = mean(targets, f_out);
    let phi = DMatrix::from_fn(n, f_in, |i, j| features[i][j] - phi_mean[j]);
    let y = DMatrix::from_fn(n, f_out, |i, j| targets[i][j] - y_mean[j]);
    let mut gram = phi.transpose() * &phi;
    let scale = gram.trace() / f_in as f64;
    let raw = features.iter().flatten().map(|v| v * v).sum::<f64>() / f_in as f64;
    if !(scale > 1e-12 * raw && scale.is_finite()) {
        return Err(Error::Numeric("backbone features are constant on the pretraining corpus".into()));
    }
    for i in 0..f_in {
        gram[(i, i)] += ridge * scale;
    }
    let rhs = phi.transpose() * y;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numeric("readout normal equations are not positive definite".into()))?;
    let coef = chol.solve(&rhs);
    let weight = Matrix::from_vec(f_out, f_in, coef.iter().copied().collect())?;
    let fitted_mean = weight.matvec(&phi_mean);
    let bias = y_mean.iter().zip(fitted_mean).map(|(m, p)| m - p).collect();
    Ok(FrozenBlock { weight, bias })
}

/// The frozen part of the model: K blocks plus the output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    blocks: Vec<FrozenBlock>,
    head: FrozenBlock,
}

impl Backbone {
    pub fn new(blocks: Vec<FrozenBlock>, head: FrozenBlock) -> Result<Self> {
        let f = head.weight.cols();
        for (k, b) in blocks.iter().enumerate() {
            if b.weight.rows() != f || b.weight.cols() != f || b.bias.len() != f {
                return Err(Error::invalid(format!("block {} is not {f}x{f}", k + 1)));
            }
        }
        if head.weight.rows() != f || head.bias.len() != f {
            return Err(Error::invalid("head must map feature_dim to feature_dim"));
        }
        Ok(Backbone { blocks, head })
    }

    pub fn generate(dims: ModelDims, cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        dims.validate()?;
        cfg.validate()?;
        let f = dims.feature_dim;
        let mut rng = RngStream::new(seed, streams::BACKBONE);
        let offset = vec![cfg.offset; f];
        let blocks: Vec<FrozenBlock> = (0..dims.blocks)
            .map(|k| {
                let weight = Matrix::random_orthogonal(f, &mut rng).scale(cfg.gain);
                let bias = if k == 0 {
                    offset.clone()
                } else {
                    let rotated = weight.matvec(&offset);
                    offset.iter().zip(rotated).map(|(o, r)| o - r).collect()
                };
                FrozenBlock { weight, bias }
            })
            .collect();
        let corpus = pretrain_corpus(f, cfg.pretrain_samples, &mut rng);
        let features: Vec<Vec<f64>> = corpus.iter().map(|x| block_features(&blocks, x)).collect();
        let targets: Vec<Vec<f64>> = corpus
            .iter()
            .map(|x| x.iter().map(|v| cfg.readout_scale * (v - cfg.readout_threshold)).collect())
            .collect();
        let head = fit_readout(&features, &targets, cfg.ridge)?;
        Backbone::new(blocks, head)
    }

    pub fn blocks(&self) -> &[FrozenBlock] {
        &self.blocks
    }

    pub fn head(&self) -> &FrozenBlock {
        &self.head
    }

    /// SHA-256 over every frozen weight and bias, little-endian.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for block in self.blocks.iter().chain(std::iter::once(&self.head)) {
            for v in block.weight.as_slice().iter().chain(&block.bias) {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Frozen backbone with one trainable adapter after each block.
///
/// The backbone is shared behind an `Arc` and never mutated; only the
/// adapters are owned per model.
#[derive(Debug, Clone)]
pub struct ToyFM {
    dims: ModelDims,
    backbone: Arc<Backbone>,
    adapters: Vec<AdapterParams>,
}

impl ToyFM {
    /// Default backbone from `backbone_seed`, adapters from `adapter_seed`.
    pub fn new(dims: ModelDims, backbone_seed: u64, adapter_seed: u64) -> Result<Self> {
        let backbone = Backbone::generate(dims, &BackboneConfig::default(), backbone_seed)?;
        ToyFM::with_backbone(Arc::new(backbone), dims, adapter_seed)
    }

    /// Adapters start as the identity: `down_proj` Gaussian with variance
    /// `1/feature_dim`, `up_proj` zero.
    pub fn with_backbone(backbone: Arc<Backbone>, dims: ModelDims, adapter_seed: u64) -> Result<Self> {
        dims.validate()?;
        if backbone.blocks.len() != dims.blocks || backbone.head.weight.cols() != dims.feature_dim {
            return Err(Error::invalid("backbone does not match model dims"));
        }
        let (f, b) = (dims.feature_dim, dims.bottleneck_dim);
        let mut rng = RngStream::new(adapter_seed, streams::ADAPTER_INIT);
        let std = 1.0 / (f as f64).sqrt();
        let adapters = (0..dims.blocks)
            .map(|_| {
                let down = rng.gaussian(b * f).into_iter().map(|v| v * std).collect();
                AdapterParams::new(Matrix::from_vec(b, f, down)?, Matrix::zeros(f, b))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyFM {
            dims,
            backbone,
            adapters,
        })
    }

    pub fn from_parts(backbone: Arc<Backbone>, adapters: Vec<AdapterParams>) -> Result<Self> {
        let blocks = backbone.blocks.len();
        let feature_dim = backbone.head.weight.cols();
        let bottleneck_dim = adapters.first().map_or(0, |a| a.bottleneck_dim());
        let dims = ModelDims {
            blocks,
            feature_dim,
            bottleneck_dim,
        };
        dims.validate()?;
        if adapters.len() != blocks
            || adapters
                .iter()
                .any(|a| a.feature_dim() != feature_dim || a.bottleneck_dim() != bottleneck_dim)
        {
            return Err(Error::invalid("adapters do not match the backbone"));
        }
        Ok(ToyFM {
            dims,
            backbone,
            adapters,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn adapters(&self) -> &[AdapterParams] {
        &self.adapters
    }

    pub fn frozen_fingerprint(&self) -> String {
        self.backbone.fingerprint()
    }

    /// Every adapter, layers `1..=K`.
    pub fn adapter_params(&self) -> FlatParams {
        self.low_params_unchecked(self.dims.blocks)
    }

    /// Adapter layers `1..=layers`.
    pub fn low_params(&self, layers: usize) -> Result<FlatParams> {
        if layers == 0 || layers > self.dims.blocks {
            return Err(Error::invalid(format!(
                "layer count {layers} outside 1..={}",
                self.dims.blocks
            )));
        }
        Ok(self.low_params_unchecked(layers))
    }

    fn low_params_unchecked(&self, layers: usize) -> FlatParams {
        let mut values = Vec::with_capacity(layers * self.dims.adapter_len());
        for a in &self.adapters[..layers] {
            a.flatten_into(&mut values);
        }
        FlatParams::new(values, self.dims.manifest(layers)).expect("adapters are finite")
    }

    /// Overwrites adapter layers `1..=L` where `L` is taken from the
    /// manifest, which must be exactly `1..=L`.
    pub fn set_low_params(&mut self, params: &FlatParams) -> Result<()> {
        let layers = params.manifest().len();
        if layers == 0 || layers > self.dims.blocks || params.manifest() != self.dims.manifest(layers) {
            return Err(Error::invalid(format!(
                "manifest {:?} is not adapter layers 1..=L of this model",
                params.manifest()
            )));
        }
        for (a, (_, values)) in self.adapters.iter_mut().zip(params.layer_slices()) {
            a.load(values);
        }
        Ok(())
    }

    pub fn set_adapter_params(&mut self, params: &FlatParams) -> Result<()> {
        if params.manifest().len() != self.dims.blocks {
            return Err(Error::invalid("expected every adapter layer"));
        }
        self.set_low_params(params)
    }

    /// Forward pass: K stages of `adapter(relu(W h + b))`, then the head.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dims.feature_dim {
            return Err(Error::invalid(format!(
                "input length {} does not match feature_dim {}",
                x.len(),
                self.dims.feature_dim
            )));
        }
        let mut h = x.to_vec();
        let mut z = vec![0.0; self.dims.feature_dim];
        for (block, adapter) in self.backbone.blocks.iter().zip(&self.adapters) {
            block.weight.matvec_into(&h, &mut z);
            z.iter_mut()
                .zip(&block.bias)
                .for_each(|(v, b)| *v = relu(*v + b));
            h = adapter_forward(&z, adapter)?;
        }
        let head = &self.backbone.head;
        let mut logits = head.weight.matvec(&h);
        logits.iter_mut().zip(&head.bias).for_each(|(v, b)| *v += b);
        Ok(logits)
    }
}

/// Free-function form of [`ToyFM::forward`].
pub fn model_forward(x: &[f64], m: &ToyFM) -> Result<Vec<f64>> {
    m.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_adapter(down: Vec<f64>, up: Vec<f64>, f: usize, b: usize) -> AdapterParams {
        AdapterParams::new(
            Matrix::from_vec(b, f, down).unwrap(),
            Matrix::from_vec(f, b, up).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn adapter_hand_computed() {
        let a = small_adapter(vec![1.0, -1.0], vec![2.0, 0.0], 2, 1);
        assert_eq!(adapter_forward(&[3.0, 1.0], &a).unwrap(), vec![7.0, 1.0]);
    }

    #[test]
    fn adapter_zero_up_is_identity_and_zero_input_maps_to_zero() {
        let a = small_adapter(vec![0.3, -0.7, 1.1, 0.2, 0.5, -0.4], vec![0.0; 6], 3, 2);
        let f = [0.25, -1.5, 4.0];
        assert_eq!(adapter_forward(&f, &a).unwrap(), f.to_vec());
        let a = small_adapter(vec![0.3, -0.7, 1.1, 0.2, 0.5, -0.4], vec![1.0; 6], 3, 2);
        assert_eq!(adapter_forward(&[0.0; 3], &a).unwrap(), vec![0.0; 3]);
        assert!(adapter_forward(&[0.0; 2], &a).is_err());
    }

    #[test]
    fn adapter_requires_bottleneck() {
        assert!(AdapterParams::new(Matrix::zeros(2, 2), Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn identity_backbone_gives_relu_of_input() {
        let f = 4;
        let identity = || FrozenBlock {
            weight: Matrix::identity(f),
            bias: vec![0.0; f],
        };
        let backbone = Arc::new(Backbone::new(vec![identity(), identity()], identity()).unwrap());
        let adapters = (0..2)
            .map(|_| small_adapter(vec![0.5; 2 * f], vec![0.0; 2 * f], f, 2))
            .collect();
        let m = ToyFM::from_parts(backbone, adapters).unwrap();
        let x = [1.0, -2.0, 0.5, -0.1];
        assert_eq!(m.forward(&x).unwrap(), vec![1.0, 0.0, 0.5, 0.0]);
        assert!(m.forward(&x[..3]).is_err());
    }

    #[test]
    fn orthogonal_init_is_orthogonal() {
        let mut rng = RngStream::new(5, 0);
        let q = Matrix::random_orthogonal(32, &mut rng);
        let qtq = q.transpose().matmul(&q);
        for i in 0..32 {
            for j in 0..32 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((qtq.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_regime_head_reads_out_scaled_threshold() {
        let dims = ModelDims {
            blocks: 3,
            feature_dim: 32,
            bottleneck_dim: 4,
        };
        let cfg = BackboneConfig {
            offset: 5.0,
            ..BackboneConfig::default()
        };
        let backbone = Backbone::generate(dims, &cfg, 0).unwrap();
        let m = ToyFM::with_backbone(Arc::new(backbone), dims, 0).unwrap();
        let mut rng = RngStream::new(9, 0);
        let x: Vec<f64> = (0..32).map(|_| rng.uniform(0.0, 1.0)).collect();
        let logits = m.forward(&x).unwrap();
        for (l, xi) in logits.iter().zip(&x) {
            let expected = cfg.readout_scale * (xi - cfg.readout_threshold);
            assert!((l - expected).abs() < 1e-2, "{l} vs {expected}");
        }
    }

    #[test]
    fn gated_head_still_tracks_intensity() {
        let dims = ModelDims {
            blocks: 4,
            feature_dim: 64,
            bottleneck_dim: 4,
        };
        let m = ToyFM::new(dims, 3, 3).unwrap();
        let mut rng = RngStream::new(1, 0);
        let x: Vec<f64> = (0..64).map(|i| if i % 3 == 0 { rng.uniform(0.8, 1.0) } else { 0.0 }).collect();
        let logits = m.forward(&x).unwrap();
        let (mut bright, mut dark) = (0.0, 0.0);
        for (i, l) in logits.iter().enumerate() {
            if i % 3 == 0 {
                bright += l;
            } else {
                dark += l;
            }
        }
        assert!(bright / 22.0 > dark / 42.0 + 1.0);
    }

    #[test]
    fn dead_backbone_is_rejected() {
        let dims = ModelDims {
            blocks: 2,
            feature_dim: 8,
            bottleneck_dim: 2,
        };
        let cfg = BackboneConfig {
            offset: -10.0,
            ..BackboneConfig::default()
        };
        assert!(matches!(Backbone::generate(dims, &cfg, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn backbone_generation_is_deterministic() {
        let dims = ModelDims {
            blocks: 2,
            feature_dim: 16,
            bottleneck_dim: 2,
        };
        let cfg = BackboneConfig::default();
        let a = Backbone::generate(dims, &cfg, 11).unwrap();
        let b = Backbone::generate(dims, &cfg, 11).unwrap();
        let c = Backbone::generate(dims, &cfg, 12).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn low_params_round_trip_and_isolation() {
        let dims = ModelDims {
            blocks: 4,
            feature_dim: 8,
            bottleneck_dim: 2,
        };
        let mut m = ToyFM::new(dims, 1, 2).unwrap();
        let low = m.low_params(2).unwrap();
        assert_eq!(low.len(), 2 * dims.adapter_len());
        let high_before = m.adapters()[2..].to_vec();
        let bumped = low.with_values(low.values().iter().map(|v| v + 1.0).collect()).unwrap();
        m.set_low_params(&bumped).unwrap();
        assert_eq!(m.low_params(2).unwrap(), bumped);
        assert_eq!(m.adapters()[2..].to_vec(), high_before);
        assert!(m.low_params(0).is_err());
        assert!(m.low_params(5).is_err());
    }
}
