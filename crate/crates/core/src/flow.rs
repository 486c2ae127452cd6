//! Masked autoregressive flow over a standard-normal base.
//!
//! Each block is a MADE conditioner emitting a shift `μ_i` and a log-scale
//! `α_i` that depend only on coordinates `< i`. The density direction maps a
//! data point `x` to the latent `y` in one parallel pass:
//!
//! ```text
//! y_i = (x_i − μ_i(x_<i)) · exp(−α_i(x_<i)),   log|det ∂y/∂x| = −Σ α_i
//! ```
//!
//! Sampling runs the inverse, coordinate by coordinate. Blocks are separated
//! by a reversal of the coordinate order.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffkernel::{Mat, Tape, Var};
use crate::error::{FlozError, Result};

/// Log-scales are clamped to this symmetric range.
pub const LOG_SCALE_CLAMP: f64 = 7.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub n_blocks: usize,
    pub hidden_layers_per_block: usize,
    pub hidden_width: usize,
    pub seed: u64,
}

impl FlowConfig {
    /// 8 blocks of 2 hidden layers, width `max(32, 2d)`.
    pub fn default_for(d: usize) -> Self {
        FlowConfig {
            n_blocks: 8,
            hidden_layers_per_block: 2,
            hidden_width: (2 * d).max(32),
            seed: 0,
        }
    }

    /// Deeper preset for high-dimensional targets: 11 autoregressive blocks
    /// for `d ≤ 10`, 20 above.
    pub fn high_dim(d: usize) -> Self {
        FlowConfig {
            n_blocks: if d <= 10 { 11 } else { 20 },
            hidden_layers_per_block: 2,
            hidden_width: (2 * d).max(32),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.hidden_layers_per_block == 0 || self.hidden_width == 0 {
            return Err(FlozError::Configuration(format!(
                "flow sizes must be at least 1: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct MaskedLayer {
    weight: usize,
    bias: usize,
    mask: Arc<Mat>,
}

#[derive(Clone, Debug)]
struct MadeBlock {
    hidden: Vec<MaskedLayer>,
    shift: MaskedLayer,
    log_scale: MaskedLayer,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    d: usize,
    config: FlowConfig,
    params: Vec<Mat>,
    blocks: Vec<MadeBlock>,
    reverse: Arc<Vec<usize>>,
}

/// Hidden-unit degrees in `1..=max(d−1, 1)`, assigned cyclically.
fn hidden_degrees(d: usize, width: usize) -> Vec<usize> {
    let span = d.saturating_sub(1).max(1);
    (0..width).map(|k| k % span + 1).collect()
}

fn mask(rows: usize, cols: usize, keep: impl Fn(usize, usize) -> bool) -> Arc<Mat> {
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            if keep(r, c) {
                m.set(r, c, 1.0);
            }
        }
    }
    Arc::new(m)
}

impl FlowModel {
    /// Identity-initialized flow: output weights and biases are zero, so every
    /// shift and log-scale starts at exactly 0.
    pub fn new(d: usize, config: FlowConfig) -> Result<Self> {
        if d == 0 {
            return Err(FlozError::Precondition("flow dimension must be at least 1".into()));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_width;
        let deg = hidden_degrees(d, h);

        let in_mask = mask(d, h, |i, k| deg[k] > i);
        let hid_mask = mask(h, h, |k_in, k_out| deg[k_out] >= deg[k_in]);
        let out_mask = mask(h, d, |k, i| i + 1 > deg[k]);

        let mut params = Vec::new();
        let mut blocks = Vec::with_capacity(config.n_blocks);
        let mut push_layer = |params: &mut Vec<Mat>, m: &Arc<Mat>, random: bool| {
            let (fan_in, fan_out) = m.shape();
            let mut w = Mat::zeros(fan_in, fan_out);
            if random {
                let scale = 1.0 / (fan_in as f64).sqrt();
                for v in w.as_mut_slice() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = z * scale;
                }
                for (v, &keep) in w.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *v *= keep;
                }
            }
            params.push(w);
            params.push(Mat::zeros(1, fan_out));
            MaskedLayer {
                weight: params.len() - 2,
                bias: params.len() - 1,
                mask: Arc::clone(m),
            }
        };
        for _ in 0..config.n_blocks {
            let mut hidden = Vec::with_capacity(config.hidden_layers_per_block);
            for l in 0..config.hidden_layers_per_block {
                let m = if l == 0 { &in_mask } else { &hid_mask };
                hidden.push(push_layer(&mut params, m, true));
            }
            let shift = push_layer(&mut params, &out_mask, false);
            let log_scale = push_layer(&mut params, &out_mask, false);
            blocks.push(MadeBlock {
                hidden,
                shift,
                log_scale,
            });
        }
        Ok(FlowModel {
            d,
            config,
            params,
            blocks,
            reverse: Arc::new((0..d).rev().collect()),
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    pub fn set_params(&mut self, params: Vec<Mat>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(FlozError::Precondition("parameter layout mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Sets the shift bias of `block`; with zero shift weights this makes
    /// `μ` constant.
    pub fn set_shift_bias(&mut self, block: usize, values: &[f64]) {
        let b = self.blocks[block].shift.bias;
        self.params[b].as_mut_slice().copy_from_slice(values);
    }

    pub fn set_log_scale_bias(&mut self, block: usize, values: &[f64]) {
        let b = self.blocks[block].log_scale.bias;
        self.params[b].as_mut_slice().copy_from_slice(values);
    }

    fn layer_forward(&self, layer: &MaskedLayer, input: &Mat) -> Mat {
        let w = self.params[layer.weight].hadamard(&layer.mask);
        let mut out = input.matmul(&w);
        let bias = self.params[layer.bias].as_slice();
        for r in 0..out.rows() {
            for (o, b) in out.row_slice_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        out
    }

    /// Shift and clamped log-scale of block `k` evaluated at `u`.
    fn conditioner(&self, k: usize, u: &Mat) -> (Mat, Mat) {
        let block = &self.blocks[k];
        let mut h = u.clone();
        for layer in &block.hidden {
            h = self.layer_forward(layer, &h).map(f64::tanh);
        }
        let mu = self.layer_forward(&block.shift, &h);
        let alpha = self
            .layer_forward(&block.log_scale, &h)
            .map(|a| a.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP));
        (mu, alpha)
    }

    /// Conditioner outputs `(μ, α)` of one block; exposed for mask checks.
    pub fn block_conditioner(&self, block: usize, u: &Mat) -> (Mat, Mat) {
        self.conditioner(block, u)
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.d {
            return Err(FlozError::Precondition(format!(
                "flow of dimension {} applied to {}-column input",
                self.d,
                x.cols()
            )));
        }
        if !x.all_finite() {
            return Err(FlozError::Precondition("flow input contains non-finite values".into()));
        }
        Ok(())
    }

    fn permute(&self, u: &Mat) -> Mat {
        let mut out = Mat::zeros(u.rows(), u.cols());
        for r in 0..u.rows() {
            let src = u.row_slice(r);
            for (dst, &p) in out.row_slice_mut(r).iter_mut().zip(self.reverse.iter()) {
                *dst = src[p];
            }
        }
        out
    }

    /// Data → latent: `y = f⁻¹(x)` and `log|det ∂f⁻¹/∂x|` per row.
    pub fn inverse_map(&self, x: &Mat) -> Result<(Mat, Vec<f64>)> {
        self.check_input(x)?;
        let n = x.rows();
        let mut u = x.clone();
        let mut log_det = vec![0.0; n];
        for k in 0..self.blocks.len() {
            if k > 0 {
                u = self.permute(&u);
            }
            let (mu, alpha) = self.conditioner(k, &u);
            for r in 0..n {
                let row = u.row_slice_mut(r);
                let m = mu.row_slice(r);
                let a = alpha.row_slice(r);
                let mut s = 0.0;
                for i in 0..self.d {
                    row[i] = (row[i] - m[i]) * (-a[i]).exp();
                    s += a[i];
                }
                log_det[r] -= s;
            }
        }
        if !u.all_finite() || log_det.iter().any(|v| !v.is_finite()) {
            return Err(FlozError::NumericalOverflow {
                op: "inverse_map".into(),
            });
        }
        Ok((u, log_det))
    }

    /// Latent → data: `x = f(y)`, generated one coordinate at a time per block.
    pub fn forward_map(&self, y: &Mat) -> Result<Mat> {
        self.forward_map_with_log_det(y).map(|(x, _)| x)
    }

    /// `x = f(y)` together with `log|det ∂f/∂y|` per row.
    pub fn forward_map_with_log_det(&self, y: &Mat) -> Result<(Mat, Vec<f64>)> {
        self.check_input(y)?;
        let n = y.rows();
        let mut z = y.clone();
        let mut log_det = vec![0.0; n];
        for k in (0..self.blocks.len()).rev() {
            let mut u = Mat::zeros(n, self.d);
            let mut alpha_last = Mat::zeros(n, self.d);
            for i in 0..self.d {
                let (mu, alpha) = self.conditioner(k, &u);
                for r in 0..n {
                    let v = z.get(r, i) * alpha.get(r, i).exp() + mu.get(r, i);
                    u.set(r, i, v);
                }
                alpha_last = alpha;
            }
            for r in 0..n {
                log_det[r] += alpha_last.row_slice(r).iter().sum::<f64>();
            }
            z = if k > 0 { self.permute(&u) } else { u };
        }
        if !z.all_finite() {
            return Err(FlozError::NumericalOverflow {
                op: "forward_map".into(),
            });
        }
        Ok((z, log_det))
    }

    /// `log q(x) = log n(f⁻¹(x)) + log|det ∂f⁻¹/∂x|`.
    pub fn log_density(&self, x: &Mat) -> Result<Vec<f64>> {
        let (y, log_det) = self.inverse_map(x)?;
        Ok(latent_log_density(&y, &log_det))
    }

    /// Registers every parameter on `tape`, in layout order.
    pub fn register_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Differentiable `log q(x)` as an N×1 node.
    pub fn log_density_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let mut u = x;
        let mut log_det: Option<Var> = None;
        for (k, block) in self.blocks.iter().enumerate() {
            if k > 0 {
                u = tape.permute_cols(u, Arc::clone(&self.reverse));
            }
            let mut h = u;
            for layer in &block.hidden {
                let lin = tape.masked_matmul(h, vars[layer.weight], Arc::clone(&layer.mask));
                let lin = tape.add(lin, vars[layer.bias]);
                h = tape.tanh(lin);
            }
            let mu = tape.masked_matmul(h, vars[block.shift.weight], Arc::clone(&block.shift.mask));
            let mu = tape.add(mu, vars[block.shift.bias]);
            let a = tape.masked_matmul(
                h,
                vars[block.log_scale.weight],
                Arc::clone(&block.log_scale.mask),
            );
            let a = tape.add(a, vars[block.log_scale.bias]);
            let alpha = tape.clamp(a, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);

            let centered = tape.sub(u, mu);
            let neg_alpha = tape.scale(alpha, -1.0);
            let inv_scale = tape.exp(neg_alpha);
            u = tape.mul(centered, inv_scale);

            let block_det = tape.sum_rows(neg_alpha);
            log_det = Some(match log_det {
                None => block_det,
                Some(acc) => tape.add(acc, block_det),
            });
        }
        let sq = tape.mul(u, u);
        let r2 = tape.sum_rows(sq);
        let base = tape.scale(r2, -0.5);
        let base = tape.add_scalar(base, -(self.d as f64) * HALF_LN_2PI);
        match log_det {
            Some(ld) => tape.add(base, ld),
            None => base,
        }
    }

    /// Writes a checkpoint: one JSON header line, then the flat parameter
    /// array as little-endian `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| FlozError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w).map_err(|e| FlozError::io(path, e))
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            d: self.d,
            seed: self.config.seed,
            config: self.config,
            n_params: self.n_parameters(),
        };
        let line = serde_json::to_string(&header).map_err(std::io::Error::other)?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        for p in &self.params {
            for v in p.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| FlozError::io(path, e))?;
        FlowModel::read_checkpoint(BufReader::new(file))
    }

    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)
            .map_err(|e| FlozError::Schema(format!("checkpoint header: {e}")))?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| FlozError::Schema(format!("checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(FlozError::Schema(format!(
                "unknown checkpoint format `{}`",
                header.format
            )));
        }
        let mut model = FlowModel::new(header.d, header.config)?;
        if model.n_parameters() != header.n_params {
            return Err(FlozError::Schema(format!(
                "checkpoint holds {} parameters, configuration implies {}",
                header.n_params,
                model.n_parameters()
            )));
        }
        let mut buf = [0u8; 8];
        for p in model.params.iter_mut() {
            for v in p.as_mut_slice() {
                r.read_exact(&mut buf)
                    .map_err(|e| FlozError::Schema(format!("truncated checkpoint: {e}")))?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "floz-maf-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    d: usize,
    seed: u64,
    config: FlowConfig,
    n_params: usize,
}

/// `log n(y) + log_det` per row for the standard-normal base.
pub fn latent_log_density(y: &Mat, log_det: &[f64]) -> Vec<f64> {
    let d = y.cols() as f64;
    (0..y.rows())
        .map(|r| {
            let r2: f64 = y.row_slice(r).iter().map(|v| v * v).sum();
            -0.5 * r2 - d * HALF_LN_2PI + log_det[r]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(d: usize) -> FlowModel {
        FlowModel::new(
            d,
            FlowConfig {
                n_blocks: 2,
                hidden_layers_per_block: 2,
                hidden_width: 8,
                seed: 4,
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(matches!(
            FlowModel::new(0, FlowConfig::default_for(1)),
            Err(FlozError::Precondition(_))
        ));
    }

    #[test]
    fn identity_init_density_at_origin() {
        let m = FlowModel::new(2, FlowConfig::default_for(2)).unwrap();
        let lq = m.log_density(&Mat::zeros(1, 2)).unwrap();
        assert!((lq[0] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_init_inverse_is_permutation() {
        let m = FlowModel::new(3, FlowConfig::default_for(3)).unwrap();
        let x = Mat::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let (y, ld) = m.inverse_map(&x).unwrap();
        // 8 blocks → 7 reversals → reversed order
        assert_eq!(y.as_slice(), &[3.0, 2.0, 1.0]);
        assert_eq!(ld, vec![0.0]);
    }

    #[test]
    fn same_seed_same_params() {
        let a = FlowModel::new(4, FlowConfig::default_for(4).with_seed(9)).unwrap();
        let b = FlowModel::new(4, FlowConfig::default_for(4).with_seed(9)).unwrap();
        assert_eq!(a.params(), b.params());
        let c = FlowModel::new(4, FlowConfig::default_for(4).with_seed(10)).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn tape_and_plain_densities_agree() {
        let mut m = small(3);
        for (k, p) in m.params_mut().iter_mut().enumerate() {
            for (j, v) in p.as_mut_slice().iter_mut().enumerate() {
                *v += 0.05 * ((k * 31 + j * 7) as f64).sin();
            }
        }
        let x = Mat::from_rows(&[vec![0.3, -1.2, 0.8], vec![-0.4, 0.1, 2.0]]);
        let plain = m.log_density(&x).unwrap();
        let mut tape = Tape::new();
        let vars = m.register_params(&mut tape);
        let xv = tape.leaf(x);
        let lq = m.log_density_on_tape(&mut tape, &vars, xv);
        for (a, b) in tape.value(lq).as_slice().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = small(2);
        m.set_shift_bias(1, &[0.25, -0.5]);
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = FlowModel::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let m = small(2);
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(FlowModel::read_checkpoint(&buf[..]).is_err());
    }
}
