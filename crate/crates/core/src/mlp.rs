//! Small fully connected networks evaluated in batches, with hand-written
//! backward passes.
//!
//! Parameters live in one flat vector (per layer: row-major weights, then
//! biases) so optimizers and checkpoints can treat a network as a slice.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{sigmoid, softplus, softplus_inv};

/// Negative-side slope of the hidden-layer leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Rows per parallel work item. Fixed so reductions do not depend on the
/// number of worker threads.
const ROW_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMap {
    Identity,
    Softplus,
    Sigmoid,
}

impl OutputMap {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            OutputMap::Identity => z,
            OutputMap::Softplus => softplus(z),
            OutputMap::Sigmoid => sigmoid(z),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            OutputMap::Identity => 1.0,
            OutputMap::Softplus => sigmoid(z),
            OutputMap::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }

    pub fn code(self) -> u32 {
        match self {
            OutputMap::Identity => 0,
            OutputMap::Softplus => 1,
            OutputMap::Sigmoid => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(OutputMap::Identity),
            1 => Some(OutputMap::Softplus),
            2 => Some(OutputMap::Sigmoid),
            _ => None,
        }
    }
}

#[inline]
fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

#[inline]
fn leaky_derivative(z: f64) -> f64 {
    // Left branch at the kink.
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    dims: Vec<usize>,
    params: Vec<f64>,
    output_map: OutputMap,
}

/// Activations saved by [`MlpParams::forward_saved`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    rows: usize,
    input: Vec<f64>,
    /// Pre-activations of every layer, `rows x dims[l + 1]` each.
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|d| d[0] * d[1] + d[1]).sum()
}

impl MlpParams {
    /// All-zero network: every output equals `output_map(0)`.
    pub fn zeros(dims: &[usize], output_map: OutputMap) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("bad layer dims {dims:?}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; param_count(dims)],
            output_map,
        })
    }

    /// Glorot-uniform weights and zero biases; the last-layer bias is set to
    /// `output_bias`.
    pub fn init<R: Rng>(dims: &[usize], output_map: OutputMap, output_bias: f64, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(dims, output_map)?;
        for l in 0..mlp.layers() {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = mlp.layer_offsets(l);
            for v in &mut mlp.params[w..w + fan_in * fan_out] {
                *v = rng.random_range(-bound..bound);
            }
        }
        let last = mlp.layers() - 1;
        let (_, b) = mlp.layer_offsets(last);
        mlp.params[b..b + dims[last + 1]].fill(output_bias);
        Ok(mlp)
    }

    /// Bias that makes a softplus output start at `target`.
    pub fn softplus_bias_for(target: f64) -> f64 {
        softplus_inv(target)
    }

    pub fn from_parts(dims: Vec<usize>, params: Vec<f64>, output_map: OutputMap) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("bad layer dims {dims:?}")));
        }
        if params.len() != param_count(&dims) {
            return Err(Error::shape(format!(
                "{} parameters for dims {dims:?} (expected {})",
                params.len(),
                param_count(&dims)
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("MLP parameters".into()));
        }
        Ok(Self {
            dims,
            params,
            output_map,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn output_map(&self) -> OutputMap {
        self.output_map
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Index range of the bias vector of layer `l` inside the flat parameters.
    pub fn bias_range(&self, l: usize) -> std::ops::Range<usize> {
        let (_, bo) = self.layer_offsets(l);
        bo..bo + self.dims[l + 1]
    }

    /// Offsets of the weight matrix and bias vector of layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let before = param_count(&self.dims[..=l]);
        (before, before + self.dims[l] * self.dims[l + 1])
    }

    fn check_input(&self, input: &[f64]) -> usize {
        assert_eq!(
            input.len() % self.input_dim(),
            0,
            "input length {} not a multiple of {}",
            input.len(),
            self.input_dim()
        );
        input.len() / self.input_dim()
    }

    fn forward_rows(&self, input: &[f64], mut pre: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
        let rows = input.len() / self.input_dim();
        let mut act = input.to_vec();
        for l in 0..self.layers() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let (wo, bo) = self.layer_offsets(l);
            let w = &self.params[wo..wo + din * dout];
            let b = &self.params[bo..bo + dout];
            let mut z = vec![0.0; rows * dout];
            // Four rows at a time give the CPU independent accumulation
            // chains; each row still sums in input order.
            let mut r = 0;
            while r + 4 <= rows {
                let x0 = &act[r * din..(r + 1) * din];
                let x1 = &act[(r + 1) * din..(r + 2) * din];
                let x2 = &act[(r + 2) * din..(r + 3) * din];
                let x3 = &act[(r + 3) * din..(r + 4) * din];
                for o in 0..dout {
                    let wr = &w[o * din..(o + 1) * din];
                    let (mut a0, mut a1, mut a2, mut a3) = (b[o], b[o], b[o], b[o]);
                    for ((((&wi, &v0), &v1), &v2), &v3) in wr.iter().zip(x0).zip(x1).zip(x2).zip(x3) {
                        a0 += wi * v0;
                        a1 += wi * v1;
                        a2 += wi * v2;
                        a3 += wi * v3;
                    }
                    z[r * dout + o] = a0;
                    z[(r + 1) * dout + o] = a1;
                    z[(r + 2) * dout + o] = a2;
                    z[(r + 3) * dout + o] = a3;
                }
                r += 4;
            }
            for r in r..rows {
                let x = &act[r * din..(r + 1) * din];
                let zr = &mut z[r * dout..(r + 1) * dout];
                for o in 0..dout {
                    let wr = &w[o * din..(o + 1) * din];
                    let mut acc = b[o];
                    for (&wi, &xi) in wr.iter().zip(x) {
                        acc += wi * xi;
                    }
                    zr[o] = acc;
                }
            }
            let last = l + 1 == self.layers();
            act = if last {
                z.iter().map(|&v| self.output_map.apply(v)).collect()
            } else {
                z.iter().map(|&v| leaky(v)).collect()
            };
            if let Some(p) = pre.as_deref_mut() {
                p.push(z);
            }
        }
        act
    }

    /// Evaluates a `rows x input_dim` batch.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.check_input(input);
        let din = self.input_dim();
        input
            .par_chunks(ROW_CHUNK * din)
            .flat_map_iter(|chunk| self.forward_rows(chunk, None))
            .collect()
    }

    pub fn forward_saved(&self, input: &[f64]) -> (Vec<f64>, MlpCache) {
        let rows = self.check_input(input);
        let din = self.input_dim();
        let parts: Vec<(Vec<f64>, Vec<Vec<f64>>)> = input
            .par_chunks(ROW_CHUNK * din)
            .map(|chunk| {
                let mut pre = Vec::with_capacity(self.layers());
                let out = self.forward_rows(chunk, Some(&mut pre));
                (out, pre)
            })
            .collect();
        let mut out = Vec::with_capacity(rows * self.output_dim());
        let mut pre: Vec<Vec<f64>> = (0..self.layers())
            .map(|l| Vec::with_capacity(rows * self.dims[l + 1]))
            .collect();
        for (o, p) in parts {
            out.extend(o);
            for (dst, src) in pre.iter_mut().zip(p) {
                dst.extend(src);
            }
        }
        (
            out,
            MlpCache {
                rows,
                input: input.to_vec(),
                pre,
            },
        )
    }

    fn backward_rows(
        &self,
        input: &[f64],
        pre: &[&[f64]],
        d_out: &[f64],
        param_grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let rows = input.len() / self.input_dim();
        let nl = self.layers();
        // Cotangent on the last pre-activation.
        let mut dz: Vec<f64> = d_out
            .iter()
            .zip(pre[nl - 1])
            .map(|(g, &z)| g * self.output_map.derivative(z))
            .collect();
        let mut pg = param_grad;
        for l in (0..nl).rev() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let (wo, bo) = self.layer_offsets(l);
            let w = &self.params[wo..wo + din * dout];
            let layer_in: Vec<f64> = if l == 0 {
                input.to_vec()
            } else {
                pre[l - 1].iter().map(|&z| leaky(z)).collect()
            };
            if let Some(g) = pg.as_deref_mut() {
                for r in 0..rows {
                    let x = &layer_in[r * din..(r + 1) * din];
                    let d = &dz[r * dout..(r + 1) * dout];
                    for o in 0..dout {
                        let go = d[o];
                        if go == 0.0 {
                            continue;
                        }
                        let gw = &mut g[wo + o * din..wo + (o + 1) * din];
                        for (gi, &xi) in gw.iter_mut().zip(x) {
                            *gi += go * xi;
                        }
                        g[bo + o] += go;
                    }
                }
            }
            let mut dx = vec![0.0; rows * din];
            for r in 0..rows {
                let d = &dz[r * dout..(r + 1) * dout];
                let dxr = &mut dx[r * din..(r + 1) * din];
                for o in 0..dout {
                    let go = d[o];
                    if go == 0.0 {
                        continue;
                    }
                    let wr = &w[o * din..(o + 1) * din];
                    for (v, &wi) in dxr.iter_mut().zip(wr) {
                        *v += go * wi;
                    }
                }
            }
            if l > 0 {
                for (v, &z) in dx.iter_mut().zip(pre[l - 1]) {
                    *v *= leaky_derivative(z);
                }
            }
            dz = dx;
        }
        dz
    }

    /// Pulls `d_out` back through the saved evaluation. Returns the input
    /// cotangent; parameter gradients are added into `param_grad` when given.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], param_grad: Option<&mut [f64]>) -> Vec<f64> {
        assert_eq!(d_out.len(), cache.rows * self.output_dim());
        let din = self.input_dim();
        let n_chunks = cache.rows.div_ceil(ROW_CHUNK);
        let want_params = param_grad.is_some();
        let parts: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let r0 = c * ROW_CHUNK;
                let r1 = ((c + 1) * ROW_CHUNK).min(cache.rows);
                let pre: Vec<&[f64]> = (0..self.layers())
                    .map(|l| &cache.pre[l][r0 * self.dims[l + 1]..r1 * self.dims[l + 1]])
                    .collect();
                let mut g = want_params.then(|| vec![0.0; self.num_params()]);
                let dx = self.backward_rows(
                    &cache.input[r0 * din..r1 * din],
                    &pre,
                    &d_out[r0 * self.output_dim()..r1 * self.output_dim()],
                    g.as_deref_mut(),
                );
                (dx, g)
            })
            .collect();
        let mut dx = Vec::with_capacity(cache.rows * din);
        let mut pg = param_grad;
        for (d, g) in parts {
            dx.extend(d);
            if let (Some(acc), Some(g)) = (pg.as_deref_mut(), g) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        dx
    }

    /// Smallest |pre-activation| over hidden units, i.e. the distance to the
    /// nearest leaky-ReLU kink. Used to vet gradient-check fixtures.
    pub fn min_hidden_margin(&self, cache: &MlpCache) -> f64 {
        cache.pre[..self.layers() - 1]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}
