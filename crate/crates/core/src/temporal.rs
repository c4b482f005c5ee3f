//! Dilated causal convolutions and the four-layer multi-channel separable
//! temporal stack (MSTCN).
//!
//! Each layer runs a dense convolution (MTCN, one group) and a depthwise one
//! (STCN, one group per channel) side by side on the same input and sums their
//! ReLU outputs. Sequences are left zero-padded so every layer keeps length `T`.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{relu, relu_backward};

pub const KERNEL_SIZE: usize = 2;
pub const DILATIONS: [usize; 4] = [1, 2, 4, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilatedConvParams {
    /// `(C_out, C_in / groups, k)`.
    pub kernels: Array3<f64>,
    pub bias: Array1<f64>,
    pub dilation: usize,
    pub groups: usize,
}

impl DilatedConvParams {
    pub fn zeros(c_in: usize, c_out: usize, k: usize, dilation: usize, groups: usize) -> Self {
        Self {
            kernels: Array3::zeros((c_out, c_in / groups.max(1), k)),
            bias: Array1::zeros(c_out),
            dilation,
            groups,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.dim().0
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.dim().2
    }

    fn validate(&self, c_in: usize) -> Result<()> {
        let (c_out, per_group, k) = self.kernels.dim();
        let g = self.groups;
        if g == 0 || !c_in.is_multiple_of(g) || !c_out.is_multiple_of(g) {
            return Err(Error::shape("conv groups dividing channels", (c_in, c_out), g));
        }
        if per_group != c_in / g {
            return Err(Error::shape("conv kernel input channels", c_in / g, per_group));
        }
        if self.bias.len() != c_out {
            return Err(Error::shape("conv bias length", c_out, self.bias.len()));
        }
        if k == 0 || self.dilation == 0 {
            return Err(Error::shape("conv kernel size and dilation", "> 0", (k, self.dilation)));
        }
        Ok(())
    }
}

/// `out[c][s] = b[c] + sum_{c' in group(c)} sum_i w[c][c'][i] * x[c'][s - d*i]`,
/// with `x[.][t] = 0` for `t < 0`.
pub fn dilated_causal_conv(x: &Array2<f64>, params: &DilatedConvParams) -> Result<Array2<f64>> {
    let (c_in, t) = x.dim();
    params.validate(c_in)?;
    let (c_out, per_group, k) = params.kernels.dim();
    let out_per_group = c_out / params.groups;
    let d = params.dilation;
    let mut out = Array2::zeros((c_out, t));
    for c in 0..c_out {
        let base = (c / out_per_group) * per_group;
        let mut row = out.row_mut(c);
        row.fill(params.bias[c]);
        for ci in 0..per_group {
            let xin = x.row(base + ci);
            for i in 0..k {
                let w = params.kernels[[c, ci, i]];
                let shift = d * i;
                if w == 0.0 || shift >= t {
                    continue;
                }
                for s in shift..t {
                    row[s] += w * xin[s - shift];
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub(crate) struct ConvGrads {
    pub kernels: Array3<f64>,
    pub bias: Array1<f64>,
}

pub(crate) fn dilated_causal_conv_backward(
    x: &Array2<f64>,
    params: &DilatedConvParams,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, ConvGrads) {
    let (c_in, t) = x.dim();
    let (c_out, per_group, k) = params.kernels.dim();
    let out_per_group = c_out / params.groups;
    let d = params.dilation;
    let mut dx = Array2::zeros((c_in, t));
    let mut dk = Array3::zeros(params.kernels.dim());
    let mut db = Array1::zeros(c_out);
    for c in 0..c_out {
        let base = (c / out_per_group) * per_group;
        let g = grad_out.row(c);
        db[c] = g.sum();
        for ci in 0..per_group {
            let xin = x.row(base + ci);
            for i in 0..k {
                let shift = d * i;
                if shift >= t {
                    continue;
                }
                let w = params.kernels[[c, ci, i]];
                let mut acc = 0.0;
                for s in shift..t {
                    acc += g[s] * xin[s - shift];
                    dx[[base + ci, s - shift]] += w * g[s];
                }
                dk[[c, ci, i]] = acc;
            }
        }
    }
    (dx, ConvGrads { kernels: dk, bias: db })
}

/// Dense dilated causal convolution followed by ReLU.
pub fn mtcn_layer(x: &Array2<f64>, params: &DilatedConvParams) -> Result<Array2<f64>> {
    if params.groups != 1 {
        return Err(Error::shape("mtcn groups", 1, params.groups));
    }
    Ok(relu(&dilated_causal_conv(x, params)?))
}

/// Depthwise dilated causal convolution followed by ReLU.
pub fn stcn_layer(x: &Array2<f64>, params: &DilatedConvParams) -> Result<Array2<f64>> {
    let c = x.nrows();
    if params.groups != c || params.out_channels() != c {
        return Err(Error::shape("stcn groups = channels", c, params.groups));
    }
    Ok(relu(&dilated_causal_conv(x, params)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MstcnLayer {
    pub mtcn: DilatedConvParams,
    pub stcn: DilatedConvParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MstcnStack {
    pub layers: Vec<MstcnLayer>,
}

impl MstcnStack {
    /// All-zero stack over `channels` with the standard dilation schedule.
    pub fn zeros(channels: usize) -> Self {
        Self {
            layers: DILATIONS
                .iter()
                .map(|&d| MstcnLayer {
                    mtcn: DilatedConvParams::zeros(channels, channels, KERNEL_SIZE, d, 1),
                    stcn: DilatedConvParams::zeros(channels, channels, KERNEL_SIZE, d, channels),
                })
                .collect(),
        }
    }

    pub fn receptive_field(&self) -> usize {
        let dil: Vec<usize> = self.layers.iter().map(|l| l.mtcn.dilation).collect();
        receptive_field(KERNEL_SIZE, &dil)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalFlags {
    pub use_mtcn: bool,
    pub use_stcn: bool,
}

impl Default for TemporalFlags {
    fn default() -> Self {
        Self {
            use_mtcn: true,
            use_stcn: true,
        }
    }
}

impl TemporalFlags {
    pub fn any(&self) -> bool {
        self.use_mtcn || self.use_stcn
    }
}

struct LayerTrace {
    input: Array2<f64>,
    mtcn_pre: Option<Array2<f64>>,
    stcn_pre: Option<Array2<f64>>,
}

pub(crate) struct MstcnTrace {
    layers: Vec<LayerTrace>,
}

impl MstcnTrace {
    pub(crate) fn pre_activations(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.mtcn_pre.iter().chain(l.stcn_pre.iter()))
            .flat_map(|m| m.iter())
    }
}

/// Runs the stack on `(C, T)` input. With both branches disabled the input passes through.
pub fn mstcn_forward(x: &Array2<f64>, stack: &MstcnStack, flags: TemporalFlags) -> Result<Array2<f64>> {
    mstcn_forward_traced(x, stack, flags).map(|(y, _)| y)
}

pub(crate) fn mstcn_forward_traced(
    x: &Array2<f64>,
    stack: &MstcnStack,
    flags: TemporalFlags,
) -> Result<(Array2<f64>, MstcnTrace)> {
    let mut trace = MstcnTrace { layers: Vec::new() };
    if !flags.any() {
        return Ok((x.clone(), trace));
    }
    let mut cur = x.clone();
    for layer in &stack.layers {
        let mtcn_pre = if flags.use_mtcn {
            if layer.mtcn.groups != 1 {
                return Err(Error::shape("mtcn groups", 1, layer.mtcn.groups));
            }
            Some(dilated_causal_conv(&cur, &layer.mtcn)?)
        } else {
            None
        };
        let stcn_pre = if flags.use_stcn {
            if layer.stcn.groups != cur.nrows() {
                return Err(Error::shape("stcn groups = channels", cur.nrows(), layer.stcn.groups));
            }
            Some(dilated_causal_conv(&cur, &layer.stcn)?)
        } else {
            None
        };
        let mut next = Array2::zeros(cur.dim());
        for pre in mtcn_pre.iter().chain(stcn_pre.iter()) {
            next += &relu(pre);
        }
        trace.layers.push(LayerTrace {
            input: cur,
            mtcn_pre,
            stcn_pre,
        });
        cur = next;
    }
    Ok((cur, trace))
}

pub(crate) struct MstcnGrads {
    /// `(mtcn, stcn)` per layer; `None` for disabled branches.
    pub layers: Vec<(Option<ConvGrads>, Option<ConvGrads>)>,
}

pub(crate) fn mstcn_backward(
    trace: &MstcnTrace,
    stack: &MstcnStack,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, MstcnGrads) {
    let mut g = grad_out.clone();
    let mut grads = Vec::with_capacity(trace.layers.len());
    for (lt, layer) in trace.layers.iter().zip(&stack.layers).rev() {
        let mut dx = Array2::zeros(lt.input.dim());
        let mut branch = |pre: &Option<Array2<f64>>, params: &DilatedConvParams| {
            pre.as_ref().map(|pre| {
                let mut gp = g.clone();
                relu_backward(&mut gp, pre);
                let (dxi, cg) = dilated_causal_conv_backward(&lt.input, params, &gp);
                dx += &dxi;
                cg
            })
        };
        let gm = branch(&lt.mtcn_pre, &layer.mtcn);
        let gs = branch(&lt.stcn_pre, &layer.stcn);
        grads.push((gm, gs));
        g = dx;
    }
    grads.reverse();
    (g, MstcnGrads { layers: grads })
}

/// Trailing input steps that can reach one output step: `1 + (k-1) * sum(d)`.
pub fn receptive_field(kernel_size: usize, dilations: &[usize]) -> usize {
    1 + (kernel_size.saturating_sub(1)) * dilations.iter().sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_kernel(d: usize) -> DilatedConvParams {
        DilatedConvParams {
            kernels: Array3::from_elem((1, 1, 2), 1.0),
            bias: Array1::zeros(1),
            dilation: d,
            groups: 1,
        }
    }

    #[test]
    fn dilation_one_and_two() {
        let y = dilated_causal_conv(&array![[1.0, 2.0, 3.0, 4.0]], &unit_kernel(1)).unwrap();
        assert_eq!(y, array![[1.0, 3.0, 5.0, 7.0]]);
        let y = dilated_causal_conv(&array![[1.0, 2.0, 3.0, 4.0, 5.0]], &unit_kernel(2)).unwrap();
        assert_eq!(y, array![[1.0, 2.0, 4.0, 6.0, 8.0]]);
    }

    #[test]
    fn group_mismatch_is_rejected() {
        let p = DilatedConvParams::zeros(4, 4, 2, 1, 3);
        assert!(dilated_causal_conv(&Array2::zeros((4, 5)), &p).is_err());
        let p = DilatedConvParams::zeros(4, 4, 2, 1, 1);
        assert!(dilated_causal_conv(&Array2::zeros((3, 5)), &p).is_err());
        let dense = DilatedConvParams::zeros(4, 4, 2, 1, 1);
        assert!(stcn_layer(&Array2::zeros((4, 5)), &dense).is_err());
        let depthwise = DilatedConvParams::zeros(4, 4, 2, 1, 4);
        assert!(mtcn_layer(&Array2::zeros((4, 5)), &depthwise).is_err());
    }

    #[test]
    fn zero_kernel_mtcn_emits_relu_bias() {
        let mut p = DilatedConvParams::zeros(3, 3, 2, 1, 1);
        p.bias = array![0.5, -1.0, 2.0];
        let y = mtcn_layer(&Array2::from_elem((3, 6), 7.0), &p).unwrap();
        for s in 0..6 {
            assert_eq!(y.column(s).to_vec(), vec![0.5, 0.0, 2.0]);
        }
    }

    #[test]
    fn mtcn_mixes_channels() {
        let mut p = DilatedConvParams::zeros(2, 2, 2, 1, 1);
        p.kernels[[0, 1, 0]] = 1.0;
        let x = array![[1.0, 1.0, 1.0], [1.0, 2.0, 3.0]];
        let mut x2 = x.clone();
        x2[[1, 1]] = 5.0;
        let a = mtcn_layer(&x, &p).unwrap();
        let b = mtcn_layer(&x2, &p).unwrap();
        assert_ne!(a.row(0), b.row(0));
    }

    #[test]
    fn stcn_identity_kernel() {
        let c = 3;
        let mut p = DilatedConvParams::zeros(c, c, 2, 2, c);
        for ch in 0..c {
            p.kernels[[ch, 0, 0]] = 1.0;
        }
        let x = array![[1.0, -2.0, 3.0], [0.0, 4.0, -1.0], [2.0, 2.0, 2.0]];
        assert_eq!(stcn_layer(&x, &p).unwrap(), x.mapv(|v| v.max(0.0)));
    }

    #[test]
    fn stcn_matches_per_channel_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, t) = (8, 12);
        let x = Array2::from_shape_fn((c, t), |_| rng.random_range(-1.0..1.0));
        let mut p = DilatedConvParams::zeros(c, c, 2, 2, c);
        p.kernels.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        p.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let y = stcn_layer(&x, &p).unwrap();
        for ch in 0..c {
            let single = DilatedConvParams {
                kernels: p.kernels.slice(ndarray::s![ch..ch + 1, .., ..]).to_owned(),
                bias: array![p.bias[ch]],
                dilation: 2,
                groups: 1,
            };
            let yc = mtcn_layer(&x.slice(ndarray::s![ch..ch + 1, ..]).to_owned(), &single).unwrap();
            assert_abs_diff_eq!(y.row(ch), yc.row(0), epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_stack_gives_zero_output() {
        let x = Array2::from_elem((4, 12), 3.0);
        let y = mstcn_forward(&x, &MstcnStack::zeros(4), TemporalFlags::default()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disabled_stack_passes_through() {
        let x = Array2::from_elem((4, 12), 3.0);
        let flags = TemporalFlags {
            use_mtcn: false,
            use_stcn: false,
        };
        assert_eq!(mstcn_forward(&x, &MstcnStack::zeros(4), flags).unwrap(), x);
    }

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field(2, &[1, 2, 4, 4]), 12);
        assert_eq!(receptive_field(1, &[1, 2, 4, 4]), 1);
        assert_eq!(receptive_field(2, &[1]), 2);
        assert_eq!(MstcnStack::zeros(2).receptive_field(), 12);
    }

    #[test]
    fn conv_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (c, t) = (4, 9);
        let x = Array2::from_shape_fn((c, t), |_| rng.random_range(-1.0..1.0));
        for groups in [1, 2, 4] {
            let mut p = DilatedConvParams::zeros(c, c, 2, 2, groups);
            p.kernels.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            p.bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            let g = Array2::from_shape_fn((c, t), |_| rng.random_range(-1.0..1.0));
            let (dx, cg) = dilated_causal_conv_backward(&x, &p, &g);
            let loss = |x: &Array2<f64>, p: &DilatedConvParams| (dilated_causal_conv(x, p).unwrap() * &g).sum();
            let h = 1e-6;
            // the map is affine so central differences are exact up to rounding
            for idx in [(0, 0), (2, 5), (3, 8)] {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[idx] += h;
                xm[idx] -= h;
                assert_abs_diff_eq!(dx[idx], (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * h), epsilon = 1e-8);
            }
            for idx in [[0, 0, 0], [3, 0, 1]] {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.kernels[idx] += h;
                pm.kernels[idx] -= h;
                assert_abs_diff_eq!(
                    cg.kernels[idx],
                    (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h),
                    epsilon = 1e-8
                );
            }
            assert_abs_diff_eq!(cg.bias[1], g.row(1).sum(), epsilon = 1e-12);
        }
    }
}
