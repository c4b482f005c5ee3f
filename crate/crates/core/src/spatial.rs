//! Spatial feature extraction: a GCN over the fixed graph for local structure and
//! cosine re-weighted linear attention (CLA) over all node-feature tokens for
//! global structure. Their sum forms the graph-cosine module (GCM).
//!
//! Two matrix views of a `(P, N, f)` sample are used:
//! - local: `(N, P*f)`, one row per node, column `t*f + k`;
//! - global: `(N*f, P)`, one token per (node, feature), row `n*f + k`, column `t`.

use std::f64::consts::FRAC_PI_2;

use ndarray::{Array1, Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;

/// Rows whose attention denominator falls below this are rejected.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

pub fn to_local(sample: &Array3<f64>) -> Array2<f64> {
    let (p, n, f) = sample.dim();
    Array2::from_shape_fn((n, p * f), |(node, c)| sample[[c / f, node, c % f]])
}

pub fn from_local(m: &Array2<f64>, p: usize, f: usize) -> Array3<f64> {
    let n = m.nrows();
    Array3::from_shape_fn((p, n, f), |(t, node, k)| m[[node, t * f + k]])
}

pub fn to_global(sample: &Array3<f64>) -> Array2<f64> {
    let (p, n, f) = sample.dim();
    Array2::from_shape_fn((n * f, p), |(tok, t)| sample[[t, tok / f, tok % f]])
}

pub fn from_global(m: &Array2<f64>, n: usize, f: usize) -> Array3<f64> {
    let p = m.ncols();
    Array3::from_shape_fn((p, n, f), |(t, node, k)| m[[node * f + k, t]])
}

/// Global `(N*f, P)` to local `(N, P*f)` without going through the 3-D sample.
pub fn global_to_local(m: &Array2<f64>, f: usize) -> Array2<f64> {
    let (l, p) = m.dim();
    Array2::from_shape_fn((l / f, p * f), |(node, c)| m[[node * f + c % f, c / f]])
}

pub fn local_to_global(m: &Array2<f64>, f: usize) -> Array2<f64> {
    let (n, pf) = m.dim();
    let p = pf / f;
    Array2::from_shape_fn((n * f, p), |(tok, t)| m[[tok / f, t * f + tok % f]])
}

pub(crate) fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Zeroes `grad` where the pre-activation was not strictly positive.
pub(crate) fn relu_backward(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    Zip::from(grad).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    /// One `(d_in, d_out)` matrix per layer.
    pub weights: Vec<Array2<f64>>,
}

pub(crate) struct GcnTrace {
    /// `A H` per layer.
    propagated: Vec<Array2<f64>>,
    /// `A H W` per layer, before ReLU.
    pre: Vec<Array2<f64>>,
}

impl GcnTrace {
    pub(crate) fn pre_activations(&self) -> impl Iterator<Item = &f64> {
        self.pre.iter().flat_map(|m| m.iter())
    }
}

/// Applies `H <- ReLU(A H W)` for each layer in turn.
pub fn gcn_forward(h: &Array2<f64>, norm_a: &NormalizedAdjacency, params: &GcnParams) -> Result<Array2<f64>> {
    gcn_forward_traced(h, norm_a, params).map(|(out, _)| out)
}

pub(crate) fn gcn_forward_traced(
    h: &Array2<f64>,
    norm_a: &NormalizedAdjacency,
    params: &GcnParams,
) -> Result<(Array2<f64>, GcnTrace)> {
    if h.nrows() != norm_a.node_count() {
        return Err(Error::shape("gcn input rows", norm_a.node_count(), h.nrows()));
    }
    let mut cur = h.clone();
    let mut trace = GcnTrace {
        propagated: Vec::with_capacity(params.weights.len()),
        pre: Vec::with_capacity(params.weights.len()),
    };
    for w in &params.weights {
        if cur.ncols() != w.nrows() {
            return Err(Error::shape("gcn weight rows", cur.ncols(), w.nrows()));
        }
        let ah = norm_a.entries().dot(&cur);
        let z = ah.dot(w);
        cur = relu(&z);
        trace.propagated.push(ah);
        trace.pre.push(z);
    }
    Ok((cur, trace))
}

/// Returns the input gradient and one weight gradient per layer.
pub(crate) fn gcn_backward(
    trace: &GcnTrace,
    norm_a: &NormalizedAdjacency,
    params: &GcnParams,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let layers = params.weights.len();
    let mut grads = vec![Array2::zeros((0, 0)); layers];
    let mut g = grad_out.clone();
    for l in (0..layers).rev() {
        relu_backward(&mut g, &trace.pre[l]);
        grads[l] = trace.propagated[l].t().dot(&g);
        // the normalized adjacency is symmetric
        g = norm_a.entries().dot(&g.dot(&params.weights[l].t()));
    }
    (g, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

/// `cos(pi i / 2L)` and `sin(pi i / 2L)` for `i = 1..=L`.
pub fn cosine_weights(l: usize) -> (Array1<f64>, Array1<f64>) {
    let angle = |i: usize| FRAC_PI_2 * (i + 1) as f64 / l as f64;
    (
        Array1::from_shape_fn(l, |i| angle(i).cos()),
        Array1::from_shape_fn(l, |i| angle(i).sin()),
    )
}

/// Position-scaled feature maps of ReLU-mapped queries and keys.
#[derive(Debug, Clone)]
pub struct CosineMaps {
    pub q_cos: Array2<f64>,
    pub q_sin: Array2<f64>,
    pub k_cos: Array2<f64>,
    pub k_sin: Array2<f64>,
}

pub fn cosine_feature_maps(qp: &Array2<f64>, kp: &Array2<f64>) -> CosineMaps {
    let (cos, sin) = cosine_weights(qp.nrows());
    let cos = cos.insert_axis(Axis(1));
    let sin = sin.insert_axis(Axis(1));
    CosineMaps {
        q_cos: qp * &cos,
        q_sin: qp * &sin,
        k_cos: kp * &cos,
        k_sin: kp * &sin,
    }
}

fn check_tokens(x: &Array2<f64>, params: &ClaParams) -> Result<()> {
    for (context, w) in [
        ("cla w_q rows", &params.w_q),
        ("cla w_k rows", &params.w_k),
        ("cla w_v rows", &params.w_v),
    ] {
        if w.nrows() != x.ncols() {
            return Err(Error::shape(context, x.ncols(), w.nrows()));
        }
    }
    if x.nrows() == 0 {
        return Err(Error::shape("cla token count", "at least 1", 0));
    }
    Ok(())
}

fn check_denominator(row: usize, value: f64) -> Result<()> {
    if value >= DENOMINATOR_FLOOR {
        Ok(())
    } else {
        Err(Error::DegenerateAttention { row, value })
    }
}

/// Quadratic reference: forms every pairwise weight
/// `Q_i^cos . K_j^cos + Q_i^sin . K_j^sin` and normalizes row by row.
pub fn naive_cla_oracle(x: &Array2<f64>, params: &ClaParams) -> Result<Array2<f64>> {
    check_tokens(x, params)?;
    let maps = cosine_feature_maps(&relu(&x.dot(&params.w_q)), &relu(&x.dot(&params.w_k)));
    let v = x.dot(&params.w_v);
    let (l, dv) = v.dim();
    let mut out = Array2::zeros((l, dv));
    for i in 0..l {
        let qc = maps.q_cos.row(i);
        let qs = maps.q_sin.row(i);
        let mut den = 0.0;
        let mut row = out.row_mut(i);
        for j in 0..l {
            let w = qc.dot(&maps.k_cos.row(j)) + qs.dot(&maps.k_sin.row(j));
            den += w;
            row.scaled_add(w, &v.row(j));
        }
        check_denominator(i, den)?;
        row.mapv_inplace(|a| a / den);
    }
    Ok(out)
}

pub(crate) struct ClaTrace {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    maps: CosineMaps,
    kv_cos: Array2<f64>,
    kv_sin: Array2<f64>,
    ksum_cos: Array1<f64>,
    ksum_sin: Array1<f64>,
    den: Array1<f64>,
    empty_rows: Vec<usize>,
    out: Array2<f64>,
}

impl ClaTrace {
    pub(crate) fn output(&self) -> &Array2<f64> {
        &self.out
    }

    pub(crate) fn pre_activations(&self) -> impl Iterator<Item = &f64> {
        self.q.iter().chain(self.k.iter())
    }
}

/// What to do with a row whose attention weights are all exactly zero.
///
/// Every pairwise weight is nonnegative, so a zero denominator means the row has no
/// attention mass at all and its numerator is exactly zero as well.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyRows {
    /// Raise [`Error::DegenerateAttention`].
    Reject,
    /// Emit a zero row with zero gradient. Positive denominators below the floor
    /// still raise.
    Zero,
}

/// Linear-time CLA: key-side aggregates `K^T V` and `K^T 1` are formed once, so
/// no `L x L` matrix is ever built. Cost is `O(L P^2)`.
pub fn cla_forward(x: &Array2<f64>, params: &ClaParams) -> Result<Array2<f64>> {
    cla_forward_traced(x, params, EmptyRows::Reject).map(|t| t.out)
}

/// [`cla_forward`] with an explicit policy for rows without attention mass.
pub fn cla_forward_with(x: &Array2<f64>, params: &ClaParams, empty: EmptyRows) -> Result<Array2<f64>> {
    cla_forward_traced(x, params, empty).map(|t| t.out)
}

pub(crate) fn cla_forward_traced(x: &Array2<f64>, params: &ClaParams, empty: EmptyRows) -> Result<ClaTrace> {
    check_tokens(x, params)?;
    let q = x.dot(&params.w_q);
    let k = x.dot(&params.w_k);
    let v = x.dot(&params.w_v);
    let maps = cosine_feature_maps(&relu(&q), &relu(&k));
    let kv_cos = maps.k_cos.t().dot(&v);
    let kv_sin = maps.k_sin.t().dot(&v);
    let ksum_cos = maps.k_cos.sum_axis(Axis(0));
    let ksum_sin = maps.k_sin.sum_axis(Axis(0));
    let mut den = maps.q_cos.dot(&ksum_cos) + maps.q_sin.dot(&ksum_sin);
    let mut empty_rows = Vec::new();
    for (i, d) in den.iter_mut().enumerate() {
        if *d == 0.0 && empty == EmptyRows::Zero {
            // numerator is exactly zero here; dividing by one yields the zero row
            empty_rows.push(i);
            *d = 1.0;
            continue;
        }
        check_denominator(i, *d)?;
    }
    let num = maps.q_cos.dot(&kv_cos) + maps.q_sin.dot(&kv_sin);
    let out = num / den.view().insert_axis(Axis(1));
    Ok(ClaTrace {
        x: x.clone(),
        q,
        k,
        v,
        maps,
        kv_cos,
        kv_sin,
        ksum_cos,
        ksum_sin,
        den,
        empty_rows,
        out,
    })
}

#[derive(Debug, Clone)]
pub(crate) struct ClaGrads {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

/// Reverse pass through [`cla_forward`], also linear in the token count.
pub(crate) fn cla_backward(trace: &ClaTrace, params: &ClaParams, grad_out: &Array2<f64>) -> (Array2<f64>, ClaGrads) {
    let l = trace.x.nrows();
    let den_col = trace.den.view().insert_axis(Axis(1));
    let mut d_num = grad_out / &den_col;
    for &i in &trace.empty_rows {
        d_num.row_mut(i).fill(0.0);
    }
    // d out_i / d den_i = -out_i / den_i
    let d_den: Array1<f64> = (grad_out * &trace.out).sum_axis(Axis(1)) / &trace.den * -1.0;
    let d_den_col = d_den.view().insert_axis(Axis(1));

    let m = &trace.maps;
    let d_q_cos = d_num.dot(&trace.kv_cos.t()) + &d_den_col * &trace.ksum_cos.view().insert_axis(Axis(0));
    let d_q_sin = d_num.dot(&trace.kv_sin.t()) + &d_den_col * &trace.ksum_sin.view().insert_axis(Axis(0));
    let d_kv_cos = m.q_cos.t().dot(&d_num);
    let d_kv_sin = m.q_sin.t().dot(&d_num);
    let d_ksum_cos = m.q_cos.t().dot(&d_den);
    let d_ksum_sin = m.q_sin.t().dot(&d_den);

    let d_k_cos = trace.v.dot(&d_kv_cos.t()) + d_ksum_cos.view().insert_axis(Axis(0));
    let d_k_sin = trace.v.dot(&d_kv_sin.t()) + d_ksum_sin.view().insert_axis(Axis(0));
    let d_v = m.k_cos.dot(&d_kv_cos) + m.k_sin.dot(&d_kv_sin);

    let (cos, sin) = cosine_weights(l);
    let cos = cos.insert_axis(Axis(1));
    let sin = sin.insert_axis(Axis(1));
    let mut d_q = &d_q_cos * &cos + &d_q_sin * &sin;
    let mut d_k = &d_k_cos * &cos + &d_k_sin * &sin;
    relu_backward(&mut d_q, &trace.q);
    relu_backward(&mut d_k, &trace.k);

    let grads = ClaGrads {
        w_q: trace.x.t().dot(&d_q),
        w_k: trace.x.t().dot(&d_k),
        w_v: trace.x.t().dot(&d_v),
    };
    let d_x = d_q.dot(&params.w_q.t()) + d_k.dot(&params.w_k.t()) + d_v.dot(&params.w_v.t());
    (d_x, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcmFlags {
    pub use_gcn: bool,
    pub use_cla: bool,
}

impl Default for GcmFlags {
    fn default() -> Self {
        Self {
            use_gcn: true,
            use_cla: true,
        }
    }
}

/// Graph-cosine module on a `(P, N, f)` sample: sum of the enabled GCN and CLA branches.
pub fn gcm_forward(
    sample: &Array3<f64>,
    norm_a: &NormalizedAdjacency,
    gcn: &GcnParams,
    cla: &ClaParams,
    flags: GcmFlags,
) -> Result<Array3<f64>> {
    let (p, n, f) = sample.dim();
    if !flags.use_gcn && !flags.use_cla {
        return Err(Error::Config(vec![
            "graph-cosine module needs at least one branch".into()
        ]));
    }
    let mut out = Array3::zeros((p, n, f));
    if flags.use_gcn {
        let local = gcn_forward(&to_local(sample), norm_a, gcn)?;
        if local.ncols() != p * f {
            return Err(Error::shape("gcn output width", p * f, local.ncols()));
        }
        out += &from_local(&local, p, f);
    }
    if flags.use_cla {
        let global = cla_forward(&to_global(sample), cla)?;
        if global.ncols() != p {
            return Err(Error::shape("cla output width", p, global.ncols()));
        }
        out += &from_global(&global, n, f);
    }
    Ok(out)
}
