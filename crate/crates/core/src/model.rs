//! The full network: a chain of ST-Layers (graph-cosine module followed by the
//! temporal stack, wrapped in a residual) and a per-token prediction head.
//!
//! Internally every sample is carried in the global `(N*f, P)` layout; the GCN
//! branch converts to the local layout and back.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::FEATURES;
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::spatial::{
    cla_backward, cla_forward_traced, from_global, gcn_backward, gcn_forward_traced, global_to_local, local_to_global,
    relu, relu_backward, to_global, ClaParams, ClaTrace, EmptyRows, GcmFlags, GcnParams, GcnTrace,
};
use crate::temporal::{mstcn_backward, mstcn_forward_traced, DilatedConvParams, MstcnStack, MstcnTrace, TemporalFlags};

/// Which sub-blocks are active. The defaults enable everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_gcn: bool,
    pub use_cla: bool,
    pub use_mtcn: bool,
    pub use_stcn: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_gcn: true,
            use_cla: true,
            use_mtcn: true,
            use_stcn: true,
        }
    }
}

impl AblationFlags {
    pub fn gcm(&self) -> GcmFlags {
        GcmFlags {
            use_gcn: self.use_gcn,
            use_cla: self.use_cla,
        }
    }

    pub fn temporal(&self) -> TemporalFlags {
        TemporalFlags {
            use_mtcn: self.use_mtcn,
            use_stcn: self.use_stcn,
        }
    }

    pub fn uses_gcm(&self) -> bool {
        self.use_gcn || self.use_cla
    }

    /// Short label for reports, e.g. `MVFN` or `NO-GCM`.
    pub fn label(&self) -> String {
        let gcm = self.uses_gcm();
        let tmp = self.temporal().any();
        let mut parts = Vec::new();
        if !gcm {
            parts.push("NO-GCM");
        } else if !self.use_gcn {
            parts.push("NO-GCN");
        } else if !self.use_cla {
            parts.push("NO-CLA");
        }
        if !tmp {
            parts.push("NO-MSTCN");
        } else if !self.use_mtcn {
            parts.push("NO-MTCN");
        } else if !self.use_stcn {
            parts.push("NO-STCN");
        }
        if parts.is_empty() {
            "MVFN".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvfnConfig {
    pub nodes: usize,
    pub features: usize,
    pub input_steps: usize,
    pub output_steps: usize,
    pub st_layers: usize,
    pub flags: AblationFlags,
    pub seed: u64,
}

impl MvfnConfig {
    pub fn new(nodes: usize) -> Self {
        Self {
            nodes,
            features: FEATURES,
            input_steps: 12,
            output_steps: 12,
            st_layers: 2,
            flags: AblationFlags::default(),
            seed: 0,
        }
    }

    /// Token count of the global layout, `N * f`.
    pub fn tokens(&self) -> usize {
        self.nodes * self.features
    }

    /// Hidden width of the prediction head.
    pub fn head_hidden(&self) -> usize {
        4 * self.input_steps
    }

    /// Collects every violation instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.nodes == 0 {
            errs.push("nodes must be at least 1".to_string());
        }
        if self.features == 0 {
            errs.push("features must be at least 1".to_string());
        }
        if self.input_steps == 0 || self.output_steps == 0 {
            errs.push("input and output steps must be at least 1".to_string());
        }
        if self.st_layers == 0 {
            errs.push("st_layers must be at least 1".to_string());
        }
        if !self.flags.uses_gcm() && !self.flags.temporal().any() {
            errs.push(
                "all spatial and temporal blocks disabled; each ST-Layer would reduce to doubling its input"
                    .to_string(),
            );
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StLayerParams {
    pub gcn: GcnParams,
    pub cla: ClaParams,
    pub mstcn: MstcnStack,
}

/// `ReLU(X W1 + b1) W2 + b2`, applied to each token row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<StLayerParams>,
    pub head: HeadParams,
}

fn conv_tensors<'a>(prefix: &str, c: &'a DilatedConvParams, out: &mut Vec<(String, &'a [f64])>) {
    out.push((
        format!("{prefix}.kernels"),
        c.kernels.as_slice().expect("standard layout"),
    ));
    out.push((format!("{prefix}.bias"), c.bias.as_slice().expect("standard layout")));
}

fn conv_tensors_mut<'a>(prefix: &str, c: &'a mut DilatedConvParams, out: &mut Vec<(String, &'a mut [f64])>) {
    out.push((
        format!("{prefix}.kernels"),
        c.kernels.as_slice_mut().expect("standard layout"),
    ));
    out.push((
        format!("{prefix}.bias"),
        c.bias.as_slice_mut().expect("standard layout"),
    ));
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &MvfnConfig) -> Self {
        let p = config.input_steps;
        let pf = p * config.features;
        let c = config.tokens();
        let layer = || StLayerParams {
            gcn: GcnParams {
                weights: vec![Array2::zeros((pf, pf))],
            },
            cla: ClaParams {
                w_q: Array2::zeros((p, p)),
                w_k: Array2::zeros((p, p)),
                w_v: Array2::zeros((p, p)),
            },
            mstcn: MstcnStack::zeros(c),
        };
        let hidden = config.head_hidden();
        Self {
            layers: (0..config.st_layers).map(|_| layer()).collect(),
            head: HeadParams {
                w1: Array2::zeros((p, hidden)),
                b1: Array1::zeros(hidden),
                w2: Array2::zeros((hidden, config.output_steps)),
                b2: Array1::zeros(config.output_steps),
            },
        }
    }

    /// Every tensor with its path, in checkpoint traversal order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (j, w) in l.gcn.weights.iter().enumerate() {
                out.push((format!("layer{i}.gcn.w{j}"), w.as_slice().expect("standard layout")));
            }
            out.push((
                format!("layer{i}.cla.w_q"),
                l.cla.w_q.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("layer{i}.cla.w_k"),
                l.cla.w_k.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("layer{i}.cla.w_v"),
                l.cla.w_v.as_slice().expect("standard layout"),
            ));
            for (j, t) in l.mstcn.layers.iter().enumerate() {
                conv_tensors(&format!("layer{i}.mstcn{j}.mtcn"), &t.mtcn, &mut out);
                conv_tensors(&format!("layer{i}.mstcn{j}.stcn"), &t.stcn, &mut out);
            }
        }
        let h = &self.head;
        out.push(("head.w1".into(), h.w1.as_slice().expect("standard layout")));
        out.push(("head.b1".into(), h.b1.as_slice().expect("standard layout")));
        out.push(("head.w2".into(), h.w2.as_slice().expect("standard layout")));
        out.push(("head.b2".into(), h.b2.as_slice().expect("standard layout")));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (j, w) in l.gcn.weights.iter_mut().enumerate() {
                out.push((format!("layer{i}.gcn.w{j}"), w.as_slice_mut().expect("standard layout")));
            }
            out.push((
                format!("layer{i}.cla.w_q"),
                l.cla.w_q.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("layer{i}.cla.w_k"),
                l.cla.w_k.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("layer{i}.cla.w_v"),
                l.cla.w_v.as_slice_mut().expect("standard layout"),
            ));
            for (j, t) in l.mstcn.layers.iter_mut().enumerate() {
                conv_tensors_mut(&format!("layer{i}.mstcn{j}.mtcn"), &mut t.mtcn, &mut out);
                conv_tensors_mut(&format!("layer{i}.mstcn{j}.stcn"), &mut t.stcn, &mut out);
            }
        }
        let h = &mut self.head;
        out.push(("head.w1".into(), h.w1.as_slice_mut().expect("standard layout")));
        out.push(("head.b1".into(), h.b1.as_slice_mut().expect("standard layout")));
        out.push(("head.w2".into(), h.w2.as_slice_mut().expect("standard layout")));
        out.push(("head.b2".into(), h.b2.as_slice_mut().expect("standard layout")));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let count = self.param_count();
        if flat.len() != count {
            return Err(Error::shape("flat parameter vector", count, flat.len()));
        }
        let mut off = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    /// Path of the tensor containing flat coordinate `index`.
    pub fn coordinate_path(&self, index: usize) -> Option<String> {
        let mut off = 0;
        for (name, t) in self.tensors() {
            if index < off + t.len() {
                return Some(format!("{name}[{}]", index - off));
            }
            off += t.len();
        }
        None
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Glorot-uniform weights, zero biases; CLA query and key matrices get a +0.1
/// shift so the ReLU feature maps start alive. Deterministic in `config.seed`.
pub fn init_params(config: &MvfnConfig) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::zeros(config);
    let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize, shift: f64| {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        for v in w.iter_mut() {
            *v = dist.sample(&mut rng) + shift;
        }
    };
    type Fill<'a> = dyn FnMut(&mut [f64], usize, usize, f64) + 'a;
    let conv = |c: &mut DilatedConvParams, fill: &mut Fill| {
        let (c_out, per_group, k) = c.kernels.dim();
        let out_per_group = c_out / c.groups;
        fill(
            c.kernels.as_slice_mut().expect("standard layout"),
            per_group * k,
            out_per_group * k,
            0.0,
        );
    };
    for layer in &mut params.layers {
        for w in &mut layer.gcn.weights {
            let (i, o) = w.dim();
            fill(w.as_slice_mut().expect("standard layout"), i, o, 0.0);
        }
        let p = layer.cla.w_q.nrows();
        fill(layer.cla.w_q.as_slice_mut().expect("standard layout"), p, p, 0.1);
        fill(layer.cla.w_k.as_slice_mut().expect("standard layout"), p, p, 0.1);
        fill(layer.cla.w_v.as_slice_mut().expect("standard layout"), p, p, 0.0);
        for t in &mut layer.mstcn.layers {
            conv(&mut t.mtcn, &mut fill);
            conv(&mut t.stcn, &mut fill);
        }
    }
    let h = &mut params.head;
    let (i, o) = h.w1.dim();
    fill(h.w1.as_slice_mut().expect("standard layout"), i, o, 0.0);
    let (i, o) = h.w2.dim();
    fill(h.w2.as_slice_mut().expect("standard layout"), i, o, 0.0);
    params
}

struct StLayerTrace {
    gcn: Option<GcnTrace>,
    cla: Option<ClaTrace>,
    mstcn: MstcnTrace,
}

struct HeadTrace {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

/// Intermediate values of one forward pass, kept for the reverse pass.
pub struct ForwardTrace {
    layers: Vec<StLayerTrace>,
    head: HeadTrace,
    output: Array2<f64>,
}

impl ForwardTrace {
    /// Prediction in the global `(N*f, Q)` layout.
    pub fn output_global(&self) -> &Array2<f64> {
        &self.output
    }

    /// Every value that enters a ReLU, in a fixed order.
    pub fn pre_activations(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Some(g) = &l.gcn {
                out.extend(g.pre_activations());
            }
            if let Some(c) = &l.cla {
                out.extend(c.pre_activations());
            }
            out.extend(l.mstcn.pre_activations());
        }
        out.extend(self.head.pre.iter());
        out
    }
}

fn st_layer_global(
    x: &Array2<f64>,
    layer: &StLayerParams,
    adjacency: &NormalizedAdjacency,
    flags: AblationFlags,
    features: usize,
) -> Result<(Array2<f64>, StLayerTrace)> {
    let mut gcn_trace = None;
    let mut cla_trace = None;
    let spatial = if flags.uses_gcm() {
        let mut acc = Array2::zeros(x.dim());
        if flags.use_gcn {
            let (out, tr) = gcn_forward_traced(&global_to_local(x, features), adjacency, &layer.gcn)?;
            acc += &local_to_global(&out, features);
            gcn_trace = Some(tr);
        }
        if flags.use_cla {
            let tr = cla_forward_traced(x, &layer.cla, EmptyRows::Zero)?;
            acc += tr.output();
            cla_trace = Some(tr);
        }
        acc
    } else {
        x.clone()
    };
    let (temporal, mstcn) = mstcn_forward_traced(&spatial, &layer.mstcn, flags.temporal())?;
    Ok((
        temporal + x,
        StLayerTrace {
            gcn: gcn_trace,
            cla: cla_trace,
            mstcn,
        },
    ))
}

/// One ST-Layer on a `(P, N, f)` sample: `MSTCN(GCM(X)) + X`.
pub fn st_layer_forward(
    x: &Array3<f64>,
    layer: &StLayerParams,
    adjacency: &NormalizedAdjacency,
    flags: AblationFlags,
) -> Result<Array3<f64>> {
    let (_, n, f) = x.dim();
    let (out, _) = st_layer_global(&to_global(x), layer, adjacency, flags, f)?;
    Ok(from_global(&out, n, f))
}

fn head_forward(x: &Array2<f64>, head: &HeadParams) -> Result<(Array2<f64>, HeadTrace)> {
    if x.ncols() != head.w1.nrows() {
        return Err(Error::shape("prediction head input width", head.w1.nrows(), x.ncols()));
    }
    let pre = x.dot(&head.w1) + &head.b1;
    let hidden = relu(&pre);
    let out = hidden.dot(&head.w2) + &head.b2;
    Ok((
        out,
        HeadTrace {
            input: x.clone(),
            pre,
            hidden,
        },
    ))
}

/// Applies the head to each `(N*f, P)` token row, giving `(N*f, Q)`.
pub fn prediction_layer(x: &Array2<f64>, head: &HeadParams) -> Result<Array2<f64>> {
    head_forward(x, head).map(|(out, _)| out)
}

/// A configured network bound to its graph.
#[derive(Debug, Clone)]
pub struct Mvfn {
    pub config: MvfnConfig,
    pub adjacency: NormalizedAdjacency,
}

impl Mvfn {
    pub fn new(config: MvfnConfig, adjacency: NormalizedAdjacency) -> Result<Self> {
        config.validate()?;
        if adjacency.node_count() != config.nodes {
            return Err(Error::shape("adjacency size", config.nodes, adjacency.node_count()));
        }
        Ok(Self { config, adjacency })
    }

    fn check_input(&self, input: &Array3<f64>) -> Result<()> {
        let c = &self.config;
        let expected = (c.input_steps, c.nodes, c.features);
        if input.dim() != expected {
            return Err(Error::shape("model input", expected, input.dim()));
        }
        Ok(())
    }

    /// Maps a scaled `(P, N, f)` input to a `(Q, N, f)` prediction.
    pub fn forward(&self, params: &ModelParams, input: &Array3<f64>) -> Result<Array3<f64>> {
        let trace = self.forward_traced(params, input)?;
        Ok(from_global(&trace.output, self.config.nodes, self.config.features))
    }

    pub fn forward_traced(&self, params: &ModelParams, input: &Array3<f64>) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let x0 = to_global(input);
        let mut x = x0.clone();
        let mut layers = Vec::with_capacity(params.layers.len());
        for lp in &params.layers {
            let (next, tr) = st_layer_global(&x, lp, &self.adjacency, self.config.flags, self.config.features)?;
            layers.push(tr);
            x = next;
        }
        // input skip into the head
        let (output, head) = head_forward(&(x + &x0), &params.head)?;
        Ok(ForwardTrace { layers, head, output })
    }

    /// Parameter gradients given the loss gradient w.r.t. the `(N*f, Q)` output.
    /// Disabled sub-blocks receive exactly zero gradient.
    pub fn backward(&self, params: &ModelParams, trace: &ForwardTrace, grad_out: &Array2<f64>) -> ModelParams {
        let f = self.config.features;
        let mut grads = ModelParams::zeros(&self.config);
        let head = &params.head;
        let ht = &trace.head;
        grads.head.b2 = grad_out.sum_axis(Axis(0));
        grads.head.w2 = ht.hidden.t().dot(grad_out);
        let mut d_pre = grad_out.dot(&head.w2.t());
        relu_backward(&mut d_pre, &ht.pre);
        grads.head.b1 = d_pre.sum_axis(Axis(0));
        grads.head.w1 = ht.input.t().dot(&d_pre);
        let d_in = d_pre.dot(&head.w1.t());

        // d_in flows both to the last layer output and to the raw input skip
        let mut g = d_in;
        for ((lt, lp), lg) in trace
            .layers
            .iter()
            .zip(&params.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            let (d_spatial, mg) = mstcn_backward(&lt.mstcn, &lp.mstcn, &g);
            for ((gm, gs), dst) in mg.layers.into_iter().zip(lg.mstcn.layers.iter_mut()) {
                if let Some(gm) = gm {
                    dst.mtcn.kernels = gm.kernels;
                    dst.mtcn.bias = gm.bias;
                }
                if let Some(gs) = gs {
                    dst.stcn.kernels = gs.kernels;
                    dst.stcn.bias = gs.bias;
                }
            }
            let mut dx = g.clone();
            if lt.gcn.is_none() && lt.cla.is_none() {
                dx += &d_spatial;
            }
            if let Some(gt) = &lt.gcn {
                let (dh, dw) = gcn_backward(gt, &self.adjacency, &lp.gcn, &global_to_local(&d_spatial, f));
                dx += &local_to_global(&dh, f);
                lg.gcn.weights = dw;
            }
            if let Some(ct) = &lt.cla {
                let (dxc, cg) = cla_backward(ct, &lp.cla, &d_spatial);
                dx += &dxc;
                lg.cla.w_q = cg.w_q;
                lg.cla.w_k = cg.w_k;
                lg.cla.w_v = cg.w_v;
            }
            g = dx;
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalize_adjacency, AdjacencyMatrix};
    use crate::spatial::gcm_forward;
    use crate::temporal::mstcn_forward;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn tiny_model(flags: AblationFlags) -> Mvfn {
        let mut cfg = MvfnConfig::new(3);
        cfg.flags = flags;
        cfg.seed = 17;
        let a = AdjacencyMatrix::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        Mvfn::new(cfg, normalize_adjacency(&a)).unwrap()
    }

    fn rand_input(seed: u64, p: usize, n: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((p, n, 2), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut cfg = MvfnConfig::new(4);
        cfg.seed = 5;
        assert_eq!(init_params(&cfg).to_flat(), init_params(&cfg).to_flat());
        let a = init_params(&cfg);
        cfg.seed = 6;
        assert_ne!(a.to_flat(), init_params(&cfg).to_flat());
    }

    #[test]
    fn param_count_follows_config() {
        let cfg = MvfnConfig::new(3);
        let c = 6;
        let per_layer = 24 * 24 + 3 * 144 + 4 * (c * c * 2 + c + c * 2 + c);
        let head = 12 * 48 + 48 + 48 * 12 + 12;
        assert_eq!(init_params(&cfg).param_count(), 2 * per_layer + head);
    }

    #[test]
    fn degenerate_config_rejected_with_all_violations() {
        let mut cfg = MvfnConfig::new(0);
        cfg.st_layers = 0;
        cfg.flags = AblationFlags {
            use_gcn: false,
            use_cla: false,
            use_mtcn: false,
            use_stcn: false,
        };
        match cfg.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn output_shape_contract() {
        for layers in 1..=5 {
            let mut m = tiny_model(AblationFlags::default());
            m.config.st_layers = layers;
            let p = init_params(&m.config);
            let y = m.forward(&p, &rand_input(1, 12, 3)).unwrap();
            assert_eq!(y.dim(), (12, 3, 2));
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_body_layer_is_identity() {
        let m = tiny_model(AblationFlags::default());
        let mut p = init_params(&m.config);
        let layer = &mut p.layers[0];
        layer.gcn.weights[0].fill(0.0);
        layer.cla.w_v.fill(0.0);
        layer.mstcn = MstcnStack::zeros(6);
        let x = rand_input(2, 12, 3);
        let y = st_layer_forward(&x, &p.layers[0], &m.adjacency, m.config.flags).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn st_layer_is_composition_of_blocks() {
        let m = tiny_model(AblationFlags::default());
        let p = init_params(&m.config);
        let x = rand_input(3, 12, 3);
        let l = &p.layers[0];
        let g = gcm_forward(&x, &m.adjacency, &l.gcn, &l.cla, m.config.flags.gcm()).unwrap();
        let t = mstcn_forward(&to_global(&g), &l.mstcn, m.config.flags.temporal()).unwrap();
        let expected = from_global(&t, 3, 2) + &x;
        let y = st_layer_forward(&x, l, &m.adjacency, m.config.flags).unwrap();
        assert_abs_diff_eq!(y, expected, epsilon = 1e-12);
    }

    #[test]
    fn head_constant_and_identity() {
        let mut h = HeadParams {
            w1: Array2::eye(12),
            b1: Array1::zeros(12),
            w2: Array2::zeros((12, 12)),
            b2: Array1::from_elem(12, 2.5),
        };
        let x = Array2::from_shape_fn((4, 12), |(i, j)| (i + j) as f64);
        assert!(prediction_layer(&x, &h).unwrap().iter().all(|&v| v == 2.5));
        h.w2 = Array2::eye(12);
        h.b2.fill(0.0);
        assert_eq!(prediction_layer(&x, &h).unwrap(), x);
        assert!(prediction_layer(&Array2::zeros((4, 5)), &h).is_err());
    }

    #[test]
    fn disabled_blocks_get_zero_gradient() {
        let flags = AblationFlags {
            use_gcn: false,
            use_cla: true,
            use_mtcn: true,
            use_stcn: false,
        };
        let m = tiny_model(flags);
        let p = init_params(&m.config);
        let tr = m.forward_traced(&p, &rand_input(4, 12, 3)).unwrap();
        let g = m.backward(&p, &tr, &Array2::ones((6, 12)));
        for (name, t) in g.tensors() {
            let zero = t.iter().all(|&v| v == 0.0);
            if name.contains(".gcn.") || name.contains(".stcn.") {
                assert!(zero, "{name} should have no gradient");
            }
            if name.contains(".cla.w_v") || name == "head.w2" {
                assert!(!zero, "{name} should have gradient");
            }
        }
    }

    #[test]
    fn no_gcm_passes_input_to_temporal_stack() {
        let flags = AblationFlags {
            use_gcn: false,
            use_cla: false,
            ..Default::default()
        };
        let m = tiny_model(flags);
        let p = init_params(&m.config);
        let x = rand_input(5, 12, 3);
        let t = mstcn_forward(&to_global(&x), &p.layers[0].mstcn, TemporalFlags::default()).unwrap();
        let y = st_layer_forward(&x, &p.layers[0], &m.adjacency, flags).unwrap();
        assert_abs_diff_eq!(y, from_global(&t, 3, 2) + &x, epsilon = 1e-14);
    }

    #[test]
    fn labels() {
        assert_eq!(AblationFlags::default().label(), "MVFN");
        let f = AblationFlags {
            use_mtcn: false,
            use_stcn: false,
            ..Default::default()
        };
        assert_eq!(f.label(), "NO-MSTCN");
    }

    #[test]
    fn coordinate_paths() {
        let p = init_params(&MvfnConfig::new(3));
        assert_eq!(p.coordinate_path(0).unwrap(), "layer0.gcn.w0[0]");
        assert_eq!(p.coordinate_path(576).unwrap(), "layer0.cla.w_q[0]");
        assert_eq!(p.coordinate_path(p.param_count() - 1).unwrap(), "head.b2[11]");
        assert!(p.coordinate_path(p.param_count()).is_none());
    }
}
