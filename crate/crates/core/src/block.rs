//! The key-graph transformer layer (attention + FFN with pre-norm and
//! residuals) and stage (Alg.: build the graph once, run every layer
//! against it, close with a residual 3x3 convolution).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    keygraph_attention, merge_heads, project, AttentionParams, AttentionVars, Backend,
};
use crate::error::{KgtError, Result};
use crate::keygraph::KeyGraph;
use crate::numerics::{Parameter, Real, Tensor, Var};
use crate::windowing::{merge_var, partition_var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Truncated-normal initialization: std 0.02, clipped at two sigma.
pub(crate) fn init_weight<R: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<R> {
    let normal = Normal::new(0.0f64, 0.02).expect("valid normal");
    Tensor::from_fn(shape, |_| {
        R::from_f64(normal.sample(rng).clamp(-0.04, 0.04))
    })
}

/// Layer-norm affine pair.
#[derive(Clone, Debug)]
pub struct NormParams<R: Real = f32> {
    pub gamma: Parameter<R>,
    pub beta: Parameter<R>,
}

impl<R: Real> NormParams<R> {
    fn unit(c: usize, name: &str) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[c], R::ONE)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }
}

/// One transformer layer: attention block + two-matmul FFN, both behind
/// pre-normalization and residuals.
#[derive(Clone, Debug)]
pub struct LayerParams<R: Real = f32> {
    pub attn: AttentionParams<R>,
    pub norm1: NormParams<R>,
    pub norm2: NormParams<R>,
    pub ffn_w1: Parameter<R>,
    pub ffn_w2: Parameter<R>,
}

impl<R: Real> LayerParams<R> {
    /// Fresh layer: projections truncated-normal, `w_out` zero so the
    /// attention branch starts as a no-op, FFN truncated-normal, unit norms.
    pub fn init(c: usize, heads: usize, ffn_ratio: usize, name: &str, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(KgtError::Config(format!(
                "channels {c} not divisible by heads {heads}"
            )));
        }
        if ffn_ratio == 0 {
            return Err(KgtError::Config("ffn ratio must be >= 1".into()));
        }
        let hidden = ffn_ratio * c;
        Ok(Self {
            attn: AttentionParams {
                w_qry: Parameter::new(format!("{name}.attn.w_qry"), init_weight(&[c, c], rng)),
                w_key: Parameter::new(format!("{name}.attn.w_key"), init_weight(&[c, c], rng)),
                w_val: Parameter::new(format!("{name}.attn.w_val"), init_weight(&[c, c], rng)),
                w_out: Parameter::new(format!("{name}.attn.w_out"), Tensor::zeros(&[c, c])),
                heads,
            },
            norm1: NormParams::unit(c, &format!("{name}.norm1")),
            norm2: NormParams::unit(c, &format!("{name}.norm2")),
            ffn_w1: Parameter::new(format!("{name}.ffn_w1"), init_weight(&[c, hidden], rng)),
            ffn_w2: Parameter::new(format!("{name}.ffn_w2"), init_weight(&[hidden, c], rng)),
        })
    }
}

/// One stage: `n_layer` layers sharing a single key graph, then a residual
/// tail convolution.
#[derive(Clone, Debug)]
pub struct StageParams<R: Real = f32> {
    pub layers: Vec<LayerParams<R>>,
    pub tail_w: Parameter<R>,
    pub tail_b: Parameter<R>,
    /// Neighbor count the stage was configured to build with; forward calls
    /// may override it.
    pub k_build: usize,
}

impl<R: Real> StageParams<R> {
    pub fn init(
        c: usize,
        heads: usize,
        ffn_ratio: usize,
        n_layers: usize,
        k_build: usize,
        name: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(KgtError::Config(
                "a stage needs at least one layer (the layer loop must run)".into(),
            ));
        }
        let layers = (0..n_layers)
            .map(|l| LayerParams::init(c, heads, ffn_ratio, &format!("{name}.layer{l}"), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            // zero-initialized tail: the stage starts as the identity
            tail_w: Parameter::new(format!("{name}.tail_w"), Tensor::zeros(&[c, c, 3, 3])),
            tail_b: Parameter::new(format!("{name}.tail_b"), Tensor::zeros(&[c])),
            k_build,
        })
    }
}

#[derive(Clone)]
pub struct NormVars<R: Real = f32> {
    pub gamma: Var<R>,
    pub beta: Var<R>,
}

#[derive(Clone)]
pub struct LayerVars<R: Real = f32> {
    pub attn: AttentionVars<R>,
    pub norm1: NormVars<R>,
    pub norm2: NormVars<R>,
    pub ffn_w1: Var<R>,
    pub ffn_w2: Var<R>,
}

#[derive(Clone)]
pub struct StageVars<R: Real = f32> {
    pub layers: Vec<LayerVars<R>>,
    pub tail_w: Var<R>,
    pub tail_b: Var<R>,
    pub k_build: usize,
}

impl<R: Real> NormParams<R> {
    pub fn trace(&self) -> NormVars<R> {
        self.trace_with(Var::param)
    }

    pub fn trace_frozen(&self) -> NormVars<R> {
        self.trace_with(Var::constant)
    }

    pub(crate) fn trace_with(&self, mk: fn(Tensor<R>) -> Var<R>) -> NormVars<R> {
        NormVars {
            gamma: mk(self.gamma.value.clone()),
            beta: mk(self.beta.value.clone()),
        }
    }
}

impl<R: Real> LayerParams<R> {
    /// Trainable trace: leaves accumulate gradients.
    pub fn trace(&self) -> LayerVars<R> {
        self.trace_with(Var::param)
    }

    /// Constant-leaf trace; nothing is recorded through these weights.
    pub fn trace_frozen(&self) -> LayerVars<R> {
        self.trace_with(Var::constant)
    }

    pub(crate) fn trace_with(&self, mk: fn(Tensor<R>) -> Var<R>) -> LayerVars<R> {
        LayerVars {
            attn: AttentionVars {
                w_qry: mk(self.attn.w_qry.value.clone()),
                w_key: mk(self.attn.w_key.value.clone()),
                w_val: mk(self.attn.w_val.value.clone()),
                w_out: mk(self.attn.w_out.value.clone()),
                heads: self.attn.heads,
            },
            norm1: self.norm1.trace_with(mk),
            norm2: self.norm2.trace_with(mk),
            ffn_w1: mk(self.ffn_w1.value.clone()),
            ffn_w2: mk(self.ffn_w2.value.clone()),
        }
    }
}

impl<R: Real> StageParams<R> {
    pub fn trace(&self) -> StageVars<R> {
        self.trace_with(Var::param)
    }

    pub fn trace_frozen(&self) -> StageVars<R> {
        self.trace_with(Var::constant)
    }

    pub(crate) fn trace_with(&self, mk: fn(Tensor<R>) -> Var<R>) -> StageVars<R> {
        StageVars {
            layers: self.layers.iter().map(|l| l.trace_with(mk)).collect(),
            tail_w: mk(self.tail_w.value.clone()),
            tail_b: mk(self.tail_b.value.clone()),
            k_build: self.k_build,
        }
    }
}

fn norm_rows<R: Real>(v: &Var<R>, norm: &NormVars<R>) -> Result<Var<R>> {
    let shape = v.shape().to_vec();
    let c = *shape.last().expect("rank >= 1");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    v.reshape(&[rows, c])?
        .layer_norm(&norm.gamma, &norm.beta, R::from_f64(LAYER_NORM_EPS))?
        .reshape(&shape)
}

/// FFN with its residual: `v + gelu(v W1) W2`.
pub fn ffn<R: Real>(v_hat: &Var<R>, w1: &Var<R>, w2: &Var<R>) -> Result<Var<R>> {
    let shape = v_hat.shape().to_vec();
    let c = *shape.last().ok_or_else(|| KgtError::Dim {
        context: "ffn",
        detail: "rank-0 input".into(),
    })?;
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = v_hat.reshape(&[rows, c])?;
    let h = flat.matmul(w1)?.gelu()?.matmul(w2)?.reshape(&shape)?;
    v_hat.add(&h)
}

/// One layer forward: pre-norm attention with residual, then pre-norm FFN
/// with residual. `v` is `[B, hw, c]`, the graph is shared by reference.
pub fn layer_forward<R: Real>(
    v: &Var<R>,
    g: &KeyGraph,
    p: &LayerVars<R>,
    backend: Backend,
) -> Result<Var<R>> {
    let (q, k, vv) = project(&norm_rows(v, &p.norm1)?, &p.attn)?;
    let attended = keygraph_attention(&q, &k, &vv, g, backend)?;
    let u = v.add(&merge_heads(&attended, &p.attn.w_out)?)?;

    let shape = u.shape().to_vec();
    let c = *shape.last().expect("rank 3");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let h = norm_rows(&u, &p.norm2)?
        .reshape(&[rows, c])?
        .matmul(&p.ffn_w1)?
        .gelu()?
        .matmul(&p.ffn_w2)?
        .reshape(&shape)?;
    u.add(&h)
}

/// Stage forward per the shared-graph algorithm: partition, build the key
/// graph exactly once, run every layer against it, merge, and add the tail
/// convolution residually.
///
/// `k` larger than `win*win - 1` is clamped with a warning, never an error.
pub fn stage_forward<R: Real>(
    f_in: &Var<R>,
    p: &StageVars<R>,
    k: usize,
    win: usize,
    backend: Backend,
) -> Result<Var<R>> {
    if p.layers.is_empty() {
        return Err(KgtError::Config(
            "a stage needs at least one layer (the layer loop must run)".into(),
        ));
    }
    if k == 0 {
        return Err(KgtError::Config("k must be >= 1".into()));
    }
    let wb = partition_var(f_in, win)?;
    let hw = wb.layout.nodes_per_window();
    let k_eff = k.min(hw - 1);
    if k_eff < k {
        log::warn!("clamping k from {k} to {k_eff} for {win}x{win} windows");
    }
    let graph = KeyGraph::build(wb.nodes.value(), k_eff)?;

    let mut v = wb.nodes.clone();
    for layer in &p.layers {
        v = layer_forward(&v, &graph, layer, backend)?;
    }
    let merged = merge_var(&crate::windowing::VarWindowBatch {
        nodes: v,
        layout: wb.layout.clone(),
    })?;
    f_in.add(&merged.conv2d_3x3(&p.tail_w, &p.tail_b)?)
}
