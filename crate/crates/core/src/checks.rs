//! The 64-bit gradient suite: every operator's backward rule, each attention
//! backend, and the end-to-end layer/stage/model composites, all verified
//! against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{dense_attention, keygraph_attention, Backend};
use crate::block::{ffn, layer_forward, stage_forward, LayerParams, StageParams};
use crate::error::Result;
use crate::keygraph::KeyGraph;
use crate::model::{forward_vars, Net, NetConfig};
use crate::numerics::{grad_check, Tensor, Var};
use crate::train::TopkSchedule;

/// Central-difference step used throughout the suite.
pub const GRAD_CHECK_H: f64 = 1e-5;
/// Tolerance for single operators.
pub const TOL_OP: f64 = 1e-6;
/// Tolerance for end-to-end composites.
pub const TOL_COMPOSITE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckOutcome {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f64..1.0))
}

/// Run the full suite. Every entry must pass for `kgt gradcheck` to exit 0.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<CheckOutcome> = Vec::new();
    let mut push = |name: &str, tol: f64, err: f64| {
        out.push(CheckOutcome {
            name: name.to_string(),
            max_rel_err: err,
            tol,
        });
    };

    // --- primitive operators -------------------------------------------------
    {
        let x = rand_t(&[4, 3], &mut rng);
        let b = rand_t(&[3, 5], &mut rng);
        let err = grad_check(|v| Ok(v.matmul(&Var::constant(b.clone()))?.sum_all()), &x, GRAD_CHECK_H)?;
        push("matmul/lhs", TOL_OP, err);

        let a = rand_t(&[5, 4], &mut rng);
        let x = rand_t(&[4, 3], &mut rng);
        let err = grad_check(
            |v| Ok(Var::constant(a.clone()).matmul(v)?.sum_all()),
            &x,
            GRAD_CHECK_H,
        )?;
        push("matmul/rhs", TOL_OP, err);
    }
    {
        // weight each softmax/gelu output so the scalar sees distinct grads
        let x = rand_t(&[3, 6], &mut rng);
        let w = rand_t(&[6, 1], &mut rng);
        let err = grad_check(
            |v| Ok(v.softmax_rows(None)?.matmul(&Var::constant(w.clone()))?.sum_all()),
            &x,
            GRAD_CHECK_H,
        )?;
        push("softmax_rows", TOL_OP, err);

        let mut mask = Tensor::<f64>::zeros(&[3, 6]);
        for r in 0..3 {
            mask.data_mut()[r * 6 + (r + 2)] = f64::MIN;
        }
        let err = grad_check(
            |v| {
                Ok(v.softmax_rows(Some(&mask))?
                    .matmul(&Var::constant(w.clone()))?
                    .sum_all())
            },
            &x,
            GRAD_CHECK_H,
        )?;
        push("softmax_rows/masked", TOL_OP, err);
    }
    {
        let x = rand_t(&[2, 7], &mut rng);
        let w = rand_t(&[7, 1], &mut rng);
        let err = grad_check(
            |v| Ok(v.gelu()?.matmul(&Var::constant(w.clone()))?.sum_all()),
            &x,
            GRAD_CHECK_H,
        )?;
        push("gelu", TOL_OP, err);
    }
    {
        let x = rand_t(&[4, 5], &mut rng);
        let gamma = rand_t(&[5], &mut rng);
        let beta = rand_t(&[5], &mut rng);
        let w = rand_t(&[5, 1], &mut rng);
        let weighted_norm = |xv: &Var<f64>, gv: &Var<f64>, bv: &Var<f64>| -> Result<Var<f64>> {
            Ok(xv
                .layer_norm(gv, bv, 1e-5)?
                .matmul(&Var::constant(w.clone()))?
                .sum_all())
        };
        let err = grad_check(
            |v| weighted_norm(v, &Var::constant(gamma.clone()), &Var::constant(beta.clone())),
            &x,
            GRAD_CHECK_H,
        )?;
        push("layer_norm/x", TOL_OP, err);
        let err = grad_check(
            |v| weighted_norm(&Var::constant(x.clone()), v, &Var::constant(beta.clone())),
            &gamma,
            GRAD_CHECK_H,
        )?;
        push("layer_norm/gamma", TOL_OP, err);
        let err = grad_check(
            |v| weighted_norm(&Var::constant(x.clone()), &Var::constant(gamma.clone()), v),
            &beta,
            GRAD_CHECK_H,
        )?;
        push("layer_norm/beta", TOL_OP, err);
    }
    {
        let x = rand_t(&[2, 5, 4], &mut rng);
        let w = rand_t(&[3, 2, 3, 3], &mut rng);
        let b = rand_t(&[3], &mut rng);
        let target = rand_t(&[3, 5, 4], &mut rng);
        let err = grad_check(
            |v| {
                v.conv2d_3x3(&Var::constant(w.clone()), &Var::constant(b.clone()))?
                    .l1_loss(&target)
            },
            &x,
            GRAD_CHECK_H,
        )?;
        push("conv2d_3x3/x", TOL_OP, err);
        let err = grad_check(
            |v| {
                Var::constant(x.clone())
                    .conv2d_3x3(v, &Var::constant(b.clone()))?
                    .l1_loss(&target)
            },
            &w,
            GRAD_CHECK_H,
        )?;
        push("conv2d_3x3/w", TOL_OP, err);
        let err = grad_check(
            |v| {
                Var::constant(x.clone())
                    .conv2d_3x3(&Var::constant(w.clone()), v)?
                    .l1_loss(&target)
            },
            &b,
            GRAD_CHECK_H,
        )?;
        push("conv2d_3x3/b", TOL_OP, err);
    }
    {
        // gather exercised through the partition/merge round trip
        let x = rand_t(&[2, 6, 5], &mut rng);
        let target = rand_t(&[2, 6, 5], &mut rng);
        let err = grad_check(
            |v| {
                let wb = crate::windowing::partition_var(v, 4)?;
                crate::windowing::merge_var(&wb)?.l1_loss(&target)
            },
            &x,
            GRAD_CHECK_H,
        )?;
        push("partition_merge", TOL_OP, err);
    }
    {
        let x = rand_t(&[3, 4], &mut rng);
        let target = rand_t(&[3, 4], &mut rng);
        let err = grad_check(|v| v.l1_loss(&target), &x, GRAD_CHECK_H)?;
        push("l1_loss", TOL_OP, err);
    }

    // --- attention: dense and all three backends -----------------------------
    {
        let (b, heads, hw, d) = (1usize, 2usize, 6usize, 3usize);
        let shape = [b, heads, hw, d];
        let q = rand_t(&shape, &mut rng);
        let k = rand_t(&shape, &mut rng);
        let v = rand_t(&shape, &mut rng);
        let target = rand_t(&shape, &mut rng);
        let graph = KeyGraph::build(&rand_t(&[b, hw, 4], &mut rng), 3)?;

        let err = grad_check(
            |x| dense_attention(x, &Var::constant(k.clone()), &Var::constant(v.clone()))?.l1_loss(&target),
            &q,
            GRAD_CHECK_H,
        )?;
        push("dense_attention/q", TOL_COMPOSITE, err);
        let err = grad_check(
            |x| dense_attention(&Var::constant(q.clone()), x, &Var::constant(v.clone()))?.l1_loss(&target),
            &k,
            GRAD_CHECK_H,
        )?;
        push("dense_attention/k", TOL_COMPOSITE, err);
        let err = grad_check(
            |x| dense_attention(&Var::constant(q.clone()), &Var::constant(k.clone()), x)?.l1_loss(&target),
            &v,
            GRAD_CHECK_H,
        )?;
        push("dense_attention/v", TOL_COMPOSITE, err);

        for backend in [
            Backend::Gather,
            Backend::Mask,
            Backend::Streaming { block: 2 },
        ] {
            let name = backend.label();
            let err = grad_check(
                |x| {
                    keygraph_attention(x, &Var::constant(k.clone()), &Var::constant(v.clone()), &graph, backend)?
                        .l1_loss(&target)
                },
                &q,
                GRAD_CHECK_H,
            )?;
            push(&format!("keygraph_{name}/q"), TOL_COMPOSITE, err);
            let err = grad_check(
                |x| {
                    keygraph_attention(&Var::constant(q.clone()), x, &Var::constant(v.clone()), &graph, backend)?
                        .l1_loss(&target)
                },
                &k,
                GRAD_CHECK_H,
            )?;
            push(&format!("keygraph_{name}/k"), TOL_COMPOSITE, err);
            let err = grad_check(
                |x| {
                    keygraph_attention(&Var::constant(q.clone()), &Var::constant(k.clone()), x, &graph, backend)?
                        .l1_loss(&target)
                },
                &v,
                GRAD_CHECK_H,
            )?;
            push(&format!("keygraph_{name}/v"), TOL_COMPOSITE, err);
        }
    }

    // --- composites: ffn, layer, stage, model --------------------------------
    {
        let x = rand_t(&[1, 5, 4], &mut rng);
        let w1 = rand_t(&[4, 8], &mut rng);
        let w2 = rand_t(&[8, 4], &mut rng);
        let target = rand_t(&[1, 5, 4], &mut rng);
        let err = grad_check(
            |v| ffn(v, &Var::constant(w1.clone()), &Var::constant(w2.clone()))?.l1_loss(&target),
            &x,
            GRAD_CHECK_H,
        )?;
        push("ffn/x", TOL_COMPOSITE, err);
        let err = grad_check(
            |v| ffn(&Var::constant(x.clone()), v, &Var::constant(w2.clone()))?.l1_loss(&target),
            &w1,
            GRAD_CHECK_H,
        )?;
        push("ffn/w1", TOL_COMPOSITE, err);
    }
    {
        let (b, hw, c, heads) = (1usize, 8usize, 4usize, 2usize);
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11CE);
        let layer = LayerParams::<f64>::init(c, heads, 2, "chk", &mut prng)?;
        // non-trivial w_out so the attention branch carries gradient
        let w_out = rand_t(&[c, c], &mut rng).scale_by(0.3);
        let graph = KeyGraph::build(&rand_t(&[b, hw, c], &mut rng), 3)?;
        let x = rand_t(&[b, hw, c], &mut rng);
        let target = rand_t(&[b, hw, c], &mut rng);

        let trace = |w_qry_override: Option<&Var<f64>>| -> crate::block::LayerVars<f64> {
            let mut vars = layer.trace_frozen();
            vars.attn.w_out = Var::constant(w_out.clone());
            if let Some(w) = w_qry_override {
                vars.attn.w_qry = w.clone();
            }
            vars
        };
        let err = grad_check(
            |v| layer_forward(v, &graph, &trace(None), Backend::Gather)?.l1_loss(&target),
            &x,
            GRAD_CHECK_H,
        )?;
        push("layer/x", TOL_COMPOSITE, err);
        let err = grad_check(
            |v| {
                layer_forward(&Var::constant(x.clone()), &graph, &trace(Some(v)), Backend::Mask)?
                    .l1_loss(&target)
            },
            &layer.attn.w_qry.value,
            GRAD_CHECK_H,
        )?;
        push("layer/w_qry", TOL_COMPOSITE, err);
    }
    {
        let c = 4;
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x57A6E);
        let mut stage = StageParams::<f64>::init(c, 2, 2, 2, 3, "chk", &mut prng)?;
        // activate the tail and attention branches
        stage.tail_w.value = rand_t(&[c, c, 3, 3], &mut rng).scale_by(0.2);
        for l in &mut stage.layers {
            l.attn.w_out.value = rand_t(&[c, c], &mut rng).scale_by(0.3);
        }
        let x = rand_t(&[c, 6, 6], &mut rng);
        let target = rand_t(&[c, 6, 6], &mut rng);
        let err = grad_check(
            |v| {
                stage_forward(v, &stage.trace_frozen(), 3, 4, Backend::Streaming { block: 3 })?
                    .l1_loss(&target)
            },
            &x,
            GRAD_CHECK_H,
        )?;
        push("stage/x", TOL_COMPOSITE, err);

        let err = grad_check(
            |v| {
                let mut vars = stage.trace_frozen();
                vars.tail_w = v.clone();
                stage_forward(&Var::constant(x.clone()), &vars, 3, 4, Backend::Gather)?
                    .l1_loss(&target)
            },
            &stage.tail_w.value,
            GRAD_CHECK_H,
        )?;
        push("stage/tail_w", TOL_COMPOSITE, err);
    }
    {
        // whole model wrt the input image
        let cfg = NetConfig {
            channels: 4,
            n_stages: 1,
            n_layers: 1,
            heads: 2,
            window: 4,
            ffn_ratio: 2,
            schedule: TopkSchedule::Fixed(3),
            seed: seed ^ 0xF00D,
        };
        let mut net = Net::<f64>::init(&cfg)?;
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
        // wake up the zero-initialized branches so gradients flow everywhere
        net.recon_w.value = Tensor::from_fn(&[1, 4, 3, 3], |_| prng.gen_range(-0.2f64..0.2));
        net.stages[0].tail_w.value = Tensor::from_fn(&[4, 4, 3, 3], |_| prng.gen_range(-0.2f64..0.2));
        net.stages[0].layers[0].attn.w_out.value =
            Tensor::from_fn(&[4, 4], |_| prng.gen_range(-0.3f64..0.3));
        let img = Tensor::from_fn(&[1, 6, 6], |_| prng.gen_range(0.0f64..1.0));
        let target = Tensor::from_fn(&[1, 6, 6], |_| prng.gen_range(0.0f64..1.0));
        let vars = net.trace_frozen();
        let err = grad_check(
            |v| forward_vars(&vars, v, 3, Backend::Gather)?.l1_loss(&target),
            &img,
            GRAD_CHECK_H,
        )?;
        push("model/image", TOL_COMPOSITE, err);
    }

    Ok(out)
}
