//! Analytic FLOP and peak-auxiliary-memory models per attention backend,
//! plus a measured scaling harness.
//!
//! The models describe the score+aggregate core of one window (projections
//! are identical across variants and excluded). Memory is auxiliary scratch
//! only, checked against the in-process allocation accounting in the
//! attention kernels rather than OS RSS, so the numbers are deterministic
//! and device-independent.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    dense_attention_metered, keygraph_attention_metered, Backend, CostMeter,
};
use crate::error::{KgtError, Result};
use crate::keygraph::KeyGraph;
use crate::numerics::Tensor;

/// Attention variant being modeled: the dense baseline or one of the three
/// key-graph backends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostKind {
    Dense,
    Sparse(Backend),
}

impl CostKind {
    pub fn label(&self) -> String {
        match self {
            CostKind::Dense => "dense".to_string(),
            CostKind::Sparse(b) => b.label().to_string(),
        }
    }
}

/// FLOPs of the score+aggregate core (two per multiply-accumulate).
///
/// The dense baseline and the mask backend walk every (query, key) pair:
/// `heads * (2*hw*hw*d + 2*hw*hw*d)`. Gather and streaming touch only the
/// `k` neighbors per query: `heads * (2*hw*k*d + 2*hw*k*d)`.
pub fn attention_flops(hw: usize, k: usize, d: usize, heads: usize, kind: CostKind) -> u64 {
    let (hw, k, d, heads) = (hw as u64, k as u64, d as u64, heads as u64);
    match kind {
        CostKind::Dense | CostKind::Sparse(Backend::Mask) => heads * 4 * hw * hw * d,
        CostKind::Sparse(Backend::Gather) | CostKind::Sparse(Backend::Streaming { .. }) => {
            heads * 4 * hw * k * d
        }
    }
}

/// Peak auxiliary bytes of one window:
///
/// * gather: `heads * (2*hw*k*d + hw*k) * bytes` (K-hat, V-hat, logits);
/// * mask and dense: `heads * hw^2 * bytes` (the logit matrix);
/// * streaming: `heads * (hw*block + 2*hw) * bytes` (one logit block plus
///   running max and sum). The implementation additionally keeps a one-byte
///   membership lane per block entry, within one block of this model.
pub fn attention_peak_bytes(
    hw: usize,
    k: usize,
    d: usize,
    heads: usize,
    kind: CostKind,
    bytes_per_real: usize,
) -> u64 {
    let (hw, k, d, heads, bytes) = (
        hw as u64,
        k as u64,
        d as u64,
        heads as u64,
        bytes_per_real as u64,
    );
    match kind {
        CostKind::Dense | CostKind::Sparse(Backend::Mask) => heads * hw * hw * bytes,
        CostKind::Sparse(Backend::Gather) => heads * (2 * hw * k * d + hw * k) * bytes,
        CostKind::Sparse(Backend::Streaming { block }) => {
            heads * (hw * (block as u64) + 2 * hw) * bytes
        }
    }
}

/// One grid point of the scaling harness.
#[derive(Clone, Debug)]
pub struct ScaleCell {
    pub hw: usize,
    pub k: usize,
    pub d: usize,
    pub heads: usize,
    pub kind: CostKind,
}

/// Scaling-run request. Cells whose modeled auxiliary footprint exceeds
/// `budget_bytes` are recorded as skipped rows instead of being run — the
/// desk-scale analogue of an out-of-memory cell.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub cells: Vec<ScaleCell>,
    pub repeats: usize,
    pub budget_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct CostRow {
    pub n_nodes: usize,
    pub k: usize,
    pub d: usize,
    pub heads: usize,
    pub backend: String,
    pub flops: u64,
    pub peak_aux_bytes: u64,
    pub wall_ms: f64,
    pub skipped: bool,
    /// Instrumented counters from the actual run (model columns above are
    /// analytic); zero for skipped rows.
    pub measured_flops: u64,
    pub measured_peak_bytes: u64,
}

#[derive(Clone, Debug, Default)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "n_nodes,k,d,heads,backend,flops,peak_aux_bytes,wall_ms,skipped")?;
        for r in &self.rows {
            if r.skipped {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},,1",
                    r.n_nodes, r.k, r.d, r.heads, r.backend, r.flops, r.peak_aux_bytes
                )?;
            } else {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{:.4},0",
                    r.n_nodes,
                    r.k,
                    r.d,
                    r.heads,
                    r.backend,
                    r.flops,
                    r.peak_aux_bytes,
                    r.wall_ms
                )?;
            }
        }
        Ok(())
    }

    pub fn find(&self, hw: usize, k: usize, backend: &str) -> Option<&CostRow> {
        self.rows
            .iter()
            .find(|r| r.n_nodes == hw && r.k == k && r.backend == backend)
    }
}

/// The documented desk-scale grid: `hw` in {64, 256, 1024}, k sweeping up to
/// `hw-1`, d=16, heads=2, all four variants.
pub fn default_grid() -> Vec<ScaleCell> {
    let kinds = [
        CostKind::Dense,
        CostKind::Sparse(Backend::Gather),
        CostKind::Sparse(Backend::Mask),
        CostKind::Sparse(Backend::Streaming { block: 64 }),
    ];
    let mut cells = Vec::new();
    for &hw in &[64usize, 256, 1024] {
        let mut ks: Vec<usize> = [4usize, 16, 32, 64, 128, 256, 512]
            .iter()
            .copied()
            .filter(|&k| k < hw)
            .collect();
        ks.push(hw - 1);
        ks.dedup();
        for &k in &ks {
            for &kind in &kinds {
                let k_cell = if kind == CostKind::Dense { hw } else { k };
                cells.push(ScaleCell {
                    hw,
                    k: k_cell,
                    d: 16,
                    heads: 2,
                    kind,
                });
            }
        }
    }
    cells
}

/// A fast grid for smoke tests.
pub fn small_grid() -> Vec<ScaleCell> {
    let kinds = [
        CostKind::Dense,
        CostKind::Sparse(Backend::Gather),
        CostKind::Sparse(Backend::Mask),
        CostKind::Sparse(Backend::Streaming { block: 8 }),
    ];
    let mut cells = Vec::new();
    for &hw in &[16usize, 64] {
        for &k in &[4usize, hw - 1] {
            for &kind in &kinds {
                let k_cell = if kind == CostKind::Dense { hw } else { k };
                cells.push(ScaleCell {
                    hw,
                    k: k_cell,
                    d: 8,
                    heads: 2,
                    kind,
                });
            }
        }
    }
    cells
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Run the grid: median wall time per cell over `repeats`, analytic model
/// columns, plus instrumented counters for cross-checking.
pub fn run_scaling(spec: &RunSpec) -> Result<CostReport> {
    if spec.repeats < 3 {
        return Err(KgtError::Config(format!(
            "repeats must be >= 3, got {}",
            spec.repeats
        )));
    }
    let mut rows = Vec::with_capacity(spec.cells.len());
    for (idx, cell) in spec.cells.iter().enumerate() {
        let ScaleCell { hw, k, d, heads, kind } = *cell;
        let model_flops = attention_flops(hw, k, d, heads, kind);
        let model_bytes = attention_peak_bytes(hw, k, d, heads, kind, 4);
        // inputs (q,k,v) are not auxiliary but still need allocating
        let input_bytes = (3 * heads * hw * d * 4) as u64;
        if model_bytes + input_bytes > spec.budget_bytes {
            rows.push(CostRow {
                n_nodes: hw,
                k,
                d,
                heads,
                backend: kind.label(),
                flops: model_flops,
                peak_aux_bytes: model_bytes,
                wall_ms: 0.0,
                skipped: true,
                measured_flops: 0,
                measured_peak_bytes: 0,
            });
            continue;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(1000 + idx as u64);
        let shape = [1usize, heads, hw, d];
        let q = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0f32..1.0));
        let kk = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0f32..1.0));
        let v = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0f32..1.0));
        let graph = match kind {
            CostKind::Dense => None,
            CostKind::Sparse(_) => Some(KeyGraph::build(
                &Tensor::from_fn(&[1, hw, 8], |_| rng.gen_range(-1.0f32..1.0)),
                k,
            )?),
        };

        let run = |meter: &CostMeter| -> Result<f64> {
            let t0 = Instant::now();
            match (kind, &graph) {
                (CostKind::Dense, _) => {
                    dense_attention_metered(&q, &kk, &v, meter)?;
                }
                (CostKind::Sparse(backend), Some(g)) => {
                    keygraph_attention_metered(&q, &kk, &v, g, backend, meter)?;
                }
                _ => unreachable!(),
            }
            Ok(t0.elapsed().as_secs_f64() * 1e3)
        };

        let meter = CostMeter::new();
        run(&meter)?; // warmup
        meter.reset();
        let mut times = Vec::with_capacity(spec.repeats);
        for _ in 0..spec.repeats {
            meter.reset();
            times.push(run(&meter)?);
        }
        rows.push(CostRow {
            n_nodes: hw,
            k,
            d,
            heads,
            backend: kind.label(),
            flops: model_flops,
            peak_aux_bytes: model_bytes,
            wall_ms: median(times),
            skipped: false,
            measured_flops: meter.flops(),
            measured_peak_bytes: meter.peak_aux_bytes(),
        });
    }
    Ok(CostReport { rows })
}
