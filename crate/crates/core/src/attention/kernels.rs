//! Forward/backward kernels for dense and key-graph attention.
//!
//! Layout everywhere: `q,k,v,out` are `[B, heads, hw, d]` flat row-major;
//! one (window, head) pane is a contiguous `hw*d` slice. Windows are
//! independent and processed in parallel; accounting folds per-window
//! figures into the meter with order-free atomics.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{KgtError, Result};
use crate::keygraph::KeyGraph;
use crate::numerics::{softmax_rows_raw, Real};

use super::Backend;

/// Multiply-accumulate and peak-auxiliary-byte counters for one measured
/// attention call. FLOPs count two per multiply-accumulate; auxiliary bytes
/// are the scratch buffers a single window keeps alive at once (outputs and
/// inputs excluded).
#[derive(Debug, Default)]
pub struct CostMeter {
    flops: AtomicU64,
    peak_aux_bytes: AtomicU64,
}

impl CostMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn flops(&self) -> u64 {
        self.flops.load(Ordering::Relaxed)
    }

    pub fn peak_aux_bytes(&self) -> u64 {
        self.peak_aux_bytes.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.flops.store(0, Ordering::Relaxed);
        self.peak_aux_bytes.store(0, Ordering::Relaxed);
    }

    fn fold(&self, flops: u64, aux_bytes: u64) {
        self.flops.fetch_add(flops, Ordering::Relaxed);
        self.peak_aux_bytes.fetch_max(aux_bytes, Ordering::Relaxed);
    }
}

fn fold_meter(meter: Option<&CostMeter>, flops: u64, aux: u64) {
    if let Some(m) = meter {
        m.fold(flops, aux);
    }
}

/// Per-thread scratch-buffer pool. The kernels' working buffers are large
/// enough that fresh allocations page-fault on every call; round-tripping
/// them through the pool keeps the pages warm. Logical sizes (and therefore
/// the byte accounting) are unaffected.
mod scratch {
    use std::any::{Any, TypeId};
    use std::cell::RefCell;
    use std::collections::HashMap;

    thread_local! {
        static POOL: RefCell<HashMap<(TypeId, u8), Box<dyn Any>>> =
            RefCell::new(HashMap::new());
    }

    /// An empty vec with at least `capacity` reserved, reusing pooled pages.
    pub(super) fn take_empty<T: 'static>(slot: u8, capacity: usize) -> Vec<T> {
        let mut v: Vec<T> = POOL.with(|p| {
            p.borrow_mut()
                .remove(&(TypeId::of::<T>(), slot))
                .and_then(|b| b.downcast::<Vec<T>>().ok())
                .map(|b| *b)
                .unwrap_or_default()
        });
        v.clear();
        v.reserve(capacity);
        v
    }

    /// A vec of exactly `n` elements whose contents the caller will fully
    /// overwrite; stale pooled values may be present.
    pub(super) fn take_len<T: 'static + Copy>(slot: u8, n: usize, fill: T) -> Vec<T> {
        let mut v: Vec<T> = POOL.with(|p| {
            p.borrow_mut()
                .remove(&(TypeId::of::<T>(), slot))
                .and_then(|b| b.downcast::<Vec<T>>().ok())
                .map(|b| *b)
                .unwrap_or_default()
        });
        v.resize(n, fill);
        v.truncate(n);
        v
    }

    pub(super) fn put<T: 'static>(slot: u8, v: Vec<T>) {
        POOL.with(|p| {
            p.borrow_mut().insert((TypeId::of::<T>(), slot), Box::new(v));
        });
    }
}

// scratch slots per kernel family
const SLOT_KHAT: u8 = 0;
const SLOT_VHAT: u8 = 1;
const SLOT_LOGITS: u8 = 2;
const SLOT_RUN_MAX: u8 = 3;
const SLOT_RUN_SUM: u8 = 4;
const SLOT_BLOCK: u8 = 5;
const SLOT_MEMBER: u8 = 6;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub b: usize,
    pub heads: usize,
    pub hw: usize,
    pub d: usize,
}

impl Dims {
    pub fn pane(&self) -> usize {
        self.hw * self.d
    }
    pub fn window(&self) -> usize {
        self.heads * self.hw * self.d
    }
    fn scale<R: Real>(&self) -> R {
        R::from_f64(1.0 / (self.d as f64).sqrt())
    }
}

/// What a forward pass keeps for its backward rule.
pub(crate) enum SavedCtx<R: Real> {
    None,
    /// Post-softmax attention weights; `[B,heads,hw,k]` for gather,
    /// `[B,heads,hw,hw]` for dense/mask.
    Weights(Vec<R>),
    /// Per-query log-sum-exp `m + ln(s)`, `[B,heads,hw]` (streaming).
    Lse(Vec<R>),
}

fn bytes_of<T>(n: usize) -> u64 {
    (n * std::mem::size_of::<T>()) as u64
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut acc = R::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn axpy<R: Real>(alpha: R, x: &[R], y: &mut [R]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

// ---------------------------------------------------------------------------
// Dense attention
// ---------------------------------------------------------------------------

/// `softmax(q kᵀ / sqrt(d)) v` over the fully connected window graph.
pub(crate) fn dense_forward<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    dims: Dims,
    meter: Option<&CostMeter>,
    want_ctx: bool,
) -> Result<(Vec<R>, SavedCtx<R>)> {
    let Dims { b, heads, hw, d } = dims;
    let scale: R = dims.scale();
    let mut out = vec![R::ZERO; b * dims.window()];
    let mut weights = want_ctx.then(|| vec![R::ZERO; b * heads * hw * hw]);

    let worker = |wi: usize, out_w: &mut [R], mut save_w: Option<&mut [R]>| -> Result<()> {
        // overwritten head by head via gemm with beta = 0
        let mut logits = scratch::take_len(SLOT_LOGITS, heads * hw * hw, R::ZERO);
        let mut flops = 0u64;
        for h in 0..heads {
            let pane = (wi * heads + h) * dims.pane();
            let qp = &q[pane..pane + dims.pane()];
            let kp = &k[pane..pane + dims.pane()];
            let vp = &v[pane..pane + dims.pane()];
            let lg = &mut logits[h * hw * hw..(h + 1) * hw * hw];
            unsafe {
                // logits = scale * q kᵀ
                R::gemm(
                    hw,
                    d,
                    hw,
                    scale,
                    qp.as_ptr(),
                    d as isize,
                    1,
                    kp.as_ptr(),
                    1,
                    d as isize,
                    R::ZERO,
                    lg.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            flops += 2 * (hw * hw * d) as u64;
            softmax_rows_raw(lg, hw, hw, None)?;
            unsafe {
                R::gemm(
                    hw,
                    hw,
                    d,
                    R::ONE,
                    lg.as_ptr(),
                    hw as isize,
                    1,
                    vp.as_ptr(),
                    d as isize,
                    1,
                    R::ZERO,
                    out_w[h * dims.pane()..(h + 1) * dims.pane()].as_mut_ptr(),
                    d as isize,
                    1,
                );
            }
            flops += 2 * (hw * hw * d) as u64;
        }
        if let Some(s) = save_w.as_deref_mut() {
            s.copy_from_slice(&logits);
        }
        fold_meter(meter, flops, bytes_of::<R>(logits.len()));
        scratch::put(SLOT_LOGITS, logits);
        Ok(())
    };

    run_windows(&mut out, weights.as_deref_mut(), dims, heads * hw * hw, worker)?;
    Ok((
        out,
        weights.map(SavedCtx::Weights).unwrap_or(SavedCtx::None),
    ))
}

/// Shared backward for dense and mask paths: saved weights are the full
/// `[hw,hw]` matrix (zeros off-graph for the mask backend, which makes the
/// masked entries contribute nothing).
pub(crate) fn dense_backward<R: Real>(
    dy: &[R],
    weights: &[R],
    q: &[R],
    k: &[R],
    v: &[R],
    dims: Dims,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let Dims { b, heads, hw, d } = dims;
    let scale: R = dims.scale();
    let n = b * dims.window();
    let mut dq = vec![R::ZERO; n];
    let mut dk = vec![R::ZERO; n];
    let mut dv = vec![R::ZERO; n];

    dq.par_chunks_mut(dims.window())
        .zip(dk.par_chunks_mut(dims.window()))
        .zip(dv.par_chunks_mut(dims.window()))
        .enumerate()
        .for_each(|(wi, ((dq_w, dk_w), dv_w))| {
            let mut ds = vec![R::ZERO; hw * hw];
            for h in 0..heads {
                let pane = (wi * heads + h) * dims.pane();
                let qp = &q[pane..pane + dims.pane()];
                let kp = &k[pane..pane + dims.pane()];
                let vp = &v[pane..pane + dims.pane()];
                let dyp = &dy[pane..pane + dims.pane()];
                let w = &weights[(wi * heads + h) * hw * hw..(wi * heads + h + 1) * hw * hw];
                let local = h * dims.pane();

                unsafe {
                    // dV = Wᵀ dY
                    R::gemm(
                        hw,
                        hw,
                        d,
                        R::ONE,
                        w.as_ptr(),
                        1,
                        hw as isize,
                        dyp.as_ptr(),
                        d as isize,
                        1,
                        R::ZERO,
                        dv_w[local..local + dims.pane()].as_mut_ptr(),
                        d as isize,
                        1,
                    );
                    // dW = dY Vᵀ (into ds scratch)
                    R::gemm(
                        hw,
                        d,
                        hw,
                        R::ONE,
                        dyp.as_ptr(),
                        d as isize,
                        1,
                        vp.as_ptr(),
                        1,
                        d as isize,
                        R::ZERO,
                        ds.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
                // softmax backward, rowwise: dS = W .* (dW - <W,dW>_row)
                for i in 0..hw {
                    let wr = &w[i * hw..(i + 1) * hw];
                    let dr = &mut ds[i * hw..(i + 1) * hw];
                    let mut inner = R::ZERO;
                    for j in 0..hw {
                        inner += wr[j] * dr[j];
                    }
                    for j in 0..hw {
                        dr[j] = wr[j] * (dr[j] - inner);
                    }
                }
                unsafe {
                    // dQ = scale * dS K
                    R::gemm(
                        hw,
                        hw,
                        d,
                        scale,
                        ds.as_ptr(),
                        hw as isize,
                        1,
                        kp.as_ptr(),
                        d as isize,
                        1,
                        R::ZERO,
                        dq_w[local..local + dims.pane()].as_mut_ptr(),
                        d as isize,
                        1,
                    );
                    // dK = scale * dSᵀ Q
                    R::gemm(
                        hw,
                        hw,
                        d,
                        scale,
                        ds.as_ptr(),
                        1,
                        hw as isize,
                        qp.as_ptr(),
                        d as isize,
                        1,
                        R::ZERO,
                        dk_w[local..local + dims.pane()].as_mut_ptr(),
                        d as isize,
                        1,
                    );
                }
            }
        });
    (dq, dk, dv)
}

// ---------------------------------------------------------------------------
// Key-graph attention, three backends
// ---------------------------------------------------------------------------

pub(crate) fn sparse_forward<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    dims: Dims,
    g: &KeyGraph,
    backend: Backend,
    meter: Option<&CostMeter>,
    want_ctx: bool,
) -> Result<(Vec<R>, SavedCtx<R>)> {
    match backend {
        Backend::Gather => gather_forward(q, k, v, dims, g, meter, want_ctx),
        Backend::Mask => mask_forward(q, k, v, dims, g, meter, want_ctx),
        Backend::Streaming { block } => {
            streaming_forward(q, k, v, dims, g, block, meter, want_ctx)
        }
    }
}

/// Gather backend: materialize `K̂`, `V̂` (`hw*k*d` each) by index gather and
/// score only against them. Peak scratch `heads*(2*hw*k*d + hw*k)` reals.
fn gather_forward<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    dims: Dims,
    g: &KeyGraph,
    meter: Option<&CostMeter>,
    want_ctx: bool,
) -> Result<(Vec<R>, SavedCtx<R>)> {
    let Dims { b, heads, hw, d } = dims;
    let kn = g.k();
    let scale: R = dims.scale();
    let mut out = vec![R::ZERO; b * dims.window()];
    let mut weights = want_ctx.then(|| vec![R::ZERO; b * heads * hw * kn]);

    let worker = |wi: usize, out_w: &mut [R], mut save_w: Option<&mut [R]>| -> Result<()> {
        // filled in strict row order, so no zero-initialization pass is needed
        let mut khat: Vec<R> = scratch::take_empty(SLOT_KHAT, heads * hw * kn * d);
        let mut vhat: Vec<R> = scratch::take_empty(SLOT_VHAT, heads * hw * kn * d);
        let mut logits: Vec<R> = scratch::take_empty(SLOT_LOGITS, heads * hw * kn);
        let mut flops = 0u64;

        for h in 0..heads {
            let pane = (wi * heads + h) * dims.pane();
            let kp = &k[pane..pane + dims.pane()];
            let vp = &v[pane..pane + dims.pane()];
            let qp = &q[pane..pane + dims.pane()];
            for i in 0..hw {
                let qi = &qp[i * d..(i + 1) * d];
                for &nb in g.neighbors_of(wi, i) {
                    let src = nb as usize * d;
                    khat.extend_from_slice(&kp[src..src + d]);
                    vhat.extend_from_slice(&vp[src..src + d]);
                    // score the row while it is still cache-hot
                    let row = &khat[khat.len() - d..];
                    logits.push(dot(qi, row) * scale);
                }
                flops += 2 * (kn * d) as u64;
            }
        }
        let aux =
            bytes_of::<R>(khat.len()) + bytes_of::<R>(vhat.len()) + bytes_of::<R>(logits.len());
        softmax_rows_raw(&mut logits, heads * hw, kn, None)?;
        for h in 0..heads {
            for i in 0..hw {
                let row = (h * hw + i) * kn;
                let oi = &mut out_w[(h * hw + i) * d..(h * hw + i + 1) * d];
                for j in 0..kn {
                    axpy(logits[row + j], &vhat[(row + j) * d..(row + j + 1) * d], oi);
                }
                flops += 2 * (kn * d) as u64;
            }
        }
        if let Some(s) = save_w.as_deref_mut() {
            s.copy_from_slice(&logits);
        }
        fold_meter(meter, flops, aux);
        scratch::put(SLOT_KHAT, khat);
        scratch::put(SLOT_VHAT, vhat);
        scratch::put(SLOT_LOGITS, logits);
        Ok(())
    };

    run_windows(&mut out, weights.as_deref_mut(), dims, heads * hw * kn, worker)?;
    Ok((
        out,
        weights.map(SavedCtx::Weights).unwrap_or(SavedCtx::None),
    ))
}

/// Mask backend: compute the full `hw x hw` logit matrix, add the negative
/// sentinel off-graph, and reuse the row-softmax kernel. Peak scratch
/// `heads*hw*hw` reals.
fn mask_forward<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    dims: Dims,
    g: &KeyGraph,
    meter: Option<&CostMeter>,
    want_ctx: bool,
) -> Result<(Vec<R>, SavedCtx<R>)> {
    let Dims { b, heads, hw, d } = dims;
    let scale: R = dims.scale();
    let mut out = vec![R::ZERO; b * dims.window()];
    let mut weights = want_ctx.then(|| vec![R::ZERO; b * heads * hw * hw]);

    let worker = |wi: usize, out_w: &mut [R], mut save_w: Option<&mut [R]>| -> Result<()> {
        let mut logits = scratch::take_len(SLOT_LOGITS, heads * hw * hw, R::ZERO);
        let mut flops = 0u64;
        for h in 0..heads {
            let pane = (wi * heads + h) * dims.pane();
            let qp = &q[pane..pane + dims.pane()];
            let kp = &k[pane..pane + dims.pane()];
            let vp = &v[pane..pane + dims.pane()];
            let lg = &mut logits[h * hw * hw..(h + 1) * hw * hw];
            unsafe {
                R::gemm(
                    hw,
                    d,
                    hw,
                    scale,
                    qp.as_ptr(),
                    d as isize,
                    1,
                    kp.as_ptr(),
                    1,
                    d as isize,
                    R::ZERO,
                    lg.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            flops += 2 * (hw * hw * d) as u64;
            // additive sentinel on every off-graph entry (incl. the diagonal)
            for i in 0..hw {
                let row = &mut lg[i * hw..(i + 1) * hw];
                let mut nb = g.neighbors_of(wi, i).iter().peekable();
                for (j, val) in row.iter_mut().enumerate() {
                    if nb.peek().map(|&&n| n as usize == j).unwrap_or(false) {
                        nb.next();
                    } else {
                        *val += R::NEG_SENTINEL;
                    }
                }
            }
            softmax_rows_raw(lg, hw, hw, None)?;
            unsafe {
                R::gemm(
                    hw,
                    hw,
                    d,
                    R::ONE,
                    lg.as_ptr(),
                    hw as isize,
                    1,
                    vp.as_ptr(),
                    d as isize,
                    1,
                    R::ZERO,
                    out_w[h * dims.pane()..(h + 1) * dims.pane()].as_mut_ptr(),
                    d as isize,
                    1,
                );
            }
            flops += 2 * (hw * hw * d) as u64;
        }
        if let Some(s) = save_w.as_deref_mut() {
            s.copy_from_slice(&logits);
        }
        fold_meter(meter, flops, bytes_of::<R>(logits.len()));
        scratch::put(SLOT_LOGITS, logits);
        Ok(())
    };

    run_windows(&mut out, weights.as_deref_mut(), dims, heads * hw * hw, worker)?;
    Ok((
        out,
        weights.map(SavedCtx::Weights).unwrap_or(SavedCtx::None),
    ))
}

/// Streaming backend: iterate key blocks, keeping one running max and one
/// rescaled running sum per query row (online softmax), and a per-block
/// membership bitmask. Peak scratch `heads*(hw*block + 2*hw)` reals plus the
/// one-byte-per-lane bitmask.
#[allow(clippy::too_many_arguments)]
fn streaming_forward<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    dims: Dims,
    g: &KeyGraph,
    block: usize,
    meter: Option<&CostMeter>,
    want_ctx: bool,
) -> Result<(Vec<R>, SavedCtx<R>)> {
    if block < 1 {
        return Err(KgtError::Config(format!(
            "streaming block size must be >= 1, got {block}"
        )));
    }
    let Dims { b, heads, hw, d } = dims;
    let scale: R = dims.scale();
    let mut out = vec![R::ZERO; b * dims.window()];
    let mut lse = want_ctx.then(|| vec![R::ZERO; b * heads * hw]);

    let worker = |wi: usize, out_w: &mut [R], mut save_lse: Option<&mut [R]>| -> Result<()> {
        let mut run_max = scratch::take_len(SLOT_RUN_MAX, heads * hw, R::NEG_SENTINEL);
        run_max.fill(R::NEG_SENTINEL);
        let mut run_sum = scratch::take_len(SLOT_RUN_SUM, heads * hw, R::ZERO);
        run_sum.fill(R::ZERO);
        // blk and member are per-block scratch; only lanes marked in the
        // membership mask are ever read, so stale pooled content is fine
        let mut blk: Vec<R> = scratch::take_len(SLOT_BLOCK, heads * hw * block, R::ZERO);
        let mut member: Vec<u8> = scratch::take_len(SLOT_MEMBER, heads * hw * block, 0);
        let aux = bytes_of::<R>(run_max.len())
            + bytes_of::<R>(run_sum.len())
            + bytes_of::<R>(blk.len())
            + bytes_of::<u8>(member.len());
        let mut flops = 0u64;

        for h in 0..heads {
            let pane = (wi * heads + h) * dims.pane();
            let qp = &q[pane..pane + dims.pane()];
            let kp = &k[pane..pane + dims.pane()];
            let vp = &v[pane..pane + dims.pane()];
            let m = &mut run_max[h * hw..(h + 1) * hw];
            let s = &mut run_sum[h * hw..(h + 1) * hw];

            let mut start = 0;
            while start < hw {
                let bs = block.min(hw - start);
                for i in 0..hw {
                    let nb = g.neighbors_of(wi, i);
                    let lo = nb.partition_point(|&x| (x as usize) < start);
                    let hi = nb.partition_point(|&x| (x as usize) < start + bs);
                    let row = (h * hw + i) * block;
                    let mrow = &mut member[row..row + bs];
                    mrow.fill(0);
                    let lrow = &mut blk[row..row + bs];
                    let qi = &qp[i * d..(i + 1) * d];
                    let mut members_here = 0u64;
                    for &nbj in &nb[lo..hi] {
                        let j = nbj as usize - start;
                        mrow[j] = 1;
                        lrow[j] = dot(qi, &kp[nbj as usize * d..(nbj as usize + 1) * d]) * scale;
                        members_here += 1;
                    }
                    flops += 2 * members_here * d as u64;

                    if members_here == 0 {
                        continue;
                    }
                    let mut block_max = R::NEG_SENTINEL;
                    for j in 0..bs {
                        if mrow[j] == 1 {
                            block_max = block_max.maximum(lrow[j]);
                        }
                    }
                    let new_max = m[i].maximum(block_max);
                    let rescale = (m[i] - new_max).exp();
                    let oi = &mut out_w[(h * hw + i) * d..(h * hw + i + 1) * d];
                    if rescale != R::ONE {
                        for o in oi.iter_mut() {
                            *o *= rescale;
                        }
                    }
                    let mut block_sum = R::ZERO;
                    for j in 0..bs {
                        if mrow[j] == 1 {
                            let w = (lrow[j] - new_max).exp();
                            block_sum += w;
                            let nbj = start + j;
                            axpy(w, &vp[nbj * d..(nbj + 1) * d], oi);
                        }
                    }
                    flops += 2 * members_here * d as u64;
                    s[i] = s[i] * rescale + block_sum;
                    m[i] = new_max;
                }
                start += bs;
            }

            for i in 0..hw {
                let inv = R::ONE / s[i];
                for o in &mut out_w[(h * hw + i) * d..(h * hw + i + 1) * d] {
                    *o *= inv;
                }
                if let Some(l) = save_lse.as_deref_mut() {
                    l[h * hw + i] = m[i] + s[i].ln();
                }
            }
        }
        fold_meter(meter, flops, aux);
        scratch::put(SLOT_RUN_MAX, run_max);
        scratch::put(SLOT_RUN_SUM, run_sum);
        scratch::put(SLOT_BLOCK, blk);
        scratch::put(SLOT_MEMBER, member);
        Ok(())
    };

    // lse panes are heads*hw long, not heads*hw*d
    run_windows(&mut out, lse.as_deref_mut(), dims, heads * hw, worker)?;
    Ok((out, lse.map(SavedCtx::Lse).unwrap_or(SavedCtx::None)))
}

/// Gather/mask path backward from saved weights restricted to neighbor lists.
pub(crate) fn gather_backward<R: Real>(
    dy: &[R],
    weights: &[R], // [B, heads, hw, k]
    q: &[R],
    k: &[R],
    v: &[R],
    dims: Dims,
    g: &KeyGraph,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let Dims { b, heads, hw, d } = dims;
    let kn = g.k();
    let scale: R = dims.scale();
    let n = b * dims.window();
    let mut dq = vec![R::ZERO; n];
    let mut dk = vec![R::ZERO; n];
    let mut dv = vec![R::ZERO; n];

    dq.par_chunks_mut(dims.window())
        .zip(dk.par_chunks_mut(dims.window()))
        .zip(dv.par_chunks_mut(dims.window()))
        .enumerate()
        .for_each(|(wi, ((dq_w, dk_w), dv_w))| {
            let mut dw = vec![R::ZERO; kn];
            for h in 0..heads {
                let pane = (wi * heads + h) * dims.pane();
                let qp = &q[pane..pane + dims.pane()];
                let kp = &k[pane..pane + dims.pane()];
                let vp = &v[pane..pane + dims.pane()];
                let dyp = &dy[pane..pane + dims.pane()];
                let local = h * dims.pane();
                for i in 0..hw {
                    let nb = g.neighbors_of(wi, i);
                    let wrow = &weights[((wi * heads + h) * hw + i) * kn..][..kn];
                    let dyi = &dyp[i * d..(i + 1) * d];
                    let qi = &qp[i * d..(i + 1) * d];

                    let mut inner = R::ZERO;
                    for (j, &nbj) in nb.iter().enumerate() {
                        let nbj = nbj as usize;
                        axpy(wrow[j], dyi, &mut dv_w[local + nbj * d..local + (nbj + 1) * d]);
                        dw[j] = dot(dyi, &vp[nbj * d..(nbj + 1) * d]);
                        inner += wrow[j] * dw[j];
                    }
                    let dqi = &mut dq_w[local + i * d..local + (i + 1) * d];
                    for (j, &nbj) in nb.iter().enumerate() {
                        let nbj = nbj as usize;
                        let ds = wrow[j] * (dw[j] - inner) * scale;
                        axpy(ds, &kp[nbj * d..(nbj + 1) * d], dqi);
                        axpy(ds, qi, &mut dk_w[local + nbj * d..local + (nbj + 1) * d]);
                    }
                }
            }
        });
    (dq, dk, dv)
}

/// Streaming backward: recompute per-neighbor weights from the saved
/// log-sum-exp instead of storing them.
#[allow(clippy::too_many_arguments)]
pub(crate) fn streaming_backward<R: Real>(
    dy: &[R],
    lse: &[R], // [B, heads, hw]
    q: &[R],
    k: &[R],
    v: &[R],
    y: &[R], // forward output, for the per-row inner product
    dims: Dims,
    g: &KeyGraph,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let Dims { b, heads, hw, d } = dims;
    let scale: R = dims.scale();
    let n = b * dims.window();
    let mut dq = vec![R::ZERO; n];
    let mut dk = vec![R::ZERO; n];
    let mut dv = vec![R::ZERO; n];

    dq.par_chunks_mut(dims.window())
        .zip(dk.par_chunks_mut(dims.window()))
        .zip(dv.par_chunks_mut(dims.window()))
        .enumerate()
        .for_each(|(wi, ((dq_w, dk_w), dv_w))| {
            for h in 0..heads {
                let pane = (wi * heads + h) * dims.pane();
                let qp = &q[pane..pane + dims.pane()];
                let kp = &k[pane..pane + dims.pane()];
                let vp = &v[pane..pane + dims.pane()];
                let dyp = &dy[pane..pane + dims.pane()];
                let yp = &y[pane..pane + dims.pane()];
                let local = h * dims.pane();
                for i in 0..hw {
                    let qi = &qp[i * d..(i + 1) * d];
                    let dyi = &dyp[i * d..(i + 1) * d];
                    // D_i = dy_i . y_i equals sum_j w_ij (dy_i . v_j)
                    let big_d = dot(dyi, &yp[i * d..(i + 1) * d]);
                    let l = lse[(wi * heads + h) * hw + i];
                    let dqi_base = local + i * d;
                    for &nbj in g.neighbors_of(wi, i) {
                        let nbj = nbj as usize;
                        let kj = &kp[nbj * d..(nbj + 1) * d];
                        let w = (dot(qi, kj) * scale - l).exp();
                        axpy(w, dyi, &mut dv_w[local + nbj * d..local + (nbj + 1) * d]);
                        let ds = w * (dot(dyi, &vp[nbj * d..(nbj + 1) * d]) - big_d) * scale;
                        axpy(ds, kj, &mut dq_w[dqi_base..dqi_base + d]);
                        axpy(ds, qi, &mut dk_w[local + nbj * d..local + (nbj + 1) * d]);
                    }
                }
            }
        });
    (dq, dk, dv)
}

// ---------------------------------------------------------------------------
// Window loop plumbing
// ---------------------------------------------------------------------------

/// Run `worker` once per window over disjoint output slices (in parallel),
/// optionally zipped with a per-window slice of a saved-context buffer whose
/// per-window width is `ctx_width`.
fn run_windows<R: Real>(
    out: &mut [R],
    ctx: Option<&mut [R]>,
    dims: Dims,
    ctx_width: usize,
    worker: impl Fn(usize, &mut [R], Option<&mut [R]>) -> Result<()> + Sync,
) -> Result<()> {
    let w = dims.window();
    match ctx {
        Some(c) => out
            .par_chunks_mut(w)
            .zip(c.par_chunks_mut(ctx_width))
            .enumerate()
            .try_for_each(|(wi, (o, cw))| worker(wi, o, Some(cw))),
        None => out
            .par_chunks_mut(w)
            .enumerate()
            .try_for_each(|(wi, o)| worker(wi, o, None)),
    }
}
