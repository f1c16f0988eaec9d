//! Sparse top-k graph construction over window nodes.
//!
//! Per window, node self-similarity is the raw dot product of node vectors
//! (no scaling, no normalization). Each node keeps its `k` most similar
//! *other* nodes — the diagonal is excluded, so a node never neighbors
//! itself. Ties break toward the lower column index and stored neighbor
//! lists are index-sorted, so every consumer iterates the same order.

use std::cell::Cell;
use std::io::Write;
use std::sync::Arc;

use crate::error::{KgtError, Result};
use crate::numerics::{Real, Tensor};

thread_local! {
    static SIMILARITY_CALLS: Cell<u64> = const { Cell::new(0) };
    static BUILD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Total [`similarity`] invocations on the current thread. Graph sharing is
/// asserted by snapshotting this around a stage forward.
pub fn similarity_calls() -> u64 {
    SIMILARITY_CALLS.with(|c| c.get())
}

/// Total [`KeyGraph::build`] invocations on the current thread.
pub fn build_calls() -> u64 {
    BUILD_CALLS.with(|c| c.get())
}

/// Per-window top-k neighbor table, shared by every layer of a stage.
#[derive(Clone, Debug)]
pub struct KeyGraph {
    neighbors: Arc<Vec<u32>>, // [windows, win_nodes, k]
    windows: usize,
    win_nodes: usize,
    k: usize,
}

impl KeyGraph {
    /// Build the graph from raw node features `[B, hw, c]`, one similarity
    /// pass per window.
    pub fn build<R: Real>(v: &Tensor<R>, k: usize) -> Result<Self> {
        let shape = v.shape();
        if shape.len() != 3 {
            return Err(KgtError::Dim {
                context: "KeyGraph::build",
                detail: format!("expected [B,hw,c], got {:?}", shape),
            });
        }
        BUILD_CALLS.with(|c| c.set(c.get() + 1));
        let (b, hw, c) = (shape[0], shape[1], shape[2]);
        check_k(k, hw)?;
        v.check_finite("KeyGraph::build")?;
        let mut neighbors = vec![0u32; b * hw * k];
        let mut sim = vec![R::ZERO; hw * hw];
        for w in 0..b {
            similarity_into(&v.data()[w * hw * c..(w + 1) * hw * c], hw, c, &mut sim);
            topk_rows_into(&sim, hw, k, &mut neighbors[w * hw * k..(w + 1) * hw * k]);
        }
        Ok(Self {
            neighbors: Arc::new(neighbors),
            windows: b,
            win_nodes: hw,
            k,
        })
    }

    /// Single-window constructor from a precomputed similarity matrix.
    pub fn from_similarity<R: Real>(a: &Tensor<R>, k: usize) -> Result<Self> {
        let hw = square_side(a)?;
        check_k(k, hw)?;
        Ok(Self {
            neighbors: Arc::new(select_topk_rows(a, k)?),
            windows: 1,
            win_nodes: hw,
            k,
        })
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn win_nodes(&self) -> usize {
        self.win_nodes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Ascending-sorted neighbor indices of node `row` in window `window`.
    pub fn neighbors_of(&self, window: usize, row: usize) -> &[u32] {
        let base = (window * self.win_nodes + row) * self.k;
        &self.neighbors[base..base + self.k]
    }

    /// Relabel all nodes of every window through `perm` (new = perm[old]).
    /// Lists are re-sorted to keep the ascending-order invariant.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.win_nodes {
            return Err(KgtError::Config(format!(
                "permutation of length {} for {} nodes",
                perm.len(),
                self.win_nodes
            )));
        }
        let hw = self.win_nodes;
        let mut out = vec![0u32; self.neighbors.len()];
        for w in 0..self.windows {
            for i in 0..hw {
                let src = self.neighbors_of(w, i);
                let dst_row = (w * hw + perm[i]) * self.k;
                let dst = &mut out[dst_row..dst_row + self.k];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = perm[s as usize] as u32;
                }
                dst.sort_unstable();
            }
        }
        Ok(Self {
            neighbors: Arc::new(out),
            ..self.clone()
        })
    }

    /// Dump as CSV with columns `window,row,rank,neighbor` where `rank` is
    /// the position in the (index-sorted) neighbor list.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "window,row,rank,neighbor")?;
        for w in 0..self.windows {
            for i in 0..self.win_nodes {
                for (rank, &n) in self.neighbors_of(w, i).iter().enumerate() {
                    writeln!(out, "{w},{i},{rank},{n}")?;
                }
            }
        }
        Ok(())
    }
}

fn check_k(k: usize, hw: usize) -> Result<()> {
    if k < 1 || k > hw.saturating_sub(1) {
        return Err(KgtError::Config(format!(
            "k must satisfy 1 <= k <= hw-1, got k={k} with hw={hw}"
        )));
    }
    Ok(())
}

fn square_side<R: Real>(a: &Tensor<R>) -> Result<usize> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(KgtError::Dim {
            context: "select_topk",
            detail: format!("similarity matrix must be square, got {:?}", s),
        });
    }
    Ok(s[0])
}

/// Pairwise node correlation `A[i,j] = v_i . v_j` for one window `[hw, c]`.
pub fn similarity<R: Real>(v: &Tensor<R>) -> Result<Tensor<R>> {
    let shape = v.shape();
    if shape.len() != 2 {
        return Err(KgtError::Dim {
            context: "similarity",
            detail: format!("expected [hw,c], got {:?}", shape),
        });
    }
    let (hw, c) = (shape[0], shape[1]);
    let mut a = vec![R::ZERO; hw * hw];
    similarity_into(v.data(), hw, c, &mut a);
    let t = Tensor::new(&[hw, hw], a)?;
    t.check_finite("similarity")?;
    Ok(t)
}

/// The similarity computation proper; every invocation is counted so graph
/// sharing can be asserted from outside.
fn similarity_into<R: Real>(v: &[R], hw: usize, c: usize, out: &mut [R]) {
    SIMILARITY_CALLS.with(|cell| cell.set(cell.get() + 1));
    debug_assert_eq!(v.len(), hw * c);
    debug_assert_eq!(out.len(), hw * hw);
    if c == 0 {
        out.fill(R::ZERO);
        return;
    }
    // Window-sized matrices are too small to amortize gemm packing; direct
    // symmetric dot loops win below ~128 nodes.
    if hw <= 128 {
        for i in 0..hw {
            let vi = &v[i * c..(i + 1) * c];
            for j in i..hw {
                let vj = &v[j * c..(j + 1) * c];
                let mut acc = R::ZERO;
                for (&a, &b) in vi.iter().zip(vj) {
                    acc += a * b;
                }
                out[i * hw + j] = acc;
                out[j * hw + i] = acc;
            }
        }
        return;
    }
    unsafe {
        R::gemm(
            hw,
            c,
            hw,
            R::ONE,
            v.as_ptr(),
            c as isize,
            1,
            v.as_ptr(),
            1,
            c as isize,
            R::ZERO,
            out.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
}

/// Per row: indices of the `k` largest off-diagonal entries, ties broken by
/// the lower column index, returned in ascending index order.
pub fn select_topk<R: Real>(a: &Tensor<R>, k: usize) -> Result<KeyGraph> {
    KeyGraph::from_similarity(a, k)
}

fn select_topk_rows<R: Real>(a: &Tensor<R>, k: usize) -> Result<Vec<u32>> {
    let hw = square_side(a)?;
    check_k(k, hw)?;
    a.check_finite("select_topk")?;
    let mut out = vec![0u32; hw * k];
    topk_rows_into(a.data(), hw, k, &mut out);
    Ok(out)
}

fn topk_rows_into<R: Real>(a: &[R], hw: usize, k: usize, out: &mut [u32]) {
    debug_assert_eq!(a.len(), hw * hw);
    debug_assert_eq!(out.len(), hw * k);
    let mut cand: Vec<u32> = Vec::with_capacity(hw - 1);
    for i in 0..hw {
        let row = &a[i * hw..(i + 1) * hw];
        cand.clear();
        cand.extend((0..hw as u32).filter(|&j| j as usize != i));
        // Strict total order: value descending, then index ascending. The
        // same comparator drives the brute-force oracle in tests.
        let by_rank = |&x: &u32, &y: &u32| {
            row[y as usize]
                .partial_cmp(&row[x as usize])
                .expect("finite similarity")
                .then(x.cmp(&y))
        };
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_rank);
        }
        let chosen = &mut cand[..k];
        chosen.sort_unstable();
        out[i * k..(i + 1) * k].copy_from_slice(chosen);
    }
}
