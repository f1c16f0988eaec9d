//! Conversion between whole feature maps and batches of independent
//! window node sets.
//!
//! A `[C,H,W]` map is reflect-padded up to multiples of the window side and
//! cut into `B` windows of `hw = win*win` nodes with `c = C` channels each.
//! Node vectors are channels-last so one node is one contiguous slice.
//! Flattening order is fixed (row-major within each window, windows row-major
//! over the grid) so graph indices are reproducible.

use std::sync::Arc;

use crate::error::{KgtError, Result};
use crate::numerics::{reflect_index, Real, Tensor, Var};

/// Shape bookkeeping for one partitioning. `B == (padded_h/win)*(padded_w/win)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub channels: usize,
    pub orig_h: usize,
    pub orig_w: usize,
    pub win: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl WindowLayout {
    pub fn new(channels: usize, orig_h: usize, orig_w: usize, win: usize) -> Result<Self> {
        if win < 2 {
            return Err(KgtError::Config(format!(
                "window side must be >= 2, got {win}"
            )));
        }
        if channels == 0 || orig_h == 0 || orig_w == 0 {
            return Err(KgtError::Config(format!(
                "degenerate feature map [{channels},{orig_h},{orig_w}]"
            )));
        }
        let pad_up = |n: usize| n.div_ceil(win) * win;
        Ok(Self {
            channels,
            orig_h,
            orig_w,
            win,
            padded_h: pad_up(orig_h),
            padded_w: pad_up(orig_w),
        })
    }

    pub fn windows(&self) -> usize {
        (self.padded_h / self.win) * (self.padded_w / self.win)
    }

    pub fn nodes_per_window(&self) -> usize {
        self.win * self.win
    }

    fn check(&self) -> Result<()> {
        if self.padded_h % self.win != 0
            || self.padded_w % self.win != 0
            || self.padded_h < self.orig_h
            || self.padded_w < self.orig_w
        {
            return Err(KgtError::Integrity(format!(
                "window bookkeeping {:?} is inconsistent",
                self
            )));
        }
        Ok(())
    }

    /// Gather map for partition: output `[B, hw, C]` from input `[C, H, W]`.
    pub fn partition_map(&self) -> Arc<Vec<u32>> {
        let key = crate::mapcache::MapKey::Partition {
            c: self.channels,
            h: self.orig_h,
            w: self.orig_w,
            win: self.win,
        };
        let me = self.clone();
        crate::mapcache::memoized(key, move || me.partition_map_build())
    }

    fn partition_map_build(&self) -> Vec<u32> {
        let (c, h, w, win) = (self.channels, self.orig_h, self.orig_w, self.win);
        let wins_x = self.padded_w / win;
        let hw = win * win;
        let b = self.windows();
        let mut map = vec![0u32; b * hw * c];
        let mut out = 0;
        for bi in 0..b {
            let wy = bi / wins_x;
            let wx = bi % wins_x;
            for node in 0..hw {
                let y = reflect_index((wy * win + node / win) as isize, h);
                let x = reflect_index((wx * win + node % win) as isize, w);
                for ch in 0..c {
                    map[out] = ((ch * h + y) * w + x) as u32;
                    out += 1;
                }
            }
        }
        map
    }

    /// Gather map for merge: output `[C, orig_h, orig_w]` from nodes `[B, hw, C]`.
    /// Padded node positions are simply never read, which makes merge the
    /// exact inverse of partition.
    pub fn merge_map(&self) -> Arc<Vec<u32>> {
        let key = crate::mapcache::MapKey::Merge {
            c: self.channels,
            h: self.orig_h,
            w: self.orig_w,
            win: self.win,
        };
        let me = self.clone();
        crate::mapcache::memoized(key, move || me.merge_map_build())
    }

    fn merge_map_build(&self) -> Vec<u32> {
        let (c, h, w, win) = (self.channels, self.orig_h, self.orig_w, self.win);
        let wins_x = self.padded_w / win;
        let hw = win * win;
        let mut map = vec![0u32; c * h * w];
        let mut out = 0;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let bi = (y / win) * wins_x + x / win;
                    let node = (y % win) * win + x % win;
                    map[out] = ((bi * hw + node) * c + ch) as u32;
                    out += 1;
                }
            }
        }
        map
    }
}

/// A feature map laid out as `B` windows of `hw` nodes with `c` channels,
/// plus the padding bookkeeping needed to invert the operation.
#[derive(Clone, Debug)]
pub struct WindowBatch<R: Real = f32> {
    pub nodes: Tensor<R>,
    pub layout: WindowLayout,
}

/// Cut `[C,H,W]` into windows, reflect-padding up to multiples of `win`.
pub fn partition<R: Real>(f: &Tensor<R>, win: usize) -> Result<WindowBatch<R>> {
    let v = partition_var(&Var::constant(f.clone()), win)?;
    Ok(WindowBatch {
        nodes: v.nodes.value().clone(),
        layout: v.layout,
    })
}

/// Exact inverse of [`partition`], including the crop of any padding.
pub fn merge<R: Real>(wb: &WindowBatch<R>) -> Result<Tensor<R>> {
    merge_var(&VarWindowBatch {
        nodes: Var::constant(wb.nodes.clone()),
        layout: wb.layout.clone(),
    })
    .map(|v| v.value().clone())
}

/// Differentiable counterpart of [`WindowBatch`] used inside stage forwards.
#[derive(Clone)]
pub struct VarWindowBatch<R: Real = f32> {
    pub nodes: Var<R>,
    pub layout: WindowLayout,
}

pub fn partition_var<R: Real>(f: &Var<R>, win: usize) -> Result<VarWindowBatch<R>> {
    let shape = f.shape();
    if shape.len() != 3 {
        return Err(KgtError::Dim {
            context: "partition",
            detail: format!("expected [C,H,W], got {:?}", shape),
        });
    }
    let layout = WindowLayout::new(shape[0], shape[1], shape[2], win)?;
    let map = layout.partition_map();
    let nodes = f.gather_prevalidated(
        map,
        &[layout.windows(), layout.nodes_per_window(), layout.channels],
    )?;
    Ok(VarWindowBatch { nodes, layout })
}

pub fn merge_var<R: Real>(wb: &VarWindowBatch<R>) -> Result<Var<R>> {
    wb.layout.check()?;
    let expect = [
        wb.layout.windows(),
        wb.layout.nodes_per_window(),
        wb.layout.channels,
    ];
    if wb.nodes.shape() != expect {
        return Err(KgtError::Integrity(format!(
            "window nodes shape {:?} does not match layout {:?}",
            wb.nodes.shape(),
            expect
        )));
    }
    let map = wb.layout.merge_map();
    wb.nodes.gather_prevalidated(
        map,
        &[wb.layout.channels, wb.layout.orig_h, wb.layout.orig_w],
    )
}
