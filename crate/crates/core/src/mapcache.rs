//! Process-wide memoization of index gather maps.
//!
//! Partition/merge, head split/merge, and im2col maps depend only on shapes,
//! which repeat every step during training; building them per call dominated
//! profile time before caching.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub(crate) enum MapKey {
    Partition { c: usize, h: usize, w: usize, win: usize },
    Merge { c: usize, h: usize, w: usize, win: usize },
    HeadSplit { b: usize, hw: usize, heads: usize, d: usize },
    HeadMerge { b: usize, hw: usize, heads: usize, d: usize },
    Im2col { cin: usize, h: usize, w: usize },
}

fn cache() -> &'static Mutex<HashMap<MapKey, Arc<Vec<u32>>>> {
    static CACHE: OnceLock<Mutex<HashMap<MapKey, Arc<Vec<u32>>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

pub(crate) fn memoized(key: MapKey, build: impl FnOnce() -> Vec<u32>) -> Arc<Vec<u32>> {
    if let Some(hit) = cache().lock().expect("map cache").get(&key) {
        return Arc::clone(hit);
    }
    let built = Arc::new(build());
    cache()
        .lock()
        .expect("map cache")
        .entry(key)
        .or_insert(built)
        .clone()
}
