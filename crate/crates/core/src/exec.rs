//! Deterministic chunked evaluation.
//!
//! Work over `0..count` is cut into fixed-size chunks whose boundaries do not
//! depend on the number of workers. Each chunk is reduced on its own and the
//! caller merges chunk results in index order, so floating-point results are
//! bit-identical whether chunks run on one thread or many.

use serde::{Deserialize, Serialize};

/// Nodes per chunk.
pub const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    /// Chunks are spread over the current rayon pool; without the `parallel`
    /// feature this runs sequentially.
    #[default]
    Parallel,
}

/// Evaluate `f` on every chunk and return chunk results in order, or the
/// error of the first failing chunk.
pub fn map_chunks<A, E, F>(exec: Exec, count: usize, f: F) -> Result<Vec<A>, E>
where
    A: Send,
    E: Send,
    F: Fn(std::ops::Range<usize>) -> Result<A, E> + Sync,
{
    let chunks = count.div_ceil(CHUNK);
    let range = |c: usize| c * CHUNK..((c + 1) * CHUNK).min(count);
    let results: Vec<Result<A, E>> = match exec {
        Exec::Sequential => (0..chunks).map(|c| f(range(c))).collect(),
        Exec::Parallel => parallel_map(chunks, |c| f(range(c))),
    };
    results.into_iter().collect()
}

#[cfg(feature = "parallel")]
fn parallel_map<T: Send>(chunks: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..chunks).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T: Send>(chunks: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..chunks).map(f).collect()
}
