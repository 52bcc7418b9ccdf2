//! Data-parallel mapping over independent items (proteins, lines, reps).
//!
//! With the `parallel` feature (default) the work runs on the rayon pool
//! when `parallel == true`; without the feature, or with `parallel ==
//! false`, it runs sequentially. Results are always collected in input
//! order, so both paths produce identical output.

#[cfg(feature = "parallel")]
pub fn map<I, O, F>(parallel: bool, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    use rayon::prelude::*;
    if parallel && items.len() > 1 {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map<I, O, F>(_parallel: bool, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Fallible map; the first error in input order wins.
pub fn try_map<I, O, E, F>(parallel: bool, items: &[I], f: F) -> Result<Vec<O>, E>
where
    I: Sync,
    O: Send,
    E: Send,
    F: Fn(&I) -> Result<O, E> + Sync + Send,
{
    let results = map(parallel, items, f);
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?);
    }
    Ok(out)
}
