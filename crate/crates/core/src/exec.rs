//! Order-preserving map over independent work items.
//!
//! With the `parallel` feature (default) [`Execution::Parallel`] fans out over the rayon pool;
//! without it every mode runs sequentially. Results are always returned in index order, so
//! outputs are identical across modes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

pub fn map_indices<T, F>(count: usize, mode: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..count).into_par_iter().map(f).collect()
        }
        _ => (0..count).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let seq = map_indices(257, Execution::Sequential, |i| i * i);
        let par = map_indices(257, Execution::Parallel, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[16], 256);
    }
}
