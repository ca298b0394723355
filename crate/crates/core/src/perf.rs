//! Wall-clock comparison of sequential and parallel-scan inference.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::inference::{self, scan::ceil_log2, GaussianSequence, Method};
use crate::presets::TwoRegionPreset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfRow {
    pub bins: usize,
    /// Best-of-repeats filter plus smoother time.
    pub sequential_secs: f64,
    pub parallel_secs: f64,
    /// Dependent combine levels of the parallel filter and smoother scans.
    pub filter_levels: usize,
    pub smoother_levels: usize,
    /// `⌈log₂ T⌉`.
    pub expected_levels: usize,
    pub threads: usize,
}

fn time_method(seq: &GaussianSequence, method: Method, repeats: usize) -> Result<(f64, usize, usize)> {
    let mut best = f64::INFINITY;
    let mut levels = (0, 0);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let filt = inference::filter(seq, method)?;
        let sm = inference::smooth(seq, &filt, method)?;
        best = best.min(start.elapsed().as_secs_f64());
        levels = (
            filt.scan_stats.map_or(0, |s| s.levels),
            sm.scan_stats.map_or(0, |s| s.levels),
        );
    }
    Ok((best, levels.0, levels.1))
}

/// Time both inference variants on the synthetic preset at every length in
/// `bins`, with `trials` trials batched together.
pub fn run_perf(bins: &[usize], trials: usize, repeats: usize, seed: u64) -> Result<Vec<PerfRow>> {
    bins.iter()
        .map(|&t| {
            let preset = TwoRegionPreset {
                bins: t,
                trials,
                ..TwoRegionPreset::default()
            };
            let (model, sim) = preset.simulate(seed)?;
            let refs: Vec<&DMatrix<f64>> = sim.data.trials.iter().collect();
            let seq = GaussianSequence::from_model(&model, &refs)?;
            let (s, _, _) = time_method(&seq, Method::Sequential, repeats)?;
            let (p, fl, sl) = time_method(&seq, Method::Parallel, repeats)?;
            Ok(PerfRow {
                bins: t,
                sequential_secs: s,
                parallel_secs: p,
                filter_levels: fl,
                smoother_levels: sl,
                expected_levels: ceil_log2(t),
                threads: rayon::current_num_threads(),
            })
        })
        .collect()
}

pub fn perf_tsv(rows: &[PerfRow]) -> String {
    let mut out = String::from(
        "bins\tsequential_secs\tparallel_secs\tfilter_levels\tsmoother_levels\texpected_levels\tthreads\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}\n",
            r.bins,
            r.sequential_secs,
            r.parallel_secs,
            r.filter_levels,
            r.smoother_levels,
            r.expected_levels,
            r.threads
        ));
    }
    out
}
