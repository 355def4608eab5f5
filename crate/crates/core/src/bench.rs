//! Wall-clock breakdown of one GSF forward by stage.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::error::{config_err, Result};
use crate::gsf::{GsfConfig, GsfModule, Stage, StageClock};
use crate::rng::seeded;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub shape: [usize; 5],
    pub iters: usize,
    /// Mean time per forward for each stage, in [`Stage::ALL`] order.
    pub stages: Vec<(Stage, Duration)>,
    /// Mean wall-clock time per forward, including tape bookkeeping.
    pub total: Duration,
}

impl BenchReport {
    /// One `stage<TAB>microseconds` line per stage, then `total`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (stage, d) in &self.stages {
            let _ = writeln!(s, "{}\t{:.1}", stage.label(), micros(*d));
        }
        let _ = writeln!(s, "total\t{:.1}", micros(self.total));
        s
    }

    pub fn to_pretty(&self) -> String {
        let [b, c, t, h, w] = self.shape;
        let mut s = format!("GSF forward, input {b}x{c}x{t}x{h}x{w}, {} iterations\n", self.iters);
        let _ = writeln!(s, "{:<26}{:>14}{:>9}", "stage", "time (us)", "share");
        let sum: f64 = self.stages.iter().map(|(_, d)| micros(*d)).sum();
        for (stage, d) in &self.stages {
            let us = micros(*d);
            let share = if sum > 0.0 { 100.0 * us / sum } else { 0.0 };
            let _ = writeln!(s, "{:<26}{:>14.1}{:>8.1}%", stage.label(), us, share);
        }
        let _ = writeln!(s, "{:<26}{:>14.1}", "total", micros(self.total));
        s
    }
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// Times `iters` forwards of a randomly initialized learned GSF over all
/// `C` channels of a `B×C×T×H×W` input.
pub fn bench(shape: [usize; 5], iters: usize, seed: u64) -> Result<BenchReport> {
    if iters == 0 {
        return config_err("bench needs at least one iteration");
    }
    let cfg = GsfConfig::new(shape[1]);
    cfg.validate()?;
    let mut rng = seeded(seed);
    let module = GsfModule::<f32>::random(cfg, 0.1, &mut rng)?;
    let x = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
    let mut clock = StageClock::new();
    let start = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        clock.restart();
        module.forward_staged(&mut tape, xv, "gsf", Some(&mut clock))?;
    }
    let total = start.elapsed() / iters as u32;
    let stages = Stage::ALL.iter().map(|&s| (s, clock.total(s) / iters as u32)).collect();
    Ok(BenchReport {
        shape,
        iters,
        stages,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_every_stage() {
        let r = bench([1, 8, 4, 6, 6], 2, 1).unwrap();
        assert_eq!(r.stages.len(), 7);
        assert_eq!(r.to_tsv().lines().count(), 8);
        assert!(r.to_pretty().contains("gate computing"));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(bench([1, 8, 4, 6, 6], 0, 1).is_err());
        assert!(bench([1, 1, 4, 6, 6], 1, 1).is_err());
    }
}
