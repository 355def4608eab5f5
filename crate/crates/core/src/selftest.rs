//! Seeded comparisons of the kernels and the GSF block against the
//! brute-force references in [`crate::oracle`].
//!
//! Each suite is a plain function of a case count and a seed, so the CLI
//! and the test suites can run the same checks at different sizes.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::gsf::{self, FusionMode, GateMode, GsfConfig, GsfModule};
use crate::ops;
use crate::oracle::{self, OracleGsfWeights, OracleReport};
use crate::rng::{seeded, GsfRng};
use crate::tensor::{Element, Tensor};

pub const FRACTIONS: [f64; 5] = [0.125, 0.25, 0.5, 0.75, 1.0];
pub const GATES: [GateMode; 4] = [
    GateMode::Learned,
    GateMode::Positive,
    GateMode::Negative,
    GateMode::Zero,
];
pub const FUSIONS: [FusionMode; 2] = [FusionMode::Learned, FusionMode::Sum];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn from_report(name: &'static str, cases: usize, report: &OracleReport) -> Self {
        SuiteResult {
            name,
            cases,
            passed: report.passed(),
            detail: format!(
                "max_rel={:.3e} max_abs={:.3e} tol={:.0e} compared={}",
                report.max_rel_err, report.max_abs_err, report.tolerance, report.compared
            ),
        }
    }

    /// `name<TAB>PASS|FAIL<TAB>cases<TAB>detail`.
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.cases,
            self.detail
        )
    }
}

fn merge_all(reports: impl IntoIterator<Item = OracleReport>, tolerance: f64) -> OracleReport {
    reports
        .into_iter()
        .fold(oracle::compare_slices(&[], &[], tolerance), OracleReport::merge)
}

/// A random valid GSF configuration with at most `max_channels` channels.
pub fn random_config(rng: &mut GsfRng, max_channels: usize) -> GsfConfig {
    loop {
        let c = rng.gen_range(2..=max_channels);
        let fraction = *FRACTIONS.choose(rng).unwrap();
        let cfg = GsfConfig::new(c)
            .with_fraction(fraction)
            .with_modes(*GATES.choose(rng).unwrap(), *FUSIONS.choose(rng).unwrap())
            .with_pre_gate_norm(rng.gen_bool(0.5));
        if cfg.validate().is_ok() {
            return cfg;
        }
    }
}

/// A random `B×C×T×H×W` shape bounded by `2×C×6×6×6`.
pub fn random_shape(rng: &mut GsfRng, c: usize) -> [usize; 5] {
    [
        rng.gen_range(1..=2),
        c,
        rng.gen_range(1..=6),
        rng.gen_range(1..=6),
        rng.gen_range(1..=6),
    ]
}

/// A random valid configuration with a learned gate and the given fusion.
pub fn random_learned_config(rng: &mut GsfRng, max_channels: usize, fusion: FusionMode) -> GsfConfig {
    loop {
        let cfg = random_config(rng, max_channels).with_modes(GateMode::Learned, fusion);
        if cfg.validate().is_ok() {
            return cfg;
        }
    }
}

pub fn conv2d_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = seeded(seed);
    let mut reports = Vec::with_capacity(cases);
    for _ in 0..cases {
        let k = *[1usize, 3, 5].choose(&mut rng).unwrap();
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2);
        let (h, w) = (rng.gen_range(k..=9), rng.gen_range(k..=9));
        let x = Tensor::<f32>::randn(&[rng.gen_range(1..=2), rng.gen_range(1..=4), h, w], 1.0, &mut rng);
        let kernel = Tensor::<f32>::randn(&[rng.gen_range(1..=4), x.dim(1), k, k], 1.0, &mut rng);
        let got = ops::conv2d(&x, &kernel, stride, pad)?;
        reports.push(oracle::compare(
            &oracle::conv2d_oracle(&x, &kernel, stride, pad),
            &got,
            1e-5,
        ));
    }
    Ok(SuiteResult::from_report("conv2d", cases, &merge_all(reports, 1e-5)))
}

pub fn conv3d_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = seeded(seed);
    let mut reports = Vec::with_capacity(cases);
    for _ in 0..cases {
        let groups = rng.gen_range(1..=2);
        let per = rng.gen_range(1..=3);
        let shape = [
            rng.gen_range(1..=2),
            groups * per,
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
        ];
        let x = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
        let kernel = Tensor::<f32>::randn(&[groups, per, 3, 3, 3], 1.0, &mut rng);
        let got = ops::conv3d_grouped_single_plane(&x, &kernel, (1, 1, 1))?;
        reports.push(oracle::compare(
            &oracle::conv3d_grouped_oracle(&x, &kernel, (1, 1, 1)),
            &got,
            1e-5,
        ));
    }
    Ok(SuiteResult::from_report(
        "conv3d_grouped",
        cases,
        &merge_all(reports, 1e-5),
    ))
}

/// `27·C_g + 36` for every even `C_g` up to 256, both from the formula and
/// by enumerating a constructed module.
pub fn param_formula_suite() -> Result<SuiteResult> {
    let mut bad = Vec::new();
    for cg in (2..=256).step_by(2) {
        let expect = 27 * cg + 36;
        let formula = gsf::param_count(cg, GateMode::Learned, FusionMode::Learned);
        let m = GsfModule::<f32>::new(GsfConfig::new(cg).with_pre_gate_norm(false))?;
        let enumerated = crate::layers::Parameterized::param_count(&m);
        if formula != expect || enumerated != expect {
            bad.push(cg);
        }
    }
    Ok(SuiteResult {
        name: "param_formula",
        cases: 128,
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            "27*C_g+36 for C_g=2..256".into()
        } else {
            format!("mismatch at C_g={bad:?}")
        },
    })
}

/// Fixed-gate, sum-fusion modes against identity, shift and differencing.
pub fn ablation_suite(cases: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = seeded(seed);
    let mut identity_bad = 0;
    let mut shift = Vec::new();
    let mut diff = Vec::new();
    for _ in 0..cases {
        let (c, fraction) = loop {
            let c = 2 * rng.gen_range(1..=4);
            let fraction = *FRACTIONS.choose(&mut rng).unwrap();
            if gsf::processed_channels(c, fraction) >= 2 {
                break (c, fraction);
            }
        };
        let shape = random_shape(&mut rng, c);
        let x = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
        let build = |gate| {
            let cfg = GsfConfig::new(c)
                .with_fraction(fraction)
                .with_modes(gate, FusionMode::Sum);
            cfg.validate().map(|_| cfg)
        };
        let zero_cfg = build(GateMode::Zero)?;
        let cg = zero_cfg.processed_channels();
        if GsfModule::<f32>::new(zero_cfg)?.apply(&x)? != x {
            identity_bad += 1;
        }
        let plus = GsfModule::<f32>::new(build(GateMode::Positive)?)?.apply(&x)?;
        shift.push(oracle::compare(&oracle::shift_oracle(&x, cg), &plus, 1e-6));
        let minus = GsfModule::<f32>::new(build(GateMode::Negative)?)?.apply(&x)?;
        diff.push(oracle::compare(&oracle::differencing_oracle(&x, cg), &minus, 1e-6));
    }
    Ok(vec![
        SuiteResult {
            name: "ablation_zero_sum_identity",
            cases,
            passed: identity_bad == 0,
            detail: format!("{identity_bad} cases differ from the input"),
        },
        SuiteResult::from_report("ablation_plus_one_shift", cases, &merge_all(shift, 1e-6)),
        SuiteResult::from_report("ablation_minus_one_difference", cases, &merge_all(diff, 1e-6)),
    ])
}

/// Random modules and inputs against the scalar-loop transcription.
pub fn forward_oracle_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = seeded(seed);
    let mut reports = Vec::with_capacity(cases);
    for _ in 0..cases {
        let cfg = random_config(&mut rng, 8);
        let m = GsfModule::<f64>::random(cfg, 0.5, &mut rng)?;
        let x = Tensor::<f64>::randn(&random_shape(&mut rng, cfg.channels_in), 1.0, &mut rng);
        let want = oracle::gsf_scalar_oracle(&OracleGsfWeights::from_module(&m), &x);
        reports.push(oracle::compare(&want, &m.apply(&x)?, 1e-5));
    }
    Ok(SuiteResult::from_report(
        "gsf_forward_oracle",
        cases,
        &merge_all(reports, 1e-5),
    ))
}

/// Smallest distance from zero allowed for inputs of the pre-gate
/// rectifier in gradient checks.
pub const KINK_MARGIN: f64 = 0.01;

/// Whether every pre-gate rectifier input (inference-mode normalization of
/// the processed slab) stays at least `margin` away from the kink.
pub fn clear_of_kinks(m: &GsfModule<f64>, x: &Tensor<f64>, margin: f64) -> bool {
    let Some(norm) = m.norm() else { return true };
    let (mul, add) = norm.folded();
    let s = x.shape();
    let inner = s[2] * s[3] * s[4];
    let cg = m.config().processed_channels();
    x.data().iter().enumerate().all(|(i, &v)| {
        let ch = (i / inner) % s[1];
        ch >= cg || (mul[ch] * v + add[ch]).abs() >= margin
    })
}

/// Central differences on every parameter of random learned-gate modules.
pub fn gradient_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = seeded(seed);
    let mut reports = Vec::with_capacity(cases);
    for i in 0..cases {
        let fusion = FUSIONS[i % 2];
        let c = 2 * rng.gen_range(1..=3);
        let cfg = GsfConfig::new(c)
            .with_fraction(1.0)
            .with_modes(GateMode::Learned, fusion)
            .with_pre_gate_norm(i % 4 < 2);
        let m = GsfModule::<f64>::random(cfg, 0.5, &mut rng)?;
        let shape = [1, c, rng.gen_range(2..=4), rng.gen_range(2..=4), rng.gen_range(2..=4)];
        let x = loop {
            let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
            if clear_of_kinks(&m, &x, KINK_MARGIN) {
                break x;
            }
        };
        let probe = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
        reports.push(oracle::gsf_grad_check(&m, &x, &probe, 1e-3, 1e-4)?);
    }
    Ok(SuiteResult::from_report(
        "gsf_gradients",
        cases,
        &merge_all(reports, 1e-4),
    ))
}

/// Whether the channels past the processed slab come out bit-identical.
pub fn passthrough_intact<E: Element>(m: &GsfModule<E>, x: &Tensor<E>) -> Result<bool> {
    let z = m.apply(x)?;
    let cg = m.config().processed_channels();
    let rest = x.dim(1) - cg;
    if z.shape() != x.shape() {
        return Ok(false);
    }
    if rest == 0 {
        return Ok(true);
    }
    let a = ops::slice_axis(x, 1, cg, rest)?;
    let b = ops::slice_axis(&z, 1, cg, rest)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits()))
}

/// Shifted gated features and residuals of both groups, rebuilt from the
/// public gate maps.
pub fn group_parts(m: &GsfModule<f64>, x: &Tensor<f64>) -> Result<[(Tensor<f64>, Tensor<f64>); 2]> {
    let cg = m.config().processed_channels();
    let half = cg / 2;
    let slab = ops::slice_axis(x, 1, 0, cg)?;
    let gates = m.gate_maps(&slab)?;
    let part = |g: usize| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let xg = ops::slice_axis(&slab, 1, g * half, half)?;
        let gate = ops::slice_axis(&gates, 1, g, 1)?;
        let y = ops::hadamard(&gate, &xg)?;
        let r = ops::sub(&xg, &y)?;
        let ys = if g == 0 { gsf::shift_fw(&y)? } else { gsf::shift_bw(&y)? };
        Ok((ys, r))
    };
    Ok([part(0)?, part(1)?])
}

/// Largest distance, relative to `1 + max(|a|, |b|)`, by which a processed
/// output leaves the interval spanned by its shifted input `a` and residual
/// `b`; 0 when every element lies inside.
pub fn convex_excess(m: &GsfModule<f64>, x: &Tensor<f64>) -> Result<f64> {
    let z = m.apply(x)?;
    let half = m.config().processed_channels() / 2;
    let mut worst = 0.0f64;
    for (g, (ys, r)) in group_parts(m, x)?.iter().enumerate() {
        let zg = ops::slice_axis(&z, 1, g * half, half)?;
        for ((&a, &b), &v) in ys.data().iter().zip(r.data()).zip(zg.data()) {
            let out = (a.min(b) - v).max(v - a.max(b)).max(0.0);
            worst = worst.max(out / (1.0 + a.abs().max(b.abs())));
        }
    }
    Ok(worst)
}

/// Output frames that change when every value of input frame `t0` is
/// raised by a random amount.
pub fn affected_frames(m: &GsfModule<f64>, x: &Tensor<f64>, t0: usize, rng: &mut GsfRng) -> Result<Vec<usize>> {
    let s = x.shape().to_vec();
    let frame = s[3] * s[4];
    let mut bumped = x.clone();
    for (i, v) in bumped.data_mut().iter_mut().enumerate() {
        if (i / frame) % s[2] == t0 {
            *v += rng.gen_range(0.5..2.0);
        }
    }
    let (a, z) = (m.apply(x)?, m.apply(&bumped)?);
    let mut hit = vec![false; s[2]];
    for (i, (p, q)) in a.data().iter().zip(z.data()).enumerate() {
        if p != q {
            hit[(i / frame) % s[2]] = true;
        }
    }
    Ok((0..s[2]).filter(|&t| hit[t]).collect())
}

/// Farthest output frame reached from input frame `t0`.
pub fn temporal_reach(m: &GsfModule<f64>, x: &Tensor<f64>, t0: usize, rng: &mut GsfRng) -> Result<usize> {
    Ok(affected_frames(m, x, t0, rng)?
        .into_iter()
        .map(|t| t.abs_diff(t0))
        .max()
        .unwrap_or(0))
}

/// Reach implied by the architecture. A learned gate conv and the shift
/// each span one frame, and the learned fusion conv spans one more frame
/// on pooled features.
pub fn reach_bound(gate: GateMode, fusion: FusionMode) -> usize {
    let gate_extent = usize::from(gate == GateMode::Learned);
    let fusion_extent = usize::from(fusion == FusionMode::Learned);
    1 + gate_extent + fusion_extent
}

/// `(min, max)` of the gate planes for a processed slab.
pub fn gate_range(m: &GsfModule<f64>, slab: &Tensor<f64>) -> Result<(f64, f64)> {
    Ok(min_max(m.gate_maps(slab)?.data()))
}

/// `(min, max)` of both groups' fusion weights.
pub fn fusion_range(m: &GsfModule<f64>, x: &Tensor<f64>) -> Result<(f64, f64)> {
    let mut out = (f64::INFINITY, f64::NEG_INFINITY);
    for (g, (ys, r)) in group_parts(m, x)?.iter().enumerate() {
        let (lo, hi) = min_max(m.fusion_weights(g, ys, r)?.data());
        out = (out.0.min(lo), out.1.max(hi));
    }
    Ok(out)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

/// A learned-gate module whose kernels are scaled by the gate fan-in, so
/// that pre-activations stay well inside the range where `tanh` is not
/// rounded to ±1.
pub fn fan_in_module(rng: &mut GsfRng, cfg: GsfConfig) -> Result<GsfModule<f64>> {
    let fan_in = 27 * cfg.processed_channels() / 2;
    let std = rng.gen_range(0.05..1.0) / (fan_in as f64).sqrt();
    GsfModule::random(cfg, std, rng)
}

/// Largest reach seen per (learned gate, learned fusion) pair, indexed
/// `[gate learned][fusion learned]`.
pub type ReachTable = [[usize; 2]; 2];

/// One seeded draw of every structural check.
#[derive(Clone, Copy, Debug)]
pub struct StructuralCase {
    pub passthrough_intact: bool,
    pub convex_excess: f64,
    pub reach: usize,
    pub gate: GateMode,
    pub fusion: FusionMode,
    pub gate_range: (f64, f64),
    pub fusion_range: (f64, f64),
}

pub fn structural_case(seed: u64) -> Result<StructuralCase> {
    let mut rng = seeded(seed);

    let cfg = random_config(&mut rng, 16);
    let m = GsfModule::<f32>::random(cfg, 0.5, &mut rng)?;
    let x = Tensor::<f32>::randn(&random_shape(&mut rng, cfg.channels_in), 1.0, &mut rng);
    let intact = passthrough_intact(&m, &x)?;

    let cfg = random_learned_config(&mut rng, 12, FusionMode::Learned);
    let m = GsfModule::<f64>::random(cfg, rng.gen_range(0.05..1.0), &mut rng)?;
    let x = Tensor::<f64>::randn(&random_shape(&mut rng, cfg.channels_in), 1.0, &mut rng);
    let excess = convex_excess(&m, &x)?;
    let std = rng.gen_range(0.1..3.0);
    let fm = fan_in_module(&mut rng, cfg)?;
    let shape = random_shape(&mut rng, cfg.channels_in);
    let fusion = fusion_range(&fm, &Tensor::<f64>::randn(&shape, std, &mut rng))?;

    let gate = *GATES.choose(&mut rng).unwrap();
    let reach_fusion = *FUSIONS.choose(&mut rng).unwrap();
    let cfg = loop {
        let cfg = random_config(&mut rng, 12).with_modes(gate, reach_fusion);
        if cfg.validate().is_ok() {
            break cfg;
        }
    };
    let m = GsfModule::<f64>::random(cfg, rng.gen_range(0.05..1.0), &mut rng)?;
    let mut shape = random_shape(&mut rng, cfg.channels_in);
    shape[2] = rng.gen_range(1..=8);
    let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
    let t0 = rng.gen_range(0..shape[2]);
    let reach = temporal_reach(&m, &x, t0, &mut rng)?;

    let fusion_mode = *FUSIONS.choose(&mut rng).unwrap();
    let cfg = random_learned_config(&mut rng, 12, fusion_mode);
    let m = fan_in_module(&mut rng, cfg)?;
    let mut shape = random_shape(&mut rng, cfg.processed_channels());
    shape[1] = cfg.processed_channels();
    let std = rng.gen_range(0.1..3.0);
    let gates = gate_range(&m, &Tensor::<f64>::randn(&shape, std, &mut rng))?;

    Ok(StructuralCase {
        passthrough_intact: intact,
        convex_excess: excess,
        reach,
        gate,
        fusion: reach_fusion,
        gate_range: gates,
        fusion_range: fusion,
    })
}

/// Structural invariants over `cases` seeded draws; also returns the
/// largest reach seen per mode pair.
pub fn structural_suite(cases: usize, seed: u64) -> Result<(Vec<SuiteResult>, ReachTable)> {
    let mut broken = 0;
    let mut excess = 0.0f64;
    let mut reach: ReachTable = [[0; 2]; 2];
    let mut over_bound = 0;
    let mut gates = (f64::INFINITY, f64::NEG_INFINITY);
    let mut weights = (f64::INFINITY, f64::NEG_INFINITY);
    let mut case_rng = seeded(seed);
    for _ in 0..cases {
        let StructuralCase {
            passthrough_intact: intact,
            convex_excess: e,
            reach: r,
            gate,
            fusion,
            gate_range: g,
            fusion_range: w,
        } = structural_case(case_rng.gen())?;
        broken += usize::from(!intact);
        excess = excess.max(e);
        let cell = &mut reach[usize::from(gate == GateMode::Learned)][usize::from(fusion == FusionMode::Learned)];
        *cell = (*cell).max(r);
        over_bound += usize::from(r > reach_bound(gate, fusion));
        gates = (gates.0.min(g.0), gates.1.max(g.1));
        weights = (weights.0.min(w.0), weights.1.max(w.1));
    }
    let results = vec![
        SuiteResult {
            name: "passthrough_bit_exact",
            cases,
            passed: broken == 0,
            detail: format!("{broken} cases altered pass-through channels"),
        },
        SuiteResult {
            name: "fusion_convex_bound",
            cases,
            passed: excess <= CONVEX_SLACK,
            detail: format!("max relative excess {excess:.3e} (slack {CONVEX_SLACK:.0e})"),
        },
        SuiteResult {
            name: "temporal_reach",
            cases,
            passed: over_bound == 0,
            detail: format!("max reach {} ({over_bound} over the mode bound)", reach_text(&reach)),
        },
        SuiteResult {
            name: "gate_range",
            cases,
            passed: gates.0 > -1.0 && gates.1 < 1.0,
            detail: format!("gates within [{:.6}, {:.6}]", gates.0, gates.1),
        },
        SuiteResult {
            name: "fusion_weight_range",
            cases,
            passed: weights.0 > 0.0 && weights.1 < 1.0,
            detail: format!("weights within [{:.6}, {:.6}]", weights.0, weights.1),
        },
    ];
    Ok((results, reach))
}

/// Rounding allowance for the convex-combination check.
pub const CONVEX_SLACK: f64 = 1e-12;

/// `gate/fusion=reach` for the four mode pairs.
pub fn reach_text(reach: &ReachTable) -> String {
    let name = |learned: bool| if learned { "learned" } else { "fixed" };
    let fusion = |learned: bool| if learned { "learned" } else { "sum" };
    let mut parts = Vec::new();
    for g in [true, false] {
        for f in [true, false] {
            parts.push(format!(
                "{}/{}={}",
                name(g),
                fusion(f),
                reach[usize::from(g)][usize::from(f)]
            ));
        }
    }
    parts.join(" ")
}

/// Every suite at its standard size.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = vec![
        conv2d_suite(200, seed)?,
        conv3d_suite(200, seed.wrapping_add(1))?,
        param_formula_suite()?,
    ];
    out.extend(ablation_suite(100, seed.wrapping_add(2))?);
    out.push(forward_oracle_suite(100, seed.wrapping_add(3))?);
    out.push(gradient_suite(20, seed.wrapping_add(4))?);
    out.extend(structural_suite(500, seed.wrapping_add(5))?.0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(conv2d_suite(10, 1).unwrap().passed);
        assert!(conv3d_suite(10, 2).unwrap().passed);
        assert!(param_formula_suite().unwrap().passed);
        for r in ablation_suite(10, 3).unwrap() {
            assert!(r.passed, "{}", r.line());
        }
        let r = forward_oracle_suite(10, 4).unwrap();
        assert!(r.passed, "{}", r.line());
        let r = gradient_suite(4, 5).unwrap();
        assert!(r.passed, "{}", r.line());
        for r in structural_suite(20, 6).unwrap().0 {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn reach_bounds_per_mode() {
        assert_eq!(reach_bound(GateMode::Learned, FusionMode::Learned), 3);
        assert_eq!(reach_bound(GateMode::Learned, FusionMode::Sum), 2);
        assert_eq!(reach_bound(GateMode::Negative, FusionMode::Learned), 2);
        assert_eq!(reach_bound(GateMode::Zero, FusionMode::Sum), 1);
    }

    #[test]
    #[ignore = "full-size run; the acceptance suite covers it"]
    fn full_run_passes() {
        for r in run_all(0).unwrap() {
            println!("{}", r.line());
            assert!(r.passed);
        }
    }

    #[test]
    fn result_line_is_tab_separated() {
        let r = param_formula_suite().unwrap();
        assert!(r.line().starts_with("param_formula\tPASS\t128\t"));
    }
}
