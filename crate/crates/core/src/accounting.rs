//! Parameter and multiply-accumulate (MAC) counts.
//!
//! Counting convention, shared with the tape's instrumentation: a
//! convolution or linear layer costs one MAC per kernel tap per output,
//! element-wise add, subtract and multiply cost one per output element and a
//! convex blend costs three. Activations, per-channel affine maps, pooling,
//! scaling by a constant and data movement are free.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{config_err, GsfError, Result};
use crate::gsf::{self, FusionMode, GateMode, GsfConfig, GsfModule};
use crate::nets::{Block, VideoClassifier};
use crate::tensor::Element;

pub const RESNET50_MANIFEST: &str = include_str!("../manifests/resnet50.manifest");
pub const BNINCEPTION_MANIFEST: &str = include_str!("../manifests/bninception.manifest");

/// Term-by-term MACs of one learned-gate, learned-fusion GSF on a single
/// clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GsfFlops {
    pub gate_conv: u64,
    pub gate_multiply: u64,
    pub residual: u64,
    pub fusion_conv: u64,
    pub fusion_combine: u64,
}

impl GsfFlops {
    pub fn total(&self) -> u64 {
        self.gate_conv + self.gate_multiply + self.residual + self.fusion_conv + self.fusion_combine
    }

    /// The `H·W·T·27·C_g` gating-convolution term.
    pub fn dominant(&self) -> u64 {
        self.gate_conv
    }
}

pub fn gsf_flops(cg: usize, t: usize, h: usize, w: usize) -> GsfFlops {
    let (cg, t, hw) = (cg as u64, t as u64, (h * w) as u64);
    GsfFlops {
        gate_conv: hw * t * 27 * cg,
        gate_multiply: hw * t * cg,
        residual: hw * t * cg,
        fusion_conv: cg * t * 18,
        fusion_combine: 3 * hw * t * cg,
    }
}

/// MACs of one GSF on a single clip for any gate and fusion mode.
pub fn gsf_macs(cg: usize, t: usize, h: usize, w: usize, gate: GateMode, fusion: FusionMode) -> u64 {
    let f = gsf_flops(cg, t, h, w);
    let gate_cost = if gate == GateMode::Learned {
        f.gate_conv + f.gate_multiply
    } else {
        0
    };
    let fusion_cost = match fusion {
        FusionMode::Learned => f.fusion_conv + f.fusion_combine,
        FusionMode::Sum => f.residual,
    };
    gate_cost + f.residual + fusion_cost
}

fn module_macs<E: Element>(m: &GsfModule<E>, t: usize, h: usize, w: usize) -> u64 {
    let c = m.config();
    gsf_macs(c.processed_channels(), t, h, w, c.gate_mode, c.fusion_mode)
}

fn conv_macs(frames: usize, cin: usize, cout: usize, k: usize, ho: usize, wo: usize) -> u64 {
    (frames * cout * ho * wo * cin * k * k) as u64
}

/// Analytic inference MACs of `model` on `clips` clips of `h×w` frames.
pub fn model_macs<E: Element>(model: &VideoClassifier<E>, clips: usize, h: usize, w: usize) -> u64 {
    let t = model.frames;
    let n = clips * t;
    let (mut h, mut w) = (h, w);
    let mut total = 0u64;
    for block in &model.backbone.blocks {
        match block {
            Block::Plain(b) => {
                let (ho, wo) = (b.conv.out_extent(h), b.conv.out_extent(w));
                total += conv_macs(n, b.conv.c_in(), b.conv.c_out(), b.conv.kernel_size(), ho, wo);
                (h, w) = (ho, wo);
            }
            Block::Inception(b) => {
                for conv in [&b.a, &b.b_reduce, &b.b_conv] {
                    total += conv_macs(n, conv.c_in(), conv.c_out(), conv.kernel_size(), h, w);
                }
                if let Some(g) = &b.gsf {
                    total += clips as u64 * module_macs(g, t, h, w);
                }
            }
            Block::Bottleneck(b) => {
                for conv in [&b.reduce, &b.conv, &b.expand] {
                    total += conv_macs(n, conv.c_in(), conv.c_out(), conv.kernel_size(), h, w);
                }
                if let Some((_, g)) = &b.gsf {
                    total += clips as u64 * module_macs(g, t, h, w);
                }
                total += (n * b.expand.c_out() * h * w) as u64;
            }
        }
    }
    total + (n * model.num_classes * model.backbone.out_channels()) as u64
}

/// Analytic count of trainable scalars in `model`, from layer shapes.
pub fn model_params<E: Element>(model: &VideoClassifier<E>) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
    let gsf_params = |m: &GsfModule<E>| {
        let c = m.config();
        let cg = c.processed_channels();
        let norm = if c.pre_gate_norm && c.gate_mode == GateMode::Learned {
            2 * cg
        } else {
            0
        };
        gsf::param_count(cg, c.gate_mode, c.fusion_mode) + norm
    };
    let mut total = 0;
    for block in &model.backbone.blocks {
        total += match block {
            Block::Plain(b) => conv(b.conv.c_in(), b.conv.c_out(), b.conv.kernel_size()),
            Block::Inception(b) => {
                [&b.a, &b.b_reduce, &b.b_conv]
                    .iter()
                    .map(|c| conv(c.c_in(), c.c_out(), c.kernel_size()))
                    .sum::<usize>()
                    + b.gsf.as_ref().map_or(0, gsf_params)
            }
            Block::Bottleneck(b) => {
                [&b.reduce, &b.conv, &b.expand]
                    .iter()
                    .map(|c| conv(c.c_in(), c.c_out(), c.kernel_size()))
                    .sum::<usize>()
                    + b.gsf.as_ref().map_or(0, |(_, m)| gsf_params(m))
            }
        };
    }
    let feat = model.backbone.out_channels();
    total + feat * model.num_classes + model.num_classes
}

/// GSF sites of a toy model, with the feature geometry each one sees.
pub fn model_sites<E: Element>(model: &VideoClassifier<E>, h: usize, w: usize) -> Vec<Site> {
    let (mut h, mut w) = (h, w);
    let mut sites = Vec::new();
    for block in &model.backbone.blocks {
        match block {
            Block::Plain(b) => (h, w) = (b.conv.out_extent(h), b.conv.out_extent(w)),
            Block::Inception(b) => {
                if let Some(g) = &b.gsf {
                    sites.push(Site::of(g, model.frames, h, w));
                }
            }
            Block::Bottleneck(b) => {
                if let Some((_, g)) = &b.gsf {
                    sites.push(Site::of(g, model.frames, h, w));
                }
            }
        }
    }
    sites
}

/// One insertion point: `channels` at that depth, fraction processed, and
/// the clip geometry there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Site {
    pub channels: usize,
    pub fraction: f64,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Site {
    fn of<E: Element>(m: &GsfModule<E>, t: usize, h: usize, w: usize) -> Site {
        Site {
            channels: m.config().channels_in,
            fraction: m.config().fraction,
            t,
            h,
            w,
        }
    }

    pub fn processed(&self) -> usize {
        gsf::processed_channels(self.channels, self.fraction)
    }
}

/// Backbone description used only for accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneManifest {
    pub name: String,
    pub baseline_params: f64,
    pub baseline_flops: f64,
    pub sites: Vec<Site>,
}

impl BackboneManifest {
    /// Parses header lines `key=value` (`name`, `baseline_params`,
    /// `baseline_flops`) and site lines `C fraction T H W`. `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = String::from("manifest");
        let mut params = None;
        let mut flops = None;
        let mut sites = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| GsfError::Data(format!("manifest line {}: {what}", n + 1));
            if let Some((k, v)) = line.split_once('=') {
                let v = v.trim();
                match k.trim() {
                    "name" => name = v.to_string(),
                    "baseline_params" => params = Some(v.parse::<f64>().map_err(|_| bad("bad baseline_params"))?),
                    "baseline_flops" => flops = Some(v.parse::<f64>().map_err(|_| bad("bad baseline_flops"))?),
                    other => return Err(bad(&format!("unknown header `{other}`"))),
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(bad("expected `C fraction T H W`"));
            }
            let count = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("`{s}` is not a count")));
            let site = Site {
                channels: count(fields[0])?,
                fraction: fields[1].parse().map_err(|_| bad("bad fraction"))?,
                t: count(fields[2])?,
                h: count(fields[3])?,
                w: count(fields[4])?,
            };
            if site.channels == 0 || site.t == 0 || site.h == 0 || site.w == 0 {
                return Err(bad("counts must be positive"));
            }
            if !(site.fraction > 0.0 && site.fraction <= 1.0) || site.processed() < 2 {
                return Err(bad("fraction leaves fewer than 2 processed channels"));
            }
            sites.push(site);
        }
        let params = params.ok_or_else(|| GsfError::Data("manifest has no baseline_params".into()))?;
        let flops = flops.ok_or_else(|| GsfError::Data("manifest has no baseline_flops".into()))?;
        if !(params > 0.0 && flops > 0.0) {
            return Err(GsfError::Data("baselines must be positive".into()));
        }
        Ok(BackboneManifest {
            name,
            baseline_params: params,
            baseline_flops: flops,
            sites,
        })
    }

    /// Reads a manifest file; `resnet50` and `bninception` (with or without
    /// a `.manifest` suffix) name the built-in manifests when no such file
    /// exists.
    pub fn load(path: &Path) -> Result<Self> {
        if path.exists() {
            return Self::parse(&std::fs::read_to_string(path)?);
        }
        let stem = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        match stem.trim_end_matches(".manifest") {
            "resnet50" => Self::parse(RESNET50_MANIFEST),
            "bninception" => Self::parse(BNINCEPTION_MANIFEST),
            _ => Err(GsfError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("manifest {} not found", path.display()),
            ))),
        }
    }

    pub fn resnet50() -> Self {
        Self::parse(RESNET50_MANIFEST).expect("built-in manifest")
    }

    pub fn bninception() -> Self {
        Self::parse(BNINCEPTION_MANIFEST).expect("built-in manifest")
    }

    /// The same manifest with every site's fraction replaced.
    pub fn with_fraction(&self, fraction: f64) -> Self {
        let mut m = self.clone();
        for s in &mut m.sites {
            s.fraction = fraction;
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiteCost {
    pub site: Site,
    pub processed: usize,
    /// Gating and fusion kernel scalars.
    pub params: usize,
    /// Pre-gate normalization scalars, reported apart from `params`.
    pub norm_params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub name: String,
    pub baseline_params: f64,
    pub baseline_macs: f64,
    pub sites: Vec<SiteCost>,
    pub param_delta: usize,
    pub norm_param_delta: usize,
    pub mac_delta: u64,
}

impl CostReport {
    pub fn param_overhead_pct(&self) -> f64 {
        100.0 * self.param_delta as f64 / self.baseline_params
    }

    pub fn mac_overhead_pct(&self) -> f64 {
        100.0 * self.mac_delta as f64 / self.baseline_macs
    }

    /// MAC delta, or FLOPs counting multiply and add separately.
    pub fn flop_delta(&self, count_mul_and_add: bool) -> u64 {
        if count_mul_and_add {
            2 * self.mac_delta
        } else {
            self.mac_delta
        }
    }

    /// Tab-separated rows: one per site, then a total.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("site\tC\tC_g\tT\tH\tW\tparams\tnorm_params\tmacs\n");
        for (i, c) in self.sites.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.site.channels, c.processed, c.site.t, c.site.h, c.site.w, c.params, c.norm_params, c.macs
            );
        }
        let _ = writeln!(
            s,
            "total\t\t\t\t\t\t{}\t{}\t{}",
            self.param_delta, self.norm_param_delta, self.mac_delta
        );
        let _ = writeln!(s, "baseline_params\t{}", self.baseline_params);
        let _ = writeln!(s, "baseline_macs\t{}", self.baseline_macs);
        let _ = writeln!(s, "param_overhead_pct\t{:.4}", self.param_overhead_pct());
        let _ = writeln!(s, "mac_overhead_pct\t{:.4}", self.mac_overhead_pct());
        s
    }

    pub fn to_pretty(&self) -> String {
        let mut s = format!("{}\n", self.name);
        let _ = writeln!(
            s,
            "{:>4} {:>6} {:>6} {:>3} {:>4} {:>4} {:>10} {:>8} {:>14}",
            "site", "C", "C_g", "T", "H", "W", "params", "norm", "MACs"
        );
        for (i, c) in self.sites.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:>4} {:>6} {:>6} {:>3} {:>4} {:>4} {:>10} {:>8} {:>14}",
                i, c.site.channels, c.processed, c.site.t, c.site.h, c.site.w, c.params, c.norm_params, c.macs
            );
        }
        let _ = writeln!(
            s,
            "total params +{} ({:.3}% of {:.2}M), norm +{}",
            self.param_delta,
            self.param_overhead_pct(),
            self.baseline_params / 1e6,
            self.norm_param_delta
        );
        let _ = writeln!(
            s,
            "total MACs   +{} ({:.3}% of {:.2}G)",
            self.mac_delta,
            self.mac_overhead_pct(),
            self.baseline_macs / 1e9
        );
        s
    }
}

/// Cost of placing one GSF with the given modes at every manifest site.
pub fn report_with_modes(
    manifest: &BackboneManifest,
    gate: GateMode,
    fusion: FusionMode,
    pre_gate_norm: bool,
) -> Result<CostReport> {
    if manifest.sites.is_empty() {
        return config_err(format!("manifest `{}` has no sites", manifest.name));
    }
    for (i, s) in manifest.sites.iter().enumerate() {
        let cfg = GsfConfig {
            channels_in: s.channels,
            fraction: s.fraction,
            gate_mode: gate,
            fusion_mode: fusion,
            pre_gate_norm,
        };
        if let Err(GsfError::Config(msg)) = cfg.validate() {
            return config_err(format!("manifest `{}` site {i}: {msg}", manifest.name));
        }
    }
    let sites: Vec<SiteCost> = manifest
        .sites
        .iter()
        .map(|s| {
            let cg = s.processed();
            SiteCost {
                site: *s,
                processed: cg,
                params: gsf::param_count(cg, gate, fusion),
                norm_params: if pre_gate_norm && gate == GateMode::Learned {
                    2 * cg
                } else {
                    0
                },
                macs: gsf_macs(cg, s.t, s.h, s.w, gate, fusion),
            }
        })
        .collect();
    Ok(CostReport {
        name: manifest.name.clone(),
        baseline_params: manifest.baseline_params,
        baseline_macs: manifest.baseline_flops,
        param_delta: sites.iter().map(|c| c.params).sum(),
        norm_param_delta: sites.iter().map(|c| c.norm_params).sum(),
        mac_delta: sites.iter().map(|c| c.macs).sum(),
        sites,
    })
}

/// Learned gates and fusion with pre-gate normalization.
pub fn report(manifest: &BackboneManifest) -> Result<CostReport> {
    report_with_modes(manifest, GateMode::Learned, FusionMode::Learned, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_range_fractions_are_config_errors() {
        for f in [0.0, -1.0, 1.5, 0.001] {
            let m = BackboneManifest::resnet50().with_fraction(f);
            assert!(matches!(report(&m), Err(GsfError::Config(_))), "{f}");
        }
    }

    #[test]
    fn dominant_term_examples() {
        assert_eq!(gsf_flops(64, 8, 56, 56).dominant(), 43_352_064);
        assert_eq!(gsf_flops(1, 1, 1, 1).dominant(), 27);
    }

    #[test]
    fn full_formula_matches_learned_modes() {
        let f = gsf_flops(16, 4, 5, 5);
        assert_eq!(f.total(), gsf_macs(16, 4, 5, 5, GateMode::Learned, FusionMode::Learned));
        assert_eq!(f.total(), 32 * 16 * 4 * 25 + 18 * 16 * 4);
    }

    #[test]
    fn empty_manifest_is_config_error() {
        let m = BackboneManifest::parse("baseline_params=1\nbaseline_flops=1\n").unwrap();
        assert!(matches!(report(&m), Err(GsfError::Config(_))));
    }

    #[test]
    fn malformed_manifest_lines_are_data_errors() {
        assert!(matches!(
            BackboneManifest::parse("baseline_params=1\nbaseline_flops=1\n8 0.5 8 7\n"),
            Err(GsfError::Data(_))
        ));
        assert!(matches!(
            BackboneManifest::parse("8 0.5 8 7 7\n"),
            Err(GsfError::Data(_))
        ));
    }

    #[test]
    fn builtin_manifests_have_expected_sites() {
        let r = BackboneManifest::resnet50();
        assert_eq!(r.sites.len(), 16);
        assert_eq!(r.sites.iter().map(Site::processed).sum::<usize>(), 3776);
        let b = BackboneManifest::bninception();
        assert_eq!(b.sites.len(), 10);
        assert_eq!(b.sites.iter().map(Site::processed).sum::<usize>(), 1856);
    }

    #[test]
    fn totals_are_site_sums() {
        let r = report(&BackboneManifest::resnet50()).unwrap();
        assert_eq!(r.param_delta, 27 * 3776 + 36 * 16);
        assert_eq!(r.mac_delta, r.sites.iter().map(|s| s.macs).sum::<u64>());
        assert_eq!(r.flop_delta(true), 2 * r.mac_delta);
    }
}
