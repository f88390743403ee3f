//! Token-map reports (`tcf-report/1` JSON), colored token overlays, and the
//! analytic complexity model behind the `bench` subcommand.
//!
//! The analytic attention counts use the same per-call formula as the
//! runtime counters, so `bench` and a real forward pass agree exactly.

use serde::Serialize;

use crate::backbone::TokenPyramid;
use crate::clustering::cluster_budget;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::mta::{MtaOutput, MtaVariant};
use crate::ppm::encode_rgb;
use crate::rng::SeededRng;
use crate::token_ops::TokenSet;

pub const REPORT_SCHEMA: &str = "tcf-report/1";

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Serialize)]
pub struct StageReport {
    pub stage: usize,
    pub token_count: usize,
    pub grid: Dims,
    /// Stage-1 pixel grid of token ids, row-major.
    pub pixel_map: Vec<usize>,
    /// Owned-pixel count per token.
    pub areas: Vec<usize>,
    /// Reciprocal of each token's area.
    pub densities: Vec<f32>,
}

#[derive(Debug, Serialize)]
pub struct CtmReport {
    pub index: usize,
    pub parts: usize,
    pub clusters: usize,
    pub dist_ops: u64,
}

#[derive(Debug, Serialize)]
pub struct MtaReport {
    pub variant: String,
    pub level_shapes: Vec<Vec<usize>>,
    pub kv_counts: Vec<usize>,
    pub attention_macs: u64,
}

#[derive(Debug, Serialize)]
pub struct TokenMapReport {
    pub schema: String,
    pub input: Dims,
    pub stem_grid: Dims,
    pub stages: Vec<StageReport>,
    pub ctm: Vec<CtmReport>,
    /// Attention MACs spent by the backbone forward pass.
    pub attention_macs: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mta: Option<MtaReport>,
}

pub fn build_report(
    pyramid: &TokenPyramid,
    config: &ModelConfig,
    input: Dims,
    mta: Option<(MtaVariant, &MtaOutput)>,
) -> TokenMapReport {
    let stages = pyramid
        .stages
        .iter()
        .enumerate()
        .map(|(s, tokens)| {
            let areas = tokens.pixel_areas();
            let densities = areas.iter().map(|&a| 1.0 / a as f32).collect();
            StageReport {
                stage: s + 1,
                token_count: tokens.len(),
                grid: Dims {
                    h: tokens.grid_h,
                    w: tokens.grid_w,
                },
                pixel_map: tokens.pixel_map.clone(),
                areas,
                densities,
            }
        })
        .collect();
    let ctm = pyramid
        .ctm_records
        .iter()
        .enumerate()
        .map(|(i, r)| CtmReport {
            index: i + 1,
            parts: config.ctm_parts[i],
            clusters: r.num_clusters(),
            dist_ops: r.dist_ops,
        })
        .collect();
    TokenMapReport {
        schema: REPORT_SCHEMA.to_string(),
        input,
        stem_grid: Dims {
            h: pyramid.stem_h,
            w: pyramid.stem_w,
        },
        stages,
        ctm,
        attention_macs: pyramid.attention_macs,
        mta: mta.map(|(variant, out)| MtaReport {
            variant: match variant {
                MtaVariant::Spatial => "sr".to_string(),
                MtaVariant::Clustering => "cr".to_string(),
            },
            level_shapes: out
                .pyramid
                .levels
                .iter()
                .map(|l| l.shape().to_vec())
                .collect(),
            kv_counts: out.kv_counts.clone(),
            attention_macs: out.attention_macs,
        }),
    }
}

pub fn report_json(report: &TokenMapReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Deterministic distinct colors per token id: each id draws candidates from
/// its own seeded stream until one is neither black nor already taken.
pub fn token_colors(count: usize) -> Vec<[u8; 3]> {
    let mut used = std::collections::HashSet::new();
    let mut colors = Vec::with_capacity(count);
    for id in 0..count {
        let mut rng = SeededRng::new(id as u64 ^ 0x9E37_79B9_7F4A_7C15);
        loop {
            let v = rng.next_u64();
            let rgb = [(v >> 16) as u8, (v >> 8) as u8, v as u8];
            if rgb != [0, 0, 0] && used.insert(rgb) {
                colors.push(rgb);
                break;
            }
        }
    }
    colors
}

/// Renders a token overlay: each stage-1 pixel takes its token's color, and
/// pixels whose 4-neighbourhood crosses a token boundary are painted black.
pub fn render_overlay(tokens: &TokenSet) -> Vec<u8> {
    let (h, w) = (tokens.map_h, tokens.map_w);
    let map = &tokens.pixel_map;
    let colors = token_colors(tokens.len());
    let mut rgb = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let t = map[y * w + x];
            let boundary = (y > 0 && map[(y - 1) * w + x] != t)
                || (y + 1 < h && map[(y + 1) * w + x] != t)
                || (x > 0 && map[y * w + x - 1] != t)
                || (x + 1 < w && map[y * w + x + 1] != t);
            let c = if boundary { [0, 0, 0] } else { colors[t] };
            rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    rgb
}

pub fn save_token_overlay(tokens: &TokenSet, path: &std::path::Path) -> Result<()> {
    let rgb = render_overlay(tokens);
    std::fs::write(path, encode_rgb(&rgb, tokens.map_w, tokens.map_h))?;
    Ok(())
}

/// Analytic complexity of one merge module's clustering pass: N tokens of
/// width C split into P balanced spatial parts (sizes differing by at most
/// one when P does not divide N).
pub fn clustering_dist_ops(tokens: usize, channels: usize, parts: usize) -> u64 {
    let q = (tokens / parts) as u64;
    let r = (tokens % parts) as u64;
    let c = channels as u64;
    (r * (q + 1) * (q + 1) + (parts as u64 - r) * q * q) * c
}

#[derive(Debug, Serialize)]
pub struct CtmBench {
    pub index: usize,
    pub tokens: usize,
    pub channels: usize,
    pub parts: usize,
    pub dist_ops_local: u64,
    pub dist_ops_global: u64,
    /// global / local
    pub ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub input: Dims,
    pub ctm: Vec<CtmBench>,
    pub total_local: u64,
    pub total_global: u64,
    /// Percent of clustering distance work removed by the part schedule.
    pub reduction_percent: f64,
    pub backbone_attention_macs: u64,
    pub mta_attention_macs_sr: u64,
    pub mta_attention_macs_cr: u64,
}

/// Per-stage token counts implied by the quarter-reduction schedule.
pub fn stage_token_counts(config: &ModelConfig, h: usize, w: usize) -> Vec<usize> {
    let mut counts = vec![(h / 4) * (w / 4)];
    for _ in 1..config.stages.len() {
        counts.push(cluster_budget(*counts.last().unwrap(), config.cluster_ratio));
    }
    counts
}

fn stage_grids(config: &ModelConfig, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut grids = vec![(h / 4, w / 4)];
    for _ in 1..config.stages.len() {
        let (gh, gw) = *grids.last().unwrap();
        grids.push(((gh / 2).max(1), (gw / 2).max(1)));
    }
    grids
}

/// Clustering cost and attention MACs for an input size, comparing the
/// configured part schedule against all-global clustering.
pub fn complexity_report(config: &ModelConfig, h: usize, w: usize) -> Result<BenchReport> {
    config.validate()?;
    let counts = stage_token_counts(config, h, w);
    let grids = stage_grids(config, h, w);

    let mut ctm = Vec::new();
    let mut total_local = 0u64;
    let mut total_global = 0u64;
    for (i, &parts) in config.ctm_parts.iter().enumerate() {
        let tokens = counts[i];
        let channels = config.stages[i].dim;
        let local = clustering_dist_ops(tokens, channels, parts);
        let global = clustering_dist_ops(tokens, channels, 1);
        total_local += local;
        total_global += global;
        ctm.push(CtmBench {
            index: i + 1,
            tokens,
            channels,
            parts,
            dist_ops_local: local,
            dist_ops_global: global,
            ratio: global as f64 / local as f64,
        });
    }

    let mut backbone = 0u64;
    for (s, st) in config.stages.iter().enumerate() {
        let (gh, gw) = grids[s];
        let kv = (gh / st.sr_ratio) * (gw / st.sr_ratio);
        backbone += st.blocks as u64 * 2 * (counts[s] as u64) * (kv as u64) * (st.dim as u64);
        if s + 1 < config.stages.len() {
            let next = &config.stages[s + 1];
            backbone += 2 * (counts[s + 1] as u64) * (counts[s] as u64) * (next.dim as u64);
        }
    }
    let d = config.mta_dim as u64;
    let f = *counts.last().unwrap() as u64;
    let mut mta_sr = 0u64;
    let mut mta_cr = 0u64;
    for s in 0..config.stages.len() - 1 {
        let st = &config.stages[s];
        let (gh, gw) = grids[s];
        let kv_sr = ((gh / st.sr_ratio) * (gw / st.sr_ratio)) as u64;
        mta_sr += 2 * counts[s] as u64 * kv_sr * d;
        mta_cr += 2 * counts[s] as u64 * f * d;
    }

    Ok(BenchReport {
        input: Dims { h, w },
        ctm,
        total_local,
        total_global,
        reduction_percent: 100.0 * (1.0 - total_local as f64 / total_global as f64),
        backbone_attention_macs: backbone,
        mta_attention_macs_sr: mta_sr,
        mta_attention_macs_cr: mta_cr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tokens_from_map(pixel_map: Vec<usize>, h: usize, w: usize, n: usize) -> TokenSet {
        TokenSet {
            features: Tensor::zeros(vec![n, 1]),
            importance: vec![0.0; n],
            pixel_map,
            map_h: h,
            map_w: w,
            grid_h: h,
            grid_w: w,
            stage: 0,
        }
    }

    #[test]
    fn colors_are_distinct_and_nonblack() {
        let colors = token_colors(4000);
        let unique: std::collections::HashSet<_> = colors.iter().collect();
        assert_eq!(unique.len(), 4000);
        assert!(!colors.contains(&[0, 0, 0]));
    }

    #[test]
    fn single_token_overlay_uniform() {
        let t = tokens_from_map(vec![0; 9], 3, 3, 1);
        let rgb = render_overlay(&t);
        let first = &rgb[..3];
        assert_ne!(first, &[0, 0, 0]);
        for px in rgb.chunks(3) {
            assert_eq!(px, first);
        }
    }

    #[test]
    fn one_token_per_pixel_is_all_boundary() {
        let t = tokens_from_map((0..9).collect(), 3, 3, 9);
        let rgb = render_overlay(&t);
        for px in rgb.chunks(3) {
            assert_eq!(px, &[0, 0, 0]);
        }
    }

    #[test]
    fn boundary_count_matches_scan_oracle() {
        // 4×4 grid split into 2×2 quadrants
        let map = vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3];
        let t = tokens_from_map(map.clone(), 4, 4, 4);
        let rgb = render_overlay(&t);
        let rendered_black = rgb.chunks(3).filter(|px| *px == [0, 0, 0]).count();
        let mut oracle = 0;
        for y in 0..4i32 {
            for x in 0..4i32 {
                let id = map[(y * 4 + x) as usize];
                let mut boundary = false;
                for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y + dy, x + dx);
                    if (0..4).contains(&ny)
                        && (0..4).contains(&nx)
                        && map[(ny * 4 + nx) as usize] != id
                    {
                        boundary = true;
                    }
                }
                if boundary {
                    oracle += 1;
                }
            }
        }
        assert_eq!(rendered_black, oracle);
        assert_eq!(oracle, 12); // all except the four corners
    }

    #[test]
    fn balanced_dist_ops_formula() {
        assert_eq!(clustering_dist_ops(1024, 64, 16), 4_194_304);
        assert_eq!(clustering_dist_ops(1024, 64, 1), 1024 * 1024 * 64);
        // unbalanced split: 10 tokens in 4 parts → sizes 3,3,2,2
        assert_eq!(clustering_dist_ops(10, 1, 4), 2 * 9 + 2 * 4);
    }

    #[test]
    fn bench_512_reduction() {
        let cfg = ModelConfig::tiny();
        let r = complexity_report(&cfg, 512, 512).unwrap();
        assert_eq!(r.ctm[0].tokens, 16384);
        assert!((r.ctm[0].ratio - 16.0).abs() < 1e-9);
        assert!(r.reduction_percent >= 80.0, "{}", r.reduction_percent);
    }

    #[test]
    fn stage_counts_follow_quarter_schedule() {
        let cfg = ModelConfig::tiny();
        assert_eq!(stage_token_counts(&cfg, 224, 224), vec![3136, 784, 196, 49]);
        assert_eq!(stage_token_counts(&cfg, 64, 64), vec![256, 64, 16, 4]);
    }
}
