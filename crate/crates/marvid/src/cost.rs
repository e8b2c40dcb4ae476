//! Analytic cost model for the asymmetric design: multiply-accumulates per
//! forward pass and a peak-memory estimate for four deployment variants of
//! the same two networks, with a configurable byte budget standing in for
//! device memory. Wall-clock numbers are out of scope; orderings are the
//! contract.

use crate::attention::{attn_layer_macs, BaseAttention};
use crate::error::{Error, Result};
use crate::generator::DmConfig;
use crate::planner::MarConfig;

/// Default analytic memory budget. Sized so every variant of the toy config
/// fits at 5 frames while the symmetric variant blows past it at 13.
pub const DEFAULT_MEM_BUDGET_BYTES: u64 = 16 << 20;

/// Residual-stream working set per token during one layer (input, norms,
/// q/k/v, attention output, MLP hidden), rounded up to a flat factor.
const ACT_BUFFERS: u64 = 8;

/// One model's share of a deployment variant, batch 1, f32.
#[derive(Debug, Clone, Copy)]
pub struct ModelCost {
    pub attn_macs: u64,
    pub mlp_macs: u64,
    /// Embeddings, heads, modulation and pooling projections.
    pub other_macs: u64,
    pub params: u64,
    /// Largest attention matrix materialized at once, in floats.
    pub score_floats: u64,
    /// Sequence length times model dim, in floats.
    pub token_floats: u64,
}

impl ModelCost {
    pub fn total_macs(&self) -> u64 {
        self.attn_macs + self.mlp_macs + self.other_macs
    }

    fn transient_floats(&self) -> u64 {
        self.score_floats + ACT_BUFFERS * self.token_floats
    }
}

/// One row of the ablation table: where each network runs and what it costs.
#[derive(Debug, Clone)]
pub struct CostRow {
    pub name: &'static str,
    /// Patch grid the planner consumes (per frame).
    pub planner_grid: (usize, usize),
    pub dm_attention: BaseAttention,
    pub planner: ModelCost,
    pub generator: ModelCost,
    pub budget_bytes: u64,
}

impl CostRow {
    pub fn total_macs(&self) -> u64 {
        self.planner.total_macs() + self.generator.total_macs()
    }

    /// Inference footprint: both parameter sets resident, plus the larger of
    /// the two models' transient working sets (they run one after the other).
    pub fn mem_bytes(&self) -> u64 {
        let params = self.planner.params + self.generator.params;
        let transient = self
            .planner
            .transient_floats()
            .max(self.generator.transient_floats());
        4 * (params + transient)
    }

    pub fn within_budget(&self) -> bool {
        self.mem_bytes() <= self.budget_bytes
    }
}

/// Planner stack over `frames` of a rows x cols grid with row separators.
/// Attention is always spatio-temporal; the MLP is gated (three projections).
pub fn planner_cost(
    cfg: &MarConfig,
    frames: usize,
    rows: usize,
    cols: usize,
    params: u64,
) -> Result<ModelCost> {
    if frames == 0 || rows == 0 || cols == 0 {
        return Err(Error::config("planner_cost needs positive dims"));
    }
    let content = (frames * rows * cols) as u64;
    let t = content + (frames * rows) as u64;
    let d = cfg.hidden as u64;
    let depth = cfg.depth as u64;
    let pairs = t * t;
    let attn = depth * attn_layer_macs(t as usize, cfg.hidden, pairs as usize);
    let mlp = depth * 3 * t * d * cfg.mlp as u64;
    let other = content * (cfg.c_low as u64 + cfg.c_cond as u64) * d;
    Ok(ModelCost {
        attn_macs: attn,
        mlp_macs: mlp,
        other_macs: other,
        params,
        score_floats: cfg.heads as u64 * t * t,
        token_floats: t * d,
    })
}

/// Denoiser stack: per-frame spatial attention, per-frame cross-attention to
/// `n_low` conditioning tokens, plain MLP, and a temporal axis whose pattern
/// is the variant under study.
pub fn dm_cost(
    cfg: &DmConfig,
    frames: usize,
    rows: usize,
    cols: usize,
    n_low: usize,
    attention: BaseAttention,
    params: u64,
) -> Result<ModelCost> {
    if frames == 0 || rows == 0 || cols == 0 || n_low == 0 {
        return Err(Error::config("dm_cost needs positive dims"));
    }
    let k = frames as u64;
    let n = (rows * cols) as u64;
    let t = k * n;
    let d = cfg.hidden as u64;
    let h = cfg.heads as u64;
    let cc = cfg.c_cond as u64;
    let nl = n_low as u64;
    let depth = cfg.depth as u64;

    let spatial = 4 * t * d * d + 2 * k * n * n * d;
    let spatial_score = k * h * n * n;
    let (temporal, temporal_score) = match attention {
        BaseAttention::Temporal => (4 * t * d * d + 2 * n * k * k * d, n * h * k * k),
        BaseAttention::SpatioTemporal => (4 * t * d * d + 2 * t * t * d, h * t * t),
        BaseAttention::FrameLocal => {
            return Err(Error::config("dm_cost: frame-local temporal axis is not a variant"))
        }
    };
    let cross = 2 * t * d * d + 2 * k * nl * cc * d + 2 * k * n * nl * d;
    let cross_score = k * h * n * nl;

    let attn = depth * (spatial + cross + temporal);
    let mlp = depth * 2 * t * d * cfg.mlp as u64;
    let mods = depth * (3 * d * d + k * 3 * d * d);
    let io = 2 * t * cfg.c_high as u64 * d
        + cfg.t_dim as u64 * d
        + d * d
        + k * (nl * cc + cc * d);
    Ok(ModelCost {
        attn_macs: attn,
        mlp_macs: mlp,
        other_macs: mods + io,
        params,
        score_floats: spatial_score.max(temporal_score).max(cross_score),
        token_floats: t * d,
    })
}

/// The four-row table mirroring the efficiency ablation: the same planner
/// and denoiser weights deployed symmetrically or asymmetrically in
/// resolution (where the planner runs) and attention (the denoiser's
/// temporal axis).
pub fn cost_table(
    mar: &MarConfig,
    dm: &DmConfig,
    frames: usize,
    high: (usize, usize),
    low: (usize, usize),
    budget_bytes: u64,
) -> Result<Vec<CostRow>> {
    let mut f = crate::nn::ParamFactory::new(0);
    let mar_params = crate::planner::Planner::new(mar.clone(), &mut f)?.param_count() as u64;
    let mut f = crate::nn::ParamFactory::new(0);
    let dm_params = crate::generator::Dm::new(dm.clone(), &mut f)?.param_count() as u64;
    let n_low = low.0 * low.1;

    let variants: [(&'static str, (usize, usize), BaseAttention); 4] = [
        ("symmetric", high, BaseAttention::SpatioTemporal),
        ("asym-resolution", low, BaseAttention::SpatioTemporal),
        ("asym-attention", high, BaseAttention::Temporal),
        ("asym-both", low, BaseAttention::Temporal),
    ];
    variants
        .into_iter()
        .map(|(name, grid, kind)| {
            Ok(CostRow {
                name,
                planner_grid: grid,
                dm_attention: kind,
                planner: planner_cost(mar, frames, grid.0, grid.1, mar_params)?,
                generator: dm_cost(dm, frames, high.0, high.1, n_low, kind, dm_params)?,
                budget_bytes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_table(frames: usize) -> Vec<CostRow> {
        cost_table(
            &MarConfig::default(),
            &DmConfig::default(),
            frames,
            (8, 8),
            (2, 2),
            DEFAULT_MEM_BUDGET_BYTES,
        )
        .unwrap()
    }

    #[test]
    fn ordering_matches_the_ablation_table() {
        let rows = default_table(5);
        let by_name = |n: &str| rows.iter().find(|r| r.name == n).unwrap().total_macs();
        let sym = by_name("symmetric");
        let res = by_name("asym-resolution");
        let att = by_name("asym-attention");
        let both = by_name("asym-both");
        assert!(both < res, "{both} vs {res}");
        assert!(res < sym, "{res} vs {sym}");
        assert!(both < att && att < sym, "{both} vs {att} vs {sym}");
    }

    #[test]
    fn temporal_axis_is_cheaper_whenever_the_grid_is_nontrivial() {
        let dm = DmConfig::default();
        let t = dm_cost(&dm, 5, 8, 8, 4, BaseAttention::Temporal, 0).unwrap();
        let s = dm_cost(&dm, 5, 8, 8, 4, BaseAttention::SpatioTemporal, 0).unwrap();
        assert!(t.attn_macs < s.attn_macs);
        let t1 = dm_cost(&dm, 5, 1, 1, 4, BaseAttention::Temporal, 0).unwrap();
        let s1 = dm_cost(&dm, 5, 1, 1, 4, BaseAttention::SpatioTemporal, 0).unwrap();
        assert_eq!(t1.attn_macs, s1.attn_macs, "one token per frame: kinds coincide");
    }

    #[test]
    fn long_symmetric_sequences_blow_the_default_budget() {
        for row in default_table(5) {
            assert!(
                row.within_budget(),
                "{} should fit at 5 frames: {} bytes",
                row.name,
                row.mem_bytes()
            );
        }
        let rows = default_table(13);
        let sym = rows.iter().find(|r| r.name == "symmetric").unwrap();
        let both = rows.iter().find(|r| r.name == "asym-both").unwrap();
        assert!(
            !sym.within_budget(),
            "13-frame symmetric must exceed the budget: {} bytes",
            sym.mem_bytes()
        );
        assert!(
            both.within_budget(),
            "13-frame asym-both must fit: {} bytes",
            both.mem_bytes()
        );
    }

    #[test]
    fn memory_grows_with_frames() {
        let at = |k: usize| {
            default_table(k)
                .iter()
                .map(|r| r.mem_bytes())
                .collect::<Vec<_>>()
        };
        let short = at(5);
        let long = at(13);
        for (s, l) in short.iter().zip(&long) {
            assert!(s < l);
        }
    }

    #[test]
    fn frame_local_axis_is_rejected() {
        let dm = DmConfig::default();
        assert!(dm_cost(&dm, 5, 8, 8, 4, BaseAttention::FrameLocal, 0).is_err());
    }
}
