use hitpix_core::EntropyMode;
use hitpix_nn::pixelgen::PixelConfig;
use serde::{Deserialize, Serialize};

use crate::PipelineError;

/// Everything a run depends on besides its seeds and prober.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub k: usize,
    pub budget: usize,
    /// Candidates generated between feedback passes; `None` scales with the
    /// budget as `max(budget / 10, 500)`.
    pub feedback_cadence: Option<usize>,
    pub fine_tune_epochs: usize,
    pub train_epochs: usize,
    pub batch: usize,
    pub vae_epochs: usize,
    pub latent_dim: usize,
    pub stitch_fanout: usize,
    /// Train on stitched 16×16 pairs (otherwise on single 8×16 images).
    pub stitch: bool,
    /// Fine-tune on each round's actives.
    pub feedback: bool,
    /// Stage-1 budget share for two-stage runs.
    pub p_pct: Option<f64>,
    pub seed: u64,
    pub entropy_mode: EntropyMode,
    /// Replay images per feedback image; 0 feeds back actives only.
    pub replay_ratio: f64,
    /// Most feedback images per subclass per fine-tune pass.
    pub feedback_cap: usize,
    /// Feed every subclass all of a round's actives instead of only its own.
    pub cross_route: bool,
    pub alias_probes: usize,
    pub alias_check_len: u8,
    /// Addresses kept per aliased prefix in the exported dataset.
    pub alias_retain: usize,
    /// Expansion levels for the space-tree baseline.
    pub baseline_expand: usize,
    /// Train single-image corpora for `stitch_fanout` times the epochs, so
    /// they take as many optimizer steps as the stitched corpus would.
    pub step_parity: bool,
    pub pixel: PixelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 6,
            budget: 20_000,
            feedback_cadence: None,
            fine_tune_epochs: 10,
            train_epochs: 40,
            batch: 64,
            vae_epochs: 200,
            latent_dim: 16,
            stitch_fanout: 5,
            stitch: true,
            feedback: true,
            p_pct: None,
            seed: 0,
            entropy_mode: EntropyMode::Standard,
            replay_ratio: 1.0,
            feedback_cap: 128,
            cross_route: false,
            alias_probes: 16,
            alias_check_len: 96,
            alias_retain: 10,
            baseline_expand: 3,
            step_parity: false,
            pixel: PixelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.budget == 0 {
            return bad("budget must be positive");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.stitch_fanout == 0 || self.batch == 0 {
            return bad("stitch_fanout and batch must be positive");
        }
        if self.feedback_cadence == Some(0) {
            return bad("feedback_cadence must be positive");
        }
        if let Some(p) = self.p_pct {
            if !(p > 0.0 && p < 100.0) {
                return bad("p_pct must lie strictly between 0 and 100");
            }
        }
        if self.replay_ratio < 0.0 || !self.replay_ratio.is_finite() {
            return bad("replay_ratio must be a non-negative number");
        }
        Ok(())
    }

    pub fn cadence(&self) -> usize {
        self.feedback_cadence.unwrap_or((self.budget / 10).max(500))
    }
}

/// Independent stream seeds from the master seed.
pub(crate) fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) mod stream {
    pub const VAE: u64 = 1;
    pub const KMEANS: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const FINE_TUNE: u64 = 6;
    pub const ALIAS: u64 = 7;
}
