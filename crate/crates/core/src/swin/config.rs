use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwinConfig {
    /// Side of the square input image.
    pub input_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    /// Channel width of the first stage; doubled by every patch merge.
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Learned relative position bias inside each window.
    pub rel_pos_bias: bool,
    pub norm_eps: f64,
}

/// Named model size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Tiny => "tiny",
            Preset::Paper => "paper",
        })
    }
}

impl SwinConfig {
    /// CPU-scale model on native 32x32 inputs (about 77k parameters).
    pub fn tiny() -> Self {
        Self {
            input_size: 32,
            patch_size: 2,
            in_channels: 3,
            embed_dim: 24,
            depths: vec![2, 2],
            heads: vec![2, 2],
            window_size: 4,
            mlp_ratio: 4,
            num_classes: 2,
            rel_pos_bias: true,
            norm_eps: 1e-5,
        }
    }

    /// Swin-T layout on 224x224 inputs.
    pub fn paper() -> Self {
        Self {
            input_size: 224,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 96,
            depths: vec![2, 2, 6, 2],
            heads: vec![3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4,
            num_classes: 2,
            rel_pos_bias: true,
            norm_eps: 1e-5,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Tiny => Self::tiny(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_classes != 2 {
            return fail(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if [self.input_size, self.patch_size, self.in_channels, self.embed_dim, self.window_size, self.mlp_ratio]
            .contains(&0)
        {
            return fail("sizes must be positive".into());
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return fail(format!("{} depths vs {} head counts", self.depths.len(), self.heads.len()));
        }
        if self.depths.contains(&0) || self.heads.contains(&0) {
            return fail("every stage needs at least one block and one head".into());
        }
        if self.input_size % self.patch_size != 0 {
            return fail(format!(
                "input size {} is not divisible by patch size {}",
                self.input_size, self.patch_size
            ));
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        for s in 0..self.num_stages() {
            let res = self.stage_resolution(s);
            if s + 1 < self.num_stages() && res % 2 != 0 {
                return fail(format!("stage {s} resolution {res} cannot be merged (odd)"));
            }
            if res % self.stage_window(s) != 0 {
                return fail(format!(
                    "stage {s} resolution {res} is not divisible by window size {}",
                    self.window_size
                ));
            }
            if self.stage_dim(s) % self.heads[s] != 0 {
                return fail(format!(
                    "stage {s} width {} is not divisible by {} heads",
                    self.stage_dim(s),
                    self.heads[s]
                ));
            }
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Token grid side at `stage`.
    pub fn stage_resolution(&self, stage: usize) -> usize {
        (self.input_size / self.patch_size) >> stage
    }

    /// Window side at `stage`; a grid no larger than the window is one window.
    pub fn stage_window(&self, stage: usize) -> usize {
        self.window_size.min(self.stage_resolution(stage))
    }

    /// Cyclic shift for `block` of `stage`: `M/2` on odd blocks, zero when
    /// a single window covers the grid.
    pub fn block_shift(&self, stage: usize, block: usize) -> usize {
        if block % 2 == 1 && self.stage_resolution(stage) > self.window_size {
            self.window_size / 2
        } else {
            0
        }
    }

    pub fn final_dim(&self) -> usize {
        self.stage_dim(self.num_stages() - 1)
    }
}
