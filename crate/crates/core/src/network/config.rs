use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockSpec, BlockVariant, UnitFamily};
use crate::error::{Error, Result};
use crate::gating::DICT_INIT_STD;
use crate::rpe::Window;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    S,
    B,
    L,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchVersion {
    /// One 4×4 stride-4 conv.
    PeV1,
    /// Two 2×2 stride-2 convs.
    PeV2,
    /// Two overlapping 3×3 stride-2 convs.
    PeV3,
}

impl PatchVersion {
    /// `(kernel, stride)` of each conv.
    pub fn convs(self) -> &'static [(usize, usize)] {
        match self {
            PatchVersion::PeV1 => &[(4, 4)],
            PatchVersion::PeV2 => &[(2, 2), (2, 2)],
            PatchVersion::PeV3 => &[(3, 2), (3, 2)],
        }
    }
}

/// Clip extents fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub const fn new(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Preset,
    pub depths: Vec<usize>,
    pub channels: Vec<usize>,
    pub expansion: usize,
    pub groups: Vec<usize>,
    /// Per-stage dictionary windows; stages smaller than a window use the
    /// whole stage and the centered part of each dictionary.
    pub windows: Vec<Window>,
    pub input: InputShape,
    pub patch_version: PatchVersion,
    pub block_variant: BlockVariant,
    #[serde(default)]
    pub unit_family: UnitFamily,
    pub num_classes: usize,
    #[serde(default)]
    pub drop_path_rate: f64,
    /// Experimental frame subsampling right after patch embedding.
    #[serde(default = "one")]
    pub temporal_stride: usize,
    /// Truncated-normal std of every relative-position dictionary.
    #[serde(default = "dict_std")]
    pub dict_init_std: f64,
}

fn one() -> usize {
    1
}

fn dict_std() -> f64 {
    DICT_INIT_STD
}

/// Extents of one stage's feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLayout {
    pub extent: Window,
    pub channels: usize,
    /// Runtime window, the configured one clamped to the extent.
    pub window: Window,
}

impl StageLayout {
    pub fn windows(&self) -> usize {
        (self.extent.t / self.window.t) * (self.extent.h / self.window.h) * (self.extent.w / self.window.w)
    }
}

pub const STAGE_CHANNELS: [usize; 4] = [72, 144, 288, 576];
pub const STAGE_GROUPS: [usize; 4] = [8, 16, 32, 64];

impl ModelConfig {
    fn preset(variant: Preset, depths: [usize; 4], expansion: usize, num_classes: usize) -> Self {
        Self {
            variant,
            depths: depths.to_vec(),
            channels: STAGE_CHANNELS.to_vec(),
            expansion,
            groups: STAGE_GROUPS.to_vec(),
            windows: vec![
                Window::new(16, 14, 14),
                Window::new(16, 14, 14),
                Window::new(16, 14, 14),
                Window::new(16, 7, 7),
            ],
            input: InputShape::new(16, 224, 224),
            patch_version: PatchVersion::PeV3,
            block_variant: BlockVariant::ParallelV1,
            unit_family: UnitFamily::Positional,
            num_classes,
            drop_path_rate: 0.0,
            temporal_stride: 1,
            dict_init_std: DICT_INIT_STD,
        }
    }

    pub fn small() -> Self {
        Self::preset(Preset::S, [3, 4, 9, 3], 2, 174)
    }

    pub fn base() -> Self {
        Self::preset(Preset::B, [4, 6, 15, 4], 2, 174)
    }

    pub fn large() -> Self {
        Self::preset(Preset::L, [4, 6, 15, 4], 4, 400)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "s" | "small" => Ok(Self::small()),
            "b" | "base" => Ok(Self::base()),
            "l" | "large" => Ok(Self::large()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Frames after the optional temporal stride.
    pub fn frames(&self) -> usize {
        self.input.frames.div_ceil(self.temporal_stride)
    }

    pub fn layouts(&self) -> Result<Vec<StageLayout>> {
        self.layouts_for(self.input)
    }

    /// Stage layouts for an arbitrary input clip.
    pub fn layouts_for(&self, input: InputShape) -> Result<Vec<StageLayout>> {
        if input.frames == 0 || !input.height.is_multiple_of(4) || !input.width.is_multiple_of(4) || input.height == 0 || input.width == 0
        {
            return Err(Error::Config(format!(
                "input {}x{}x{} must have frames and spatial extents divisible by 4",
                input.frames, input.height, input.width
            )));
        }
        let t = input.frames.div_ceil(self.temporal_stride);
        let (mut h, mut w) = (input.height / 4, input.width / 4);
        let mut out = Vec::with_capacity(self.stages());
        for s in 0..self.stages() {
            if s > 0 {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!("stage {} input {h}x{w} cannot be halved", s + 1)));
                }
                h /= 2;
                w /= 2;
            }
            let extent = Window::new(t, h, w);
            let window = self.windows[s].clamp_to(extent);
            if !extent.t.is_multiple_of(window.t) || !extent.h.is_multiple_of(window.h) || !extent.w.is_multiple_of(window.w) {
                return Err(Error::Config(format!(
                    "stage {} extent {extent} is not tiled by window {window}",
                    s + 1
                )));
            }
            out.push(StageLayout { extent, channels: self.channels[s], window });
        }
        Ok(out)
    }

    /// Linearly increasing stochastic depth over all blocks.
    pub fn drop_path_rates(&self) -> Vec<f64> {
        let n = self.total_blocks();
        (0..n)
            .map(|i| if n > 1 { self.drop_path_rate * i as f64 / (n - 1) as f64 } else { self.drop_path_rate })
            .collect()
    }

    pub fn block_spec(&self, stage: usize, rate: f64) -> BlockSpec {
        BlockSpec {
            variant: self.block_variant,
            family: self.unit_family,
            channels: self.channels[stage],
            expansion: self.expansion,
            window: self.windows[stage],
            groups: self.groups[stage],
            drop_path_rate: rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.depths.len();
        if n == 0 {
            return Err(Error::Config("at least one stage is required".into()));
        }
        for (field, len) in [
            ("channels", self.channels.len()),
            ("groups", self.groups.len()),
            ("windows", self.windows.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!("{field} has {len} entries for {n} stages")));
            }
        }
        if self.channels.contains(&0) || self.expansion == 0 || self.num_classes == 0 {
            return Err(Error::Config("channels, expansion and num_classes must be positive".into()));
        }
        if self.patch_version != PatchVersion::PeV1 && !self.channels[0].is_multiple_of(2) {
            return Err(Error::Config("two-conv patch embedding needs an even stage-1 width".into()));
        }
        if !(self.dict_init_std >= 0.0 && self.dict_init_std.is_finite()) {
            return Err(Error::Config("dict_init_std must be finite and non-negative".into()));
        }
        if self.temporal_stride == 0 {
            return Err(Error::Config("temporal_stride must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!("drop_path_rate {} outside [0, 1]", self.drop_path_rate)));
        }
        for s in 0..n {
            let w = self.windows[s];
            if w.t == 0 || w.h == 0 || w.w == 0 {
                return Err(Error::Config(format!("stage {} window {w} is empty", s + 1)));
            }
            self.block_spec(s, 0.0)
                .validate()
                .map_err(|e| Error::Config(format!("stage {}: {e}", s + 1)))?;
        }
        self.layouts().map(|_| ())
    }
}
