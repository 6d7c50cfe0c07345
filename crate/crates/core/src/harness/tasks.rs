//! Synthetic order-sensitive clip classification tasks.
//!
//! Clips are generated as a pure function of `(task, index)`. Samples come in
//! pairs `2k, 2k+1` built from the same random draws, which keeps the classes
//! balanced and makes the pairs controlled comparisons:
//!
//! - direction: sample `2k+1` is sample `2k` with its frame order reversed;
//! - shuffle-control: both samples share one randomly permuted clip, so the
//!   input carries no information about the label;
//! - position: a static dot in the left (`2k`) or right (`2k+1`) half.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::init::seeded;
use crate::tensor::Tensor;

pub const DOT: usize = 8;
pub const MAX_SPEED: usize = 2;
pub const NOISE_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Direction,
    Position,
    ShuffleControl,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "direction" => Some(TaskKind::Direction),
            "position" => Some(TaskKind::Position),
            "shuffle-control" => Some(TaskKind::ShuffleControl),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SyntheticTask {
    /// 8×32×32 clips with the given per-class count.
    pub fn toy(kind: TaskKind, samples_per_class: usize, seed: u64) -> Self {
        Self { kind, frames: 8, height: 32, width: 32, samples_per_class, seed }
    }

    pub fn len(&self) -> usize {
        2 * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.samples_per_class == 0
    }

    /// The same task on an independent stream of samples.
    pub fn split(&self, split: Split, samples_per_class: usize) -> Self {
        let seed = match split {
            Split::Train => self.seed,
            Split::Val => self.seed ^ 0x005E_ED0F_7A11_DA7A,
        };
        Self { seed, samples_per_class, ..*self }
    }

    fn validate(&self) -> Result<()> {
        let travel = DOT + self.frames.saturating_sub(1);
        if self.frames < 2 || self.height < DOT || self.width < travel.max(2 * DOT) {
            return Err(Error::Invalid(format!(
                "{}x{}x{} is too small for a {DOT}px dot over {} frames",
                self.frames, self.height, self.width, self.frames
            )));
        }
        Ok(())
    }

    /// Clip `[T, H, W, 3]` and its label for sample `index`.
    pub fn generate(&self, index: usize) -> Result<(Tensor, usize)> {
        self.validate()?;
        if index >= self.len() {
            return Err(Error::Invalid(format!("sample {index} out of {}", self.len())));
        }
        let pair = index / 2;
        let second = index % 2 == 1;
        let mut rng = seeded(self.seed ^ (pair as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
        let row = rng.random_range(0..=self.height - DOT);
        let (t, w) = (self.frames, self.width);
        let cols: Vec<usize> = match self.kind {
            TaskKind::Direction | TaskKind::ShuffleControl => {
                let max_speed = ((w - DOT) / (t - 1)).min(MAX_SPEED);
                let speed = rng.random_range(1..=max_speed);
                let start = rng.random_range(0..=w - DOT - speed * (t - 1));
                (0..t).map(|f| start + speed * f).collect()
            }
            TaskKind::Position => {
                let half = w / 2;
                let col = rng.random_range(0..=half - DOT);
                vec![if second { half + col } else { col }; t]
            }
        };
        let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
        let mut frames: Vec<Vec<f64>> = cols
            .iter()
            .map(|&c| {
                let mut f: Vec<f64> = (0..self.height * w * 3).map(|_| noise.sample(&mut rng)).collect();
                paint(&mut f, w, row, c, color);
                f
            })
            .collect();
        let label = usize::from(second);
        match self.kind {
            TaskKind::Direction if second => frames.reverse(),
            TaskKind::ShuffleControl => {
                let mut order: Vec<usize> = (0..t).collect();
                order.shuffle(&mut rng);
                frames = order.iter().map(|&i| frames[i].clone()).collect();
            }
            _ => {}
        }
        let data = frames.concat();
        Ok((Tensor::new([t, self.height, w, 3], data)?, label))
    }

    /// Stacks samples into `[B, T, H, W, 3]` with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::new();
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (clip, label) = self.generate(i)?;
            data.extend_from_slice(clip.data());
            labels.push(label);
        }
        let x = Tensor::new([indices.len(), self.frames, self.height, self.width, 3], data)?;
        Ok((x, labels))
    }
}

fn paint(frame: &mut [f64], width: usize, row: usize, col: usize, color: [f64; 3]) {
    for r in row..row + DOT {
        for c in col..col + DOT {
            let p = (r * width + c) * 3;
            for ch in 0..3 {
                frame[p + ch] += color[ch];
            }
        }
    }
}

/// Column of the dot's left edge in frame `f` of a clip, by brightness.
pub fn dot_column(clip: &Tensor, f: usize) -> usize {
    let [_, h, w, _] = clip.shape() else { panic!("clip must be rank 4") };
    let (h, w) = (*h, *w);
    let col_mass = |c: usize| -> f64 { (0..h).map(|r| (0..3).map(|ch| clip.at(&[f, r, c, ch])).sum::<f64>()).sum() };
    let masses: Vec<f64> = (0..w).map(col_mass).collect();
    (0..=w - DOT)
        .max_by(|&a, &b| {
            let sa: f64 = masses[a..a + DOT].iter().sum();
            let sb: f64 = masses[b..b + DOT].iter().sum();
            sa.total_cmp(&sb)
        })
        .expect("width exceeds dot")
}
