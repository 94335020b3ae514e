//! Architecture description shared by the teacher, bottleneck, decoder,
//! prompts and adapter. Everything needed to rebuild a model is in
//! [`ArchConfig`], which is serialized into every checkpoint manifest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Model input resolution (square images).
    pub input_size: usize,
    /// Channel count per pyramid level, shallow to deep; length = M.
    /// Level i sits at stride `4 * 2^i` of the input.
    pub channels: Vec<usize>,
    /// Bottleneck embedding channels.
    pub bottleneck_channels: usize,
    pub num_classes: usize,
    /// Prompt tokens per class (l).
    pub prompt_len: usize,
    /// Token width shared by prompts and attention blocks (M_t).
    pub token_dim: usize,
    pub num_heads: usize,
    /// FFN hidden width = ffn_mult * token_dim.
    pub ffn_mult: usize,
    /// Style code dimension (D_s).
    pub style_dim: usize,
    /// Hidden width of the class classifier head.
    pub classifier_hidden: usize,
}

impl ArchConfig {
    pub fn toy(num_classes: usize) -> Self {
        ArchConfig {
            input_size: 32,
            channels: vec![16, 32, 64],
            bottleneck_channels: 64,
            num_classes,
            prompt_len: 4,
            token_dim: 64,
            num_heads: 4,
            ffn_mult: 2,
            style_dim: 32,
            classifier_hidden: 64,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial size of pyramid level `i` (0-based, shallow first).
    pub fn level_size(&self, i: usize) -> usize {
        self.input_size >> (2 + i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Config("need at least 2 pyramid levels".into()));
        }
        if self.input_size % (4 << (self.channels.len() - 1)) != 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by the deepest stride {}",
                self.input_size,
                4 << (self.channels.len() - 1)
            )));
        }
        if self.level_size(self.channels.len() - 1) < 1 {
            return Err(Error::Config("input too small for the pyramid depth".into()));
        }
        if self.token_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "token dim {} not divisible by head count {}",
                self.token_dim, self.num_heads
            )));
        }
        if self.num_classes == 0 || self.prompt_len == 0 || self.token_dim == 0 {
            return Err(Error::Config("prompt pool dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Teacher,
    Student,
}

/// Multi-scale feature pyramid inside a graph; levels are ordered shallow to
/// deep with strictly decreasing spatial size.
#[derive(Debug, Clone)]
pub struct FeatureMapSet {
    pub levels: Vec<Var>,
    pub source: FeatureSource,
}

impl FeatureMapSet {
    pub fn shapes(&self, g: &Graph) -> Vec<(usize, usize, usize)> {
        self.levels
            .iter()
            .map(|&v| {
                let s = g.shape(v);
                (s[0], s[1], s[2])
            })
            .collect()
    }

    pub fn validate(&self, g: &Graph, config: &ArchConfig) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::Shape("feature pyramid needs at least 2 levels".into()));
        }
        let shapes = self.shapes(g);
        for w in shapes.windows(2) {
            if w[1].1 >= w[0].1 || w[1].2 >= w[0].2 {
                return Err(Error::Shape(format!(
                    "pyramid spatial sizes must strictly decrease, got {shapes:?}"
                )));
            }
        }
        for (i, s) in shapes.iter().enumerate() {
            if s.0 != config.channels[i] {
                return Err(Error::Shape(format!(
                    "level {i} has {} channels, manifest says {}",
                    s.0, config.channels[i]
                )));
            }
        }
        Ok(())
    }
}

/// Check the student mirrors the teacher shape for shape.
pub fn check_mirror(g: &Graph, teacher: &FeatureMapSet, student: &FeatureMapSet) -> Result<()> {
    if teacher.levels.len() != student.levels.len() {
        return Err(Error::Shape(format!(
            "pyramid level counts differ: {} vs {}",
            teacher.levels.len(),
            student.levels.len()
        )));
    }
    for (i, (&t, &s)) in teacher.levels.iter().zip(&student.levels).enumerate() {
        if g.shape(t) != g.shape(s) {
            return Err(Error::Shape(format!(
                "level {i} shapes differ: {:?} vs {:?}",
                g.shape(t),
                g.shape(s)
            )));
        }
    }
    Ok(())
}
