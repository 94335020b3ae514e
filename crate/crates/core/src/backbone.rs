//! Teacher encoder and bottleneck. The teacher is a small residual CNN that
//! gets briefly pre-trained on the class labels of the normal training data,
//! then frozen; a pluggable trait keeps the door open for heavier pretrained
//! encoders. The bottleneck pools every level to the deepest resolution,
//! fuses them and projects to the embedding the student decodes from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchConfig, FeatureMapSet, FeatureSource};
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::init;
use crate::nn::params::{ParamId, ParamStore};

/// Anything that can produce the teacher-side pyramid.
pub trait Encoder {
    fn encode(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<FeatureMapSet>;
}

#[derive(Debug, Clone)]
pub(crate) struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
}

fn conv_init(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> ConvParams {
    let w = store.add(
        format!("{name}.w"),
        init::he_normal(&[cout, cin, k, k], cin * k * k, rng),
        true,
    );
    let b = store.add(format!("{name}.b"), init::zeros(&[cout]), true);
    ConvParams { w, b }
}

/// Downsampling residual block: 3x3 stride-2 + 3x3, with a 1x1 stride-2 skip.
#[derive(Debug, Clone)]
pub(crate) struct DownBlock {
    conv1: ConvParams,
    conv2: ConvParams,
    skip: ConvParams,
}

impl DownBlock {
    fn init(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        DownBlock {
            conv1: conv_init(store, &format!("{name}.conv1"), cin, cout, 3, rng),
            conv2: conv_init(store, &format!("{name}.conv2"), cout, cout, 3, rng),
            skip: conv_init(store, &format!("{name}.skip"), cin, cout, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w1 = g.param(store, self.conv1.w);
        let b1 = g.param(store, self.conv1.b);
        let h = g.conv2d(x, w1, b1, 2, 1);
        let h = g.relu(h);
        let w2 = g.param(store, self.conv2.w);
        let b2 = g.param(store, self.conv2.b);
        let h = g.conv2d(h, w2, b2, 1, 1);
        let ws = g.param(store, self.skip.w);
        let bs = g.param(store, self.skip.b);
        let s = g.conv2d(x, ws, bs, 2, 0);
        let sum = g.add(h, s);
        g.relu(sum)
    }

    pub(crate) fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.conv1.w, self.conv1.b, self.conv2.w, self.conv2.b, self.skip.w, self.skip.b,
        ]
    }
}

/// Small residual teacher with a classification head used only during its
/// brief pre-training phase.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub(crate) stem: ConvParams,
    pub(crate) stages: Vec<DownBlock>,
    pub(crate) head_w: ParamId,
    pub(crate) head_b: ParamId,
    input_size: usize,
}

impl Teacher {
    pub fn init(store: &mut ParamStore, config: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = &config.channels;
        let stem = conv_init(store, "teacher.stem", 3, c[0], 3, rng);
        let mut stages = Vec::new();
        let mut cin = c[0];
        for (i, &cout) in c.iter().enumerate() {
            stages.push(DownBlock::init(store, &format!("teacher.stage{i}"), cin, cout, rng));
            cin = cout;
        }
        let deep = *c.last().expect("non-empty channels");
        let head_w = store.add(
            "teacher.head.w",
            init::he_normal(&[deep, config.num_classes], deep, rng),
            true,
        );
        let head_b = store.add("teacher.head.b", init::zeros(&[config.num_classes]), true);
        Teacher {
            stem,
            stages,
            head_w,
            head_b,
            input_size: config.input_size,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem.w, self.stem.b];
        for s in &self.stages {
            ids.extend(s.param_ids());
        }
        ids.push(self.head_w);
        ids.push(self.head_b);
        ids
    }

    /// Freeze every teacher parameter (the contract during detector training).
    pub fn freeze(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            store.set_trainable(id, false);
        }
    }

    /// Classification logits from the deepest feature; used for pre-training
    /// the teacher on the toy classification task.
    pub fn head_logits(&self, g: &mut Graph, store: &ParamStore, deepest: Var) -> Var {
        let pooled = g.global_avg_pool(deepest);
        let d = g.shape(pooled)[0];
        let row = g.reshape(pooled, &[1, d]);
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        let logits = g.linear(row, w, b);
        let n = g.shape(logits)[1];
        g.reshape(logits, &[n])
    }
}

impl Encoder for Teacher {
    fn encode(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<FeatureMapSet> {
        let shape = g.shape(image).to_vec();
        if shape != [3, self.input_size, self.input_size] {
            return Err(Error::Shape(format!(
                "encoder expects (3, {s}, {s}) input, got {shape:?}",
                s = self.input_size
            )));
        }
        let ws = g.param(store, self.stem.w);
        let bs = g.param(store, self.stem.b);
        let mut x = g.conv2d(image, ws, bs, 2, 1);
        x = g.relu(x);
        let mut levels = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.forward(g, store, x);
            levels.push(x);
        }
        Ok(FeatureMapSet {
            levels,
            source: FeatureSource::Teacher,
        })
    }
}

/// Fuses the pyramid into the embedding the student decodes from: pool every
/// level to the deepest resolution, concatenate, 1x1-project, one residual
/// refinement block.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    proj: ConvParams,
    res1: ConvParams,
    res2: ConvParams,
}

impl Bottleneck {
    pub fn init(store: &mut ParamStore, config: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let cat: usize = config.channels.iter().sum();
        let cphi = config.bottleneck_channels;
        Bottleneck {
            proj: conv_init(store, "bottleneck.proj", cat, cphi, 1, rng),
            res1: conv_init(store, "bottleneck.res1", cphi, cphi, 3, rng),
            res2: conv_init(store, "bottleneck.res2", cphi, cphi, 3, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.proj.w, self.proj.b, self.res1.w, self.res1.b, self.res2.w, self.res2.b,
        ]
    }

    pub fn compress(&self, g: &mut Graph, store: &ParamStore, fs: &FeatureMapSet) -> Result<Var> {
        if fs.levels.len() < 2 {
            return Err(Error::Shape(
                "bottleneck expects the configured pyramid, got fewer than 2 levels".into(),
            ));
        }
        let deep_shape = g.shape(*fs.levels.last().expect("non-empty")).to_vec();
        let (dh, dw) = (deep_shape[1], deep_shape[2]);
        let mut pooled = Vec::with_capacity(fs.levels.len());
        for &lvl in &fs.levels {
            let mut x = lvl;
            while g.shape(x)[1] > dh {
                x = g.avgpool2(x);
            }
            if g.shape(x)[1] != dh || g.shape(x)[2] != dw {
                return Err(Error::Shape(format!(
                    "level {:?} cannot be pooled to deepest {:?}",
                    g.shape(lvl),
                    deep_shape
                )));
            }
            pooled.push(x);
        }
        // channel concat via token layout
        let tokens: Vec<Var> = pooled.iter().map(|&p| g.chw_to_tokens(p)).collect();
        let cat = g.concat_cols(&tokens);
        let fused = g.tokens_to_chw(cat, dh, dw);
        let wp = g.param(store, self.proj.w);
        let bp = g.param(store, self.proj.b);
        let mut phi = g.conv2d(fused, wp, bp, 1, 0);
        phi = g.relu(phi);
        let w1 = g.param(store, self.res1.w);
        let b1 = g.param(store, self.res1.b);
        let h = g.conv2d(phi, w1, b1, 1, 1);
        let h = g.relu(h);
        let w2 = g.param(store, self.res2.w);
        let b2 = g.param(store, self.res2.b);
        let h = g.conv2d(h, w2, b2, 1, 1);
        let sum = g.add(h, phi);
        Ok(g.relu(sum))
    }
}

/// Convenience constructor used by tests: teacher + bottleneck on a store.
pub fn init_backbone(
    store: &mut ParamStore,
    config: &ArchConfig,
    seed: u64,
) -> (Teacher, Bottleneck) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = Teacher::init(store, config, &mut rng);
    let bottleneck = Bottleneck::init(store, config, &mut rng);
    (teacher, bottleneck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn image_var(g: &mut Graph, size: usize, fill: f64) -> Var {
        g.constant(ArrayD::from_elem(IxDyn(&[3, size, size]), fill))
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let config = ArchConfig::toy(4);
        let mut store = ParamStore::new();
        let (teacher, _) = init_backbone(&mut store, &config, 0);
        let mut g = Graph::new();
        let img = image_var(&mut g, 32, 0.3);
        let fs = teacher.encode(&mut g, &store, img).unwrap();
        assert_eq!(fs.shapes(&g), vec![(16, 8, 8), (32, 4, 4), (64, 2, 2)]);
        fs.validate(&g, &config).unwrap();
    }

    #[test]
    fn bigger_input_doubles_level_sizes() {
        let mut config = ArchConfig::toy(4);
        config.input_size = 64;
        let mut store = ParamStore::new();
        let (teacher, bottleneck) = init_backbone(&mut store, &config, 0);
        let mut g = Graph::new();
        let img = image_var(&mut g, 64, 0.3);
        let fs = teacher.encode(&mut g, &store, img).unwrap();
        assert_eq!(fs.shapes(&g), vec![(16, 16, 16), (32, 8, 8), (64, 4, 4)]);
        let phi = bottleneck.compress(&mut g, &store, &fs).unwrap();
        assert_eq!(g.shape(phi), &[64, 4, 4]);
    }

    #[test]
    fn wrong_input_size_is_an_error() {
        let config = ArchConfig::toy(4);
        let mut store = ParamStore::new();
        let (teacher, _) = init_backbone(&mut store, &config, 0);
        let mut g = Graph::new();
        let img = image_var(&mut g, 16, 0.3);
        assert!(teacher.encode(&mut g, &store, img).is_err());
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let config = ArchConfig::toy(4);
        let mut store = ParamStore::new();
        let (teacher, bottleneck) = init_backbone(&mut store, &config, 0);
        let mut g = Graph::new();
        let img = image_var(&mut g, 32, 0.0);
        let fs = teacher.encode(&mut g, &store, img).unwrap();
        for &lvl in &fs.levels {
            assert!(g.value(lvl).iter().all(|v| v.is_finite()));
        }
        let phi = bottleneck.compress(&mut g, &store, &fs).unwrap();
        assert!(g.value(phi).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_is_deterministic() {
        let config = ArchConfig::toy(4);
        let mut store = ParamStore::new();
        let (teacher, _) = init_backbone(&mut store, &config, 3);
        let run = || {
            let mut g = Graph::new();
            let img = image_var(&mut g, 32, 0.42);
            let fs = teacher.encode(&mut g, &store, img).unwrap();
            fs.levels.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn embedding_sits_at_deepest_resolution() {
        let config = ArchConfig::toy(4);
        let mut store = ParamStore::new();
        let (teacher, bottleneck) = init_backbone(&mut store, &config, 0);
        let mut g = Graph::new();
        let img = image_var(&mut g, 32, 0.5);
        let fs = teacher.encode(&mut g, &store, img).unwrap();
        let phi = bottleneck.compress(&mut g, &store, &fs).unwrap();
        assert_eq!(g.shape(phi), &[64, 2, 2]);
    }
}
