//! Student decoder. Mirrors the teacher pyramid from deepest to shallowest:
//! a 1x1 projection lifts the bottleneck embedding, each stage runs two
//! instance-normalized residual blocks whose affine parameters come from the
//! style adapter (identity when the adapter is off), emits its level, and —
//! when prompts are on — exchanges context with the class tokens before the
//! next stage consumes the enhanced features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::adain;
use crate::arch::{ArchConfig, FeatureMapSet, FeatureSource};
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::init;
use crate::nn::params::{ParamId, ParamStore};
use crate::prompts::{aggregate_posterior, inject_prompts, PromptModule};

/// Serialized description of the decoder layout; the adapter's AdaIN heads
/// are sized from `adain_channels` and checkpoints carry the whole struct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderManifest {
    /// Stage channel counts in decode order (deepest first).
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub adain_per_block: usize,
    /// Channel count of every AdaIN layer, decode order.
    pub adain_channels: Vec<usize>,
    /// Whether a prompt exchange follows each stage (decode order).
    pub prompt_exchange: Vec<bool>,
}

impl DecoderManifest {
    pub fn from_arch(config: &ArchConfig) -> Self {
        let m = config.num_levels();
        let stage_channels: Vec<usize> = (0..m).rev().map(|i| config.channels[i]).collect();
        let mut adain_channels = Vec::new();
        for &c in &stage_channels {
            for _ in 0..4 {
                adain_channels.push(c);
            }
        }
        // every stage aggregates; only stages with a successor inject
        let prompt_exchange: Vec<bool> = (0..m).map(|s| s + 1 < m).collect();
        DecoderManifest {
            stage_channels,
            blocks_per_stage: 2,
            adain_per_block: 2,
            adain_channels,
            prompt_exchange,
        }
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

fn conv_init(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Conv {
    Conv {
        w: store.add(
            format!("{name}.w"),
            init::he_normal(&[cout, cin, k, k], cin * k * k, rng),
            true,
        ),
        b: store.add(format!("{name}.b"), init::zeros(&[cout]), true),
    }
}

#[derive(Debug, Clone)]
struct AdainResBlock {
    conv1: Conv,
    conv2: Conv,
}

impl AdainResBlock {
    fn init(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        AdainResBlock {
            conv1: conv_init(store, &format!("{name}.conv1"), c, c, 3, rng),
            conv2: conv_init(store, &format!("{name}.conv2"), c, c, 3, rng),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ab1: (Var, Var),
        ab2: (Var, Var),
    ) -> Result<Var> {
        let w1 = g.param(store, self.conv1.w);
        let b1 = g.param(store, self.conv1.b);
        let h = g.conv2d(x, w1, b1, 1, 1);
        let h = adain(g, h, ab1.0, ab1.1)?;
        let h = g.relu(h);
        let w2 = g.param(store, self.conv2.w);
        let b2 = g.param(store, self.conv2.b);
        let h = g.conv2d(h, w2, b2, 1, 1);
        let h = adain(g, h, ab2.0, ab2.1)?;
        let sum = g.add(h, x);
        Ok(g.relu(sum))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.conv1.w, self.conv1.b, self.conv2.w, self.conv2.b]
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    /// 0-based pyramid level this stage emits (0 = shallowest).
    level: usize,
    /// Upsampling conv from the previous (deeper) stage; None at the deepest.
    up: Option<Conv>,
    block1: AdainResBlock,
    block2: AdainResBlock,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    proj_in: Conv,
    stages: Vec<DecoderStage>,
    pub manifest: DecoderManifest,
}

impl Decoder {
    pub fn init(store: &mut ParamStore, config: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = config.num_levels();
        let c = &config.channels;
        let deep = c[m - 1];
        let proj_in = conv_init(store, "decoder.proj_in", config.bottleneck_channels, deep, 1, &mut rng);
        let mut stages = Vec::with_capacity(m);
        for (s, level) in (0..m).rev().enumerate() {
            let up = if s == 0 {
                None
            } else {
                Some(conv_init(
                    store,
                    &format!("decoder.stage{s}.up"),
                    c[level + 1],
                    c[level],
                    3,
                    &mut rng,
                ))
            };
            stages.push(DecoderStage {
                level,
                up,
                block1: AdainResBlock::init(store, &format!("decoder.stage{s}.block1"), c[level], &mut rng),
                block2: AdainResBlock::init(store, &format!("decoder.stage{s}.block2"), c[level], &mut rng),
            });
        }
        Decoder {
            proj_in,
            stages,
            manifest: DecoderManifest::from_arch(config),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.proj_in.w, self.proj_in.b];
        for s in &self.stages {
            if let Some(up) = &s.up {
                ids.push(up.w);
                ids.push(up.b);
            }
            ids.extend(s.block1.param_ids());
            ids.extend(s.block2.param_ids());
        }
        ids
    }

    /// Reconstruct the student pyramid from the embedding.
    ///
    /// `adain_params`: per AdaIN layer (decode order) when the adapter is on;
    /// `None` runs the identity affine (gamma 1, beta 0).
    /// `prompts`: the prompt module plus the routed class when prompts are
    /// on; posterior tokens come back one per level (shallow-to-deep order,
    /// aligned with the returned pyramid).
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        phi: Var,
        prompts: Option<(&PromptModule, usize)>,
        adain_params: Option<&[(Var, Var)]>,
    ) -> Result<(FeatureMapSet, Vec<Var>)> {
        if let Some(ps) = adain_params {
            if ps.len() != self.manifest.adain_channels.len() {
                return Err(Error::Shape(format!(
                    "expected {} adain parameter pairs, got {}",
                    self.manifest.adain_channels.len(),
                    ps.len()
                )));
            }
        }
        let prompt_tokens = match prompts {
            Some((pm, class_index)) => Some((pm, pm.pool.select(g, store, class_index)?)),
            None => None,
        };

        let mut adain_idx = 0;
        let mut next_affine = |g: &mut Graph, channels: usize| -> (Var, Var) {
            let pair = match adain_params {
                Some(ps) => ps[adain_idx],
                None => {
                    let ones = g.constant(init::full(&[channels], 1.0));
                    let zeros = g.constant(init::zeros(&[channels]));
                    (ones, zeros)
                }
            };
            adain_idx += 1;
            pair
        };

        let wp = g.param(store, self.proj_in.w);
        let bp = g.param(store, self.proj_in.b);
        let mut x = g.conv2d(phi, wp, bp, 1, 0);
        x = g.relu(x);

        let mut levels_deep_first: Vec<Var> = Vec::with_capacity(self.stages.len());
        let mut zs_deep_first: Vec<Var> = Vec::new();
        for stage in &self.stages {
            if let Some(up) = &stage.up {
                let u = g.upsample_nearest2(x);
                let wu = g.param(store, up.w);
                let bu = g.param(store, up.b);
                x = g.conv2d(u, wu, bu, 1, 1);
                x = g.relu(x);
            }
            let ch = g.shape(x)[0];
            let a1 = next_affine(g, ch);
            let a2 = next_affine(g, ch);
            x = stage.block1.forward(g, store, x, a1, a2)?;
            let a3 = next_affine(g, ch);
            let a4 = next_affine(g, ch);
            x = stage.block2.forward(g, store, x, a3, a4)?;
            levels_deep_first.push(x);

            if let Some((pm, z)) = &prompt_tokens {
                let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
                let f_tok = pm.features_to_tokens(g, store, stage.level, x);
                let z_hat = aggregate_posterior(g, store, &pm.aggregate[stage.level], *z, f_tok)?;
                zs_deep_first.push(z_hat);
                if stage.level > 0 {
                    let block = pm.inject[stage.level]
                        .as_ref()
                        .expect("inject block exists for non-shallowest levels");
                    let enhanced = inject_prompts(g, store, block, f_tok, z_hat)?;
                    x = pm.tokens_to_features(g, store, stage.level, enhanced, h, w);
                }
            }
        }

        levels_deep_first.reverse();
        zs_deep_first.reverse();
        Ok((
            FeatureMapSet {
                levels: levels_deep_first,
                source: FeatureSource::Student,
            },
            zs_deep_first,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_backbone;
    use ndarray::{ArrayD, IxDyn};

    fn setup(seed: u64) -> (ArchConfig, ParamStore, crate::backbone::Teacher, crate::backbone::Bottleneck, Decoder) {
        let config = ArchConfig::toy(4);
        let mut store = ParamStore::new();
        let (teacher, bottleneck) = init_backbone(&mut store, &config, seed);
        let decoder = Decoder::init(&mut store, &config, seed + 1);
        (config, store, teacher, bottleneck, decoder)
    }

    fn image(fill: f64) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[3, 32, 32]), |ix| {
            fill + 0.3 * ((ix[1] + ix[2]) % 7) as f64 / 7.0
        })
    }

    #[test]
    fn student_mirrors_teacher_shapes() {
        use crate::backbone::Encoder;
        let (config, store, teacher, bottleneck, decoder) = setup(0);
        let mut g = Graph::new();
        let img = g.constant(image(0.1));
        let teacher_fs = teacher.encode(&mut g, &store, img).unwrap();
        let phi = bottleneck.compress(&mut g, &store, &teacher_fs).unwrap();
        let (student_fs, zs) = decoder.decode(&mut g, &store, phi, None, None).unwrap();
        crate::arch::check_mirror(&g, &teacher_fs, &student_fs).unwrap();
        assert!(zs.is_empty());
        student_fs.validate(&g, &config).unwrap();
    }

    #[test]
    fn decode_is_deterministic() {
        use crate::backbone::Encoder;
        let (_, store, teacher, bottleneck, decoder) = setup(1);
        let run = || {
            let mut g = Graph::new();
            let img = g.constant(image(0.4));
            let fs = teacher.encode(&mut g, &store, img).unwrap();
            let phi = bottleneck.compress(&mut g, &store, &fs).unwrap();
            let (student, _) = decoder.decode(&mut g, &store, phi, None, None).unwrap();
            student.levels.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn prompts_produce_posterior_tokens_per_level() {
        use crate::backbone::Encoder;
        let (config, mut store, teacher, bottleneck, decoder) = setup(2);
        let pm = PromptModule::init(&mut store, &config, 9);
        let mut g = Graph::new();
        let img = g.constant(image(0.2));
        let fs = teacher.encode(&mut g, &store, img).unwrap();
        let phi = bottleneck.compress(&mut g, &store, &fs).unwrap();
        let (student, zs) = decoder
            .decode(&mut g, &store, phi, Some((&pm, 2)), None)
            .unwrap();
        assert_eq!(zs.len(), config.num_levels());
        for &z in &zs {
            assert_eq!(g.shape(z), &[config.prompt_len, config.token_dim]);
        }
        crate::arch::check_mirror(&g, &fs, &student).unwrap();
    }

    #[test]
    fn zeroed_prompt_blocks_reduce_to_plain_decoder() {
        use crate::backbone::Encoder;
        let (config, mut store, teacher, bottleneck, decoder) = setup(3);
        let pm = PromptModule::init(&mut store, &config, 10);
        // zero every block's output path and the channel adapters so the
        // prompt exchange is the identity on features
        for level in 0..config.num_levels() {
            let blocks: Vec<_> = std::iter::once(&pm.aggregate[level])
                .chain(pm.inject[level].as_ref())
                .collect();
            for b in blocks {
                let wo_shape = store.value(b.wo).shape().to_vec();
                store.set_value(b.wo, init::zeros(&wo_shape));
                let w2_shape = store.value(b.ffn_w2).shape().to_vec();
                store.set_value(b.ffn_w2, init::zeros(&w2_shape));
                let b2_shape = store.value(b.ffn_b2).shape().to_vec();
                store.set_value(b.ffn_b2, init::zeros(&b2_shape));
            }
            // proj_out(proj_in(x)) must be identity for the reduction: use
            // identity weight, zero bias on both adapters
            let c = config.channels[level];
            let mt = config.token_dim;
            let mut win = init::zeros(&[c, mt]);
            for i in 0..c.min(mt) {
                win[[i, i]] = 1.0;
            }
            let mut wout = init::zeros(&[mt, c]);
            for i in 0..c.min(mt) {
                wout[[i, i]] = 1.0;
            }
            store.set_value(pm.proj_in_w[level], win);
            store.set_value(pm.proj_out_w[level], wout);
        }
        let mut g = Graph::new();
        let img = g.constant(image(0.3));
        let fs = teacher.encode(&mut g, &store, img).unwrap();
        let phi = bottleneck.compress(&mut g, &store, &fs).unwrap();
        let (plain, _) = decoder.decode(&mut g, &store, phi, None, None).unwrap();
        let (with_prompts, _) = decoder
            .decode(&mut g, &store, phi, Some((&pm, 0)), None)
            .unwrap();
        for (&a, &b) in plain.levels.iter().zip(&with_prompts.levels) {
            let diff = (g.value(a) - g.value(b)).mapv(f64::abs).sum();
            assert!(diff < 1e-9, "prompt-zeroed decode differs by {diff}");
        }
    }

    #[test]
    fn adain_param_count_is_enforced() {
        use crate::backbone::Encoder;
        let (_, store, teacher, bottleneck, decoder) = setup(4);
        let mut g = Graph::new();
        let img = g.constant(image(0.1));
        let fs = teacher.encode(&mut g, &store, img).unwrap();
        let phi = bottleneck.compress(&mut g, &store, &fs).unwrap();
        let ones = g.constant(init::full(&[64], 1.0));
        let zeros = g.constant(init::zeros(&[64]));
        let short = vec![(ones, zeros)];
        assert!(decoder.decode(&mut g, &store, phi, None, Some(&short)).is_err());
    }

    #[test]
    fn manifest_matches_arch() {
        let config = ArchConfig::toy(4);
        let m = DecoderManifest::from_arch(&config);
        assert_eq!(m.stage_channels, vec![64, 32, 16]);
        assert_eq!(m.adain_channels.len(), 12);
        assert_eq!(m.adain_channels[0], 64);
        assert_eq!(m.adain_channels[11], 16);
        assert_eq!(m.prompt_exchange, vec![true, true, false]);
    }
}
