//! Style-based domain adapter. A compact residual trunk maps each image to
//! a style code; per-layer affine heads turn that code into the (gamma,
//! beta) pairs that modulate the decoder's instance-normalized residual
//! blocks. Training pulls the codes of a normal image and its synthetic-OOD
//! augmentation together with a cosine consistency loss; at test time the
//! adapter is pure feed-forward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::ArchConfig;
use crate::backbone::Teacher;
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::init;
use crate::nn::params::{ParamId, ParamStore};

/// Epsilon added to the per-channel std inside [`adain`].
pub const ADAIN_EPS: f64 = 1e-5;

/// Per-channel standardization over the spatial extent followed by the
/// learned affine: `gamma_c * (x_c - mean_c) / (std_c + eps) + beta_c`.
pub fn adain(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("adain expects (C, H, W), got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h * w < 2 {
        return Err(Error::Shape(
            "adain needs at least 2 spatial positions (std undefined on 1)".into(),
        ));
    }
    if g.shape(gamma) != [c] || g.shape(beta) != [c] {
        return Err(Error::Shape(format!(
            "adain affine params must have length {c}, got {:?} and {:?}",
            g.shape(gamma),
            g.shape(beta)
        )));
    }
    let mu = g.spatial_mean(x);
    let mu_b = g.bcast_chan(mu, h, w);
    let xc = g.sub(x, mu_b);
    let sq = g.mul(xc, xc);
    let var = g.spatial_mean(sq);
    let std = g.sqrt(var);
    let denom = g.add_scalar(std, ADAIN_EPS);
    let denom_b = g.bcast_chan(denom, h, w);
    let xn = g.div(xc, denom_b);
    let gb = g.bcast_chan(gamma, h, w);
    let bb = g.bcast_chan(beta, h, w);
    let scaled = g.mul(xn, gb);
    Ok(g.add(scaled, bb))
}

/// Style consistency loss: `1 - cos(a, b)`, in `[0, 2]`. Zero-norm codes are
/// rejected (the loss is undefined on them).
pub fn style_consistency_loss(g: &mut Graph, code_a: Var, code_b: Var) -> Result<Var> {
    for v in [code_a, code_b] {
        let norm = g.value(v).mapv(|x| x * x).sum().sqrt();
        if norm == 0.0 {
            return Err(Error::Numerical("style code has zero norm".into()));
        }
    }
    let cos = g.cosine_1d(code_a, code_b, 1e-12);
    let neg = g.neg(cos);
    Ok(g.add_scalar(neg, 1.0))
}

/// Adapter trunk + style head + per-layer AdaIN heads.
#[derive(Debug, Clone)]
pub struct Adapter {
    trunk_stem_w: ParamId,
    trunk_stem_b: ParamId,
    trunk_stage_ids: Vec<Vec<ParamId>>,
    head_w: ParamId,
    head_b: ParamId,
    /// Per modulated decoder layer: (gamma head, beta head), each an affine
    /// from the style code.
    pub gamma_heads: Vec<(ParamId, ParamId)>,
    pub beta_heads: Vec<(ParamId, ParamId)>,
    pub layer_channels: Vec<usize>,
    input_size: usize,
    style_dim: usize,
}

impl Adapter {
    /// `layer_channels` lists the channel count of every AdaIN-equipped
    /// decoder layer, in decode order; it comes from the decoder manifest.
    pub fn init(
        store: &mut ParamStore,
        config: &ArchConfig,
        layer_channels: Vec<usize>,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config.channels;
        let ds = config.style_dim;
        let trunk_stem_w = store.add_with(
            "adapter.stem.w",
            init::he_normal(&[c[0], 3, 3, 3], 27, &mut rng),
            true,
            0.1,
            true,
        );
        let trunk_stem_b = store.add_with("adapter.stem.b", init::zeros(&[c[0]]), true, 0.1, true);
        let mut trunk_stage_ids = Vec::new();
        let mut cin = c[0];
        for (i, &cout) in c.iter().enumerate() {
            let mut ids = Vec::new();
            for (suffix, shape, fan_in) in [
                ("conv1.w", vec![cout, cin, 3, 3], cin * 9),
                ("conv2.w", vec![cout, cout, 3, 3], cout * 9),
                ("skip.w", vec![cout, cin, 1, 1], cin),
            ] {
                ids.push(store.add_with(
                    format!("adapter.stage{i}.{suffix}"),
                    init::he_normal(&shape, fan_in, &mut rng),
                    true,
                    0.1,
                    true,
                ));
                let bias_name = suffix.replace(".w", ".b");
                ids.push(store.add_with(
                    format!("adapter.stage{i}.{bias_name}"),
                    init::zeros(&[cout]),
                    true,
                    0.1,
                    true,
                ));
            }
            trunk_stage_ids.push(ids);
            cin = cout;
        }
        let deep = *c.last().expect("non-empty");
        let head_w = store.add(
            "adapter.head.w",
            init::xavier_uniform(&[deep, ds], deep, ds, &mut rng),
            true,
        );
        let head_b = store.add("adapter.head.b", init::zeros(&[ds]), true);

        // identity at init: zero weights, gamma bias 1, beta bias 0
        let mut gamma_heads = Vec::new();
        let mut beta_heads = Vec::new();
        for (k, &ch) in layer_channels.iter().enumerate() {
            gamma_heads.push((
                store.add(format!("adapter.adain{k}.gamma.w"), init::zeros(&[ds, ch]), true),
                store.add(format!("adapter.adain{k}.gamma.b"), init::full(&[ch], 1.0), true),
            ));
            beta_heads.push((
                store.add(format!("adapter.adain{k}.beta.w"), init::zeros(&[ds, ch]), true),
                store.add(format!("adapter.adain{k}.beta.b"), init::zeros(&[ch]), true),
            ));
        }
        Adapter {
            trunk_stem_w,
            trunk_stem_b,
            trunk_stage_ids,
            head_w,
            head_b,
            gamma_heads,
            beta_heads,
            layer_channels,
            input_size: config.input_size,
            style_dim: ds,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.trunk_stem_w, self.trunk_stem_b];
        for s in &self.trunk_stage_ids {
            ids.extend(s.iter().copied());
        }
        ids.push(self.head_w);
        ids.push(self.head_b);
        for &(w, b) in self.gamma_heads.iter().chain(&self.beta_heads) {
            ids.push(w);
            ids.push(b);
        }
        ids
    }

    /// Copy the (pre-trained) teacher trunk weights into the adapter trunk;
    /// the adapter then fine-tunes from a semantically meaningful start.
    pub fn load_trunk_from_teacher(&self, store: &mut ParamStore, teacher: &Teacher) {
        let pairs: Vec<(ParamId, ParamId)> = {
            let mut v = vec![(teacher.stem.w, self.trunk_stem_w), (teacher.stem.b, self.trunk_stem_b)];
            for (t_stage, a_ids) in teacher.stages.iter().zip(&self.trunk_stage_ids) {
                for (t_id, a_id) in t_stage.param_ids().into_iter().zip(a_ids.iter().copied()) {
                    v.push((t_id, a_id));
                }
            }
            v
        };
        for (src, dst) in pairs {
            let value = store.value(src).clone();
            store.set_value(dst, value);
        }
    }

    /// Freeze or unfreeze the trunk (the heads always train).
    pub fn set_trunk_trainable(&self, store: &mut ParamStore, trainable: bool) {
        store.set_trainable(self.trunk_stem_w, trainable);
        store.set_trainable(self.trunk_stem_b, trainable);
        for s in &self.trunk_stage_ids {
            for &id in s {
                store.set_trainable(id, trainable);
            }
        }
    }

    /// Deterministic per-image style code `(D_s,)`.
    pub fn style_code(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let shape = g.shape(image).to_vec();
        if shape != [3, self.input_size, self.input_size] {
            return Err(Error::Shape(format!(
                "adapter expects (3, {s}, {s}) input, got {shape:?}",
                s = self.input_size
            )));
        }
        let ws = g.param(store, self.trunk_stem_w);
        let bs = g.param(store, self.trunk_stem_b);
        let mut x = g.conv2d(image, ws, bs, 2, 1);
        x = g.relu(x);
        for ids in &self.trunk_stage_ids {
            // ids: [conv1.w, conv1.b, conv2.w, conv2.b, skip.w, skip.b]
            let w1 = g.param(store, ids[0]);
            let b1 = g.param(store, ids[1]);
            let h = g.conv2d(x, w1, b1, 2, 1);
            let h = g.relu(h);
            let w2 = g.param(store, ids[2]);
            let b2 = g.param(store, ids[3]);
            let h = g.conv2d(h, w2, b2, 1, 1);
            let wsk = g.param(store, ids[4]);
            let bsk = g.param(store, ids[5]);
            let s = g.conv2d(x, wsk, bsk, 2, 0);
            let sum = g.add(h, s);
            x = g.relu(sum);
        }
        let pooled = g.global_avg_pool(x);
        let d = g.shape(pooled)[0];
        let row = g.reshape(pooled, &[1, d]);
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        let code_row = g.linear(row, w, b);
        let code = g.reshape(code_row, &[self.style_dim]);
        let norm = g.value(code).mapv(|v| v * v).sum().sqrt();
        if norm == 0.0 {
            return Err(Error::Numerical("degenerate zero-norm style code".into()));
        }
        Ok(code)
    }

    /// Map a style code to (gamma, beta) for every modulated layer.
    pub fn adain_params(&self, g: &mut Graph, store: &ParamStore, code: Var) -> Vec<(Var, Var)> {
        let d = g.shape(code)[0];
        let row = g.reshape(code, &[1, d]);
        let mut out = Vec::with_capacity(self.gamma_heads.len());
        for ((gw, gb), (bw, bb)) in self.gamma_heads.iter().zip(&self.beta_heads) {
            let wg = g.param(store, *gw);
            let bgp = g.param(store, *gb);
            let gamma_row = g.linear(row, wg, bgp);
            let ch = g.shape(gamma_row)[1];
            let gamma = g.reshape(gamma_row, &[ch]);
            let wb = g.param(store, *bw);
            let bbp = g.param(store, *bb);
            let beta_row = g.linear(row, wb, bbp);
            let beta = g.reshape(beta_row, &[ch]);
            out.push((gamma, beta));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_grad_input, finite_diff, rel_err};
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn adain_standardizes_with_unit_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_arr(&[3, 6, 6], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(x0);
        let gamma = g.constant(init::full(&[3], 1.0));
        let beta = g.constant(init::zeros(&[3]));
        let out = adain(&mut g, x, gamma, beta).unwrap();
        let v = g.value(out);
        for c in 0..3 {
            let plane = v.index_axis(ndarray::Axis(0), c);
            let mean = plane.mean().unwrap();
            let var = plane.mapv(|x| (x - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() <= 1e-6, "channel {c} mean {mean}");
            assert!((0.99..=1.0).contains(&var), "channel {c} var {var}");
        }
    }

    #[test]
    fn adain_zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_arr(&[2, 4, 4], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(x0);
        let gamma = g.constant(init::zeros(&[2]));
        let beta = g.constant(ndarray::arr1(&[0.3, -0.7]).into_dyn());
        let out = adain(&mut g, x, gamma, beta).unwrap();
        let v = g.value(out);
        for y in 0..4 {
            for xx in 0..4 {
                assert!((v[[0, y, xx]] - 0.3).abs() < 1e-12);
                assert!((v[[1, y, xx]] + 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adain_constant_channel_gives_beta() {
        let mut g = Graph::new();
        let x = g.constant(ArrayD::from_elem(IxDyn(&[1, 3, 3]), 0.42));
        let gamma = g.constant(init::full(&[1], 1.0));
        let beta = g.constant(ndarray::arr1(&[0.9]).into_dyn());
        let out = adain(&mut g, x, gamma, beta).unwrap();
        for v in g.value(out).iter() {
            assert!((v - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn adain_rejects_single_pixel() {
        let mut g = Graph::new();
        let x = g.constant(ArrayD::from_elem(IxDyn(&[2, 1, 1]), 0.5));
        let gamma = g.constant(init::full(&[2], 1.0));
        let beta = g.constant(init::zeros(&[2]));
        assert!(adain(&mut g, x, gamma, beta).is_err());
    }

    #[test]
    fn adain_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_arr(&[2, 3, 3], &mut rng);
        let g0 = rand_arr(&[2], &mut rng);
        let b0 = rand_arr(&[2], &mut rng);
        let build = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone());
            let ga = g.constant(g0.clone());
            let be = g.constant(b0.clone());
            let out = adain(&mut g, xi, ga, be).unwrap();
            let sq = g.mul(out, out);
            let loss = g.mean_all(sq);
            (g, xi, loss)
        };
        let err = check_grad_input(&build, &x0);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn style_consistency_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a0 = rand_arr(&[8], &mut rng);
        let mut g = Graph::new();
        let a = g.constant(a0.clone());
        let same = g.constant(a0.clone());
        let l_same = style_consistency_loss(&mut g, a, same).unwrap();
        assert!(g.scalar_value(l_same).abs() < 1e-9);

        let neg = g.constant(-a0.clone());
        let l_neg = style_consistency_loss(&mut g, a, neg).unwrap();
        assert!((g.scalar_value(l_neg) - 2.0).abs() < 1e-9);

        // orthogonal codes
        let mut e1 = init::zeros(&[4]);
        e1[[0]] = 1.0;
        let mut e2 = init::zeros(&[4]);
        e2[[1]] = 1.0;
        let v1 = g.constant(e1);
        let v2 = g.constant(e2);
        let l_orth = style_consistency_loss(&mut g, v1, v2).unwrap();
        assert!((g.scalar_value(l_orth) - 1.0).abs() < 1e-9);

        // scale invariance
        let scaled = g.constant(&a0 * 37.5);
        let l_scaled = style_consistency_loss(&mut g, a, scaled).unwrap();
        assert!(g.scalar_value(l_scaled).abs() < 1e-9);

        // zero norm rejected
        let z = g.constant(init::zeros(&[8]));
        assert!(style_consistency_loss(&mut g, a, z).is_err());
    }

    #[test]
    fn style_consistency_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a0 = rand_arr(&[6], &mut rng);
        let b0 = rand_arr(&[6], &mut rng);
        let build = |a: &ArrayD<f64>| {
            let mut g = Graph::new();
            let ai = g.leaf(a.clone());
            let bi = g.constant(b0.clone());
            let loss = style_consistency_loss(&mut g, ai, bi).unwrap();
            (g, ai, loss)
        };
        assert!(check_grad_input(&build, &a0) < 1e-6);
        // also via plain finite differences on the other argument
        let f = |b: &ArrayD<f64>| {
            let mut g = Graph::new();
            let ai = g.constant(a0.clone());
            let bi = g.leaf(b.clone());
            let loss = style_consistency_loss(&mut g, ai, bi).unwrap();
            g.scalar_value(loss)
        };
        let numeric = finite_diff(&f, &b0, 1e-6);
        let mut g = Graph::new();
        let ai = g.constant(a0.clone());
        let bi = g.leaf(b0.clone());
        let loss = style_consistency_loss(&mut g, ai, bi).unwrap();
        let grads = g.backward(loss);
        assert!(rel_err(grads.of(bi).unwrap(), &numeric) < 1e-6);
    }

    #[test]
    fn heads_are_identity_at_init() {
        let config = ArchConfig::toy(3);
        let mut store = ParamStore::new();
        let adapter = Adapter::init(&mut store, &config, vec![64, 64, 32, 16], 0);
        let mut g = Graph::new();
        let code = g.constant(ndarray::arr1(&[0.5; 32]).into_dyn());
        let params = adapter.adain_params(&mut g, &store, code);
        assert_eq!(params.len(), 4);
        for (i, (gamma, beta)) in params.iter().enumerate() {
            assert_eq!(g.shape(*gamma), &[adapter.layer_channels[i]]);
            assert!(g.value(*gamma).iter().all(|&v| (v - 1.0).abs() < 1e-12));
            assert!(g.value(*beta).iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn style_code_shape_and_determinism() {
        let config = ArchConfig::toy(3);
        let mut store = ParamStore::new();
        let adapter = Adapter::init(&mut store, &config, vec![64, 32], 11);
        let img = ArrayD::from_shape_fn(IxDyn(&[3, 32, 32]), |ix| {
            ((ix[1] * 7 + ix[2] * 3 + ix[0]) % 11) as f64 / 11.0
        });
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(img.clone());
            let code = adapter.style_code(&mut g, &store, x).unwrap();
            g.value(code).clone()
        };
        let c1 = run();
        assert_eq!(c1.shape(), &[32]);
        assert_eq!(c1, run());
    }
}
