//! Class-prior prompt machinery: the learnable prompt pool, the class
//! classifier that routes test images to a pool slice, and the two-way
//! cross-attention blocks that first absorb image context into the prompt
//! tokens (posterior tokens) and then write that context back into the
//! student features. A global-average-pooled head over the concatenated
//! posterior tokens provides the cross-entropy supervision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::init;
use crate::nn::params::{ParamId, ParamStore};

/// Learnable class-prior pool of shape `(N, l, M_t)`.
#[derive(Debug, Clone)]
pub struct PromptPool {
    pub param: ParamId,
    pub num_classes: usize,
    pub prompt_len: usize,
    pub token_dim: usize,
}

impl PromptPool {
    /// Xavier-uniform per class slice with `fan_in = l`, `fan_out = M_t`;
    /// excluded from weight decay so unused slices stay bit-identical.
    pub fn init(
        store: &mut ParamStore,
        num_classes: usize,
        prompt_len: usize,
        token_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut pool = init::zeros(&[num_classes, prompt_len, token_dim]);
        for i in 0..num_classes {
            let slice = init::xavier_uniform(&[prompt_len, token_dim], prompt_len, token_dim, rng);
            pool.index_axis_mut(ndarray::Axis(0), i).assign(&slice);
        }
        let param = store.add_with("prompts.pool", pool, true, 1.0, false);
        PromptPool {
            param,
            num_classes,
            prompt_len,
            token_dim,
        }
    }

    /// Slice `Z[class_index]` into the graph; gradient flows only into that
    /// slice.
    pub fn select(&self, g: &mut Graph, store: &ParamStore, class_index: usize) -> Result<Var> {
        if class_index >= self.num_classes {
            return Err(Error::Data(format!(
                "class index {} out of range for a pool of {} classes",
                class_index, self.num_classes
            )));
        }
        let pool = g.param(store, self.param);
        Ok(g.index_axis0(pool, class_index))
    }
}

/// One pre-norm cross-attention block with a residual FFN: used in both
/// directions (prompts attend to features, features attend to posterior
/// tokens). Carries exactly two layer-norm parameter sets: one on the block
/// inputs, one between the attention residual and the FFN.
#[derive(Debug, Clone)]
pub struct AttentionBlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_in_gamma: ParamId,
    pub ln_in_beta: ParamId,
    pub ln_mid_gamma: ParamId,
    pub ln_mid_beta: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionBlockParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dim % heads == 0, "token dim must divide head count");
        let ffn = ffn_mult * dim;
        AttentionBlockParams {
            wq: store.add(format!("{name}.wq"), init::xavier_uniform(&[dim, dim], dim, dim, rng), true),
            wk: store.add(format!("{name}.wk"), init::xavier_uniform(&[dim, dim], dim, dim, rng), true),
            wv: store.add(format!("{name}.wv"), init::xavier_uniform(&[dim, dim], dim, dim, rng), true),
            wo: store.add(format!("{name}.wo"), init::xavier_uniform(&[dim, dim], dim, dim, rng), true),
            ln_in_gamma: store.add(format!("{name}.ln_in.g"), init::full(&[dim], 1.0), true),
            ln_in_beta: store.add(format!("{name}.ln_in.b"), init::zeros(&[dim]), true),
            ln_mid_gamma: store.add(format!("{name}.ln_mid.g"), init::full(&[dim], 1.0), true),
            ln_mid_beta: store.add(format!("{name}.ln_mid.b"), init::zeros(&[dim]), true),
            ffn_w1: store.add(format!("{name}.ffn.w1"), init::xavier_uniform(&[dim, ffn], dim, ffn, rng), true),
            ffn_b1: store.add(format!("{name}.ffn.b1"), init::zeros(&[ffn]), true),
            ffn_w2: store.add(format!("{name}.ffn.w2"), init::xavier_uniform(&[ffn, dim], ffn, dim, rng), true),
            ffn_b2: store.add(format!("{name}.ffn.b2"), init::zeros(&[dim]), true),
            heads,
            dim,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.wq, self.wk, self.wv, self.wo,
            self.ln_in_gamma, self.ln_in_beta, self.ln_mid_gamma, self.ln_mid_beta,
            self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2,
        ]
    }
}

const LN_EPS: f64 = 1e-5;

/// Scaled dot-product multi-head cross-attention:
/// `softmax(Q K^T / sqrt(d_k)) V`, heads concatenated and projected.
fn multi_head_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionBlockParams,
    query_src: Var,
    kv_src: Var,
) -> Var {
    let wq = g.param(store, p.wq);
    let wk = g.param(store, p.wk);
    let wv = g.param(store, p.wv);
    let q = g.matmul(query_src, wq);
    let k = g.matmul(kv_src, wk);
    let v = g.matmul(kv_src, wv);
    let dk = p.dim / p.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for hi in 0..p.heads {
        let qh = g.slice_cols(q, hi * dk, dk);
        let kh = g.slice_cols(k, hi * dk, dk);
        let vh = g.slice_cols(v, hi * dk, dk);
        let kt = g.transpose2(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.mul_scalar(scores, scale);
        let attn = g.softmax_rows(scaled);
        heads.push(g.matmul(attn, vh));
    }
    let cat = g.concat_cols(&heads);
    let wo = g.param(store, p.wo);
    g.matmul(cat, wo)
}

fn ffn(g: &mut Graph, store: &ParamStore, p: &AttentionBlockParams, x: Var) -> Var {
    let w1 = g.param(store, p.ffn_w1);
    let b1 = g.param(store, p.ffn_b1);
    let h = g.linear(x, w1, b1);
    let h = g.relu(h);
    let w2 = g.param(store, p.ffn_w2);
    let b2 = g.param(store, p.ffn_b2);
    g.linear(h, w2, b2)
}

fn block(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionBlockParams,
    query: Var,
    kv: Var,
) -> Var {
    let lg = g.param(store, p.ln_in_gamma);
    let lb = g.param(store, p.ln_in_beta);
    let qn = g.layer_norm_rows(query, lg, lb, LN_EPS);
    let kn = g.layer_norm_rows(kv, lg, lb, LN_EPS);
    let attn = multi_head_cross_attention(g, store, p, qn, kn);
    let res = g.add(attn, query);
    let mg = g.param(store, p.ln_mid_gamma);
    let mb = g.param(store, p.ln_mid_beta);
    let mid = g.layer_norm_rows(res, mg, mb, LN_EPS);
    let f = ffn(g, store, p, mid);
    g.add(f, query)
}

/// Absorb image-specific context into the class tokens: the prompt tokens
/// are the query, the (token-projected) student features are key and value.
/// Output keeps the `(l, M_t)` prompt shape.
pub fn aggregate_posterior(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionBlockParams,
    prompt_tokens: Var,
    features: Var,
) -> Result<Var> {
    check_token_dims(g, p, prompt_tokens, features)?;
    Ok(block(g, store, p, prompt_tokens, features))
}

/// Write posterior-token context back into the features: the features are
/// the query, the posterior tokens are key and value. Output keeps the
/// `(n, M_t)` feature shape.
pub fn inject_prompts(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionBlockParams,
    features: Var,
    posterior_tokens: Var,
) -> Result<Var> {
    check_token_dims(g, p, features, posterior_tokens)?;
    Ok(block(g, store, p, features, posterior_tokens))
}

fn check_token_dims(g: &Graph, p: &AttentionBlockParams, a: Var, b: Var) -> Result<()> {
    for v in [a, b] {
        let s = g.shape(v);
        if s.len() != 2 || s[1] != p.dim {
            return Err(Error::Shape(format!(
                "attention block expects (_, {}) tokens, got {s:?}",
                p.dim
            )));
        }
    }
    Ok(())
}

/// Class classifier over the deepest teacher feature: two conv blocks with
/// pooling, then an MLP producing both the routing logits and the posterior
/// feature vector that joins the token concatenation.
#[derive(Debug, Clone)]
pub struct Classifier {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    logits_w: ParamId,
    logits_b: ParamId,
    z0_w: ParamId,
    z0_b: ParamId,
    hidden: usize,
}

impl Classifier {
    pub fn init(store: &mut ParamStore, config: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let cin = *config.channels.last().expect("non-empty channels");
        let h = config.classifier_hidden;
        let n = config.num_classes;
        let mt = config.token_dim;
        Classifier {
            conv1_w: store.add("classifier.conv1.w", init::he_normal(&[h, cin, 3, 3], cin * 9, rng), true),
            conv1_b: store.add("classifier.conv1.b", init::zeros(&[h]), true),
            conv2_w: store.add("classifier.conv2.w", init::he_normal(&[h, h, 3, 3], h * 9, rng), true),
            conv2_b: store.add("classifier.conv2.b", init::zeros(&[h]), true),
            fc_w: store.add("classifier.fc.w", init::xavier_uniform(&[h, h], h, h, rng), true),
            fc_b: store.add("classifier.fc.b", init::zeros(&[h]), true),
            logits_w: store.add("classifier.logits.w", init::xavier_uniform(&[h, n], h, n, rng), true),
            logits_b: store.add("classifier.logits.b", init::zeros(&[n]), true),
            z0_w: store.add("classifier.z0.w", init::xavier_uniform(&[h, mt], h, mt, rng), true),
            z0_b: store.add("classifier.z0.b", init::zeros(&[mt]), true),
            hidden: h,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b,
            self.fc_w, self.fc_b, self.logits_w, self.logits_b, self.z0_w, self.z0_b,
        ]
    }

    /// Returns `(logits (N,), z0 (1, M_t))`.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, deepest: Var) -> (Var, Var) {
        let w1 = g.param(store, self.conv1_w);
        let b1 = g.param(store, self.conv1_b);
        let mut x = g.conv2d(deepest, w1, b1, 1, 1);
        x = g.relu(x);
        if g.shape(x)[1] >= 2 && g.shape(x)[1] % 2 == 0 {
            x = g.avgpool2(x);
        }
        let w2 = g.param(store, self.conv2_w);
        let b2 = g.param(store, self.conv2_b);
        x = g.conv2d(x, w2, b2, 1, 1);
        x = g.relu(x);
        if g.shape(x)[1] >= 2 && g.shape(x)[1] % 2 == 0 {
            x = g.avgpool2(x);
        }
        let pooled = g.global_avg_pool(x);
        let row = g.reshape(pooled, &[1, self.hidden]);
        let fw = g.param(store, self.fc_w);
        let fb = g.param(store, self.fc_b);
        let hidden = g.linear(row, fw, fb);
        let hidden = g.relu(hidden);
        let lw = g.param(store, self.logits_w);
        let lb = g.param(store, self.logits_b);
        let logits_row = g.linear(hidden, lw, lb);
        let n = g.shape(logits_row)[1];
        let logits = g.reshape(logits_row, &[n]);
        let zw = g.param(store, self.z0_w);
        let zb = g.param(store, self.z0_b);
        let z0 = g.linear(hidden, zw, zb);
        (logits, z0)
    }
}

/// Final classification head: global average pooling over the token axis of
/// the concatenated posterior tokens, then a linear map to class logits.
#[derive(Debug, Clone)]
pub struct FinalHead {
    w: ParamId,
    b: ParamId,
}

impl FinalHead {
    pub fn init(store: &mut ParamStore, config: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let mt = config.token_dim;
        let n = config.num_classes;
        FinalHead {
            w: store.add("final_head.w", init::xavier_uniform(&[mt, n], mt, n, rng), true),
            b: store.add("final_head.b", init::zeros(&[n]), true),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    /// `z_cat` is `(T, M_t)`; returns logits `(N,)`.
    pub fn classify_final(&self, g: &mut Graph, store: &ParamStore, z_cat: Var) -> Var {
        let t = g.transpose2(z_cat);
        let gap = g.mean_rows(t); // (M_t,)
        let d = g.shape(gap)[0];
        let row = g.reshape(gap, &[1, d]);
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let logits = g.linear(row, w, b);
        let n = g.shape(logits)[1];
        g.reshape(logits, &[n])
    }
}

/// Cross-entropy against a hard label.
pub fn ce_loss(g: &mut Graph, logits: Var, target: usize) -> Var {
    g.cross_entropy_logits(logits, target)
}

/// Everything prompt-related bundled per model: pool, per-scale channel
/// adapters and blocks, classifier and final head.
#[derive(Debug, Clone)]
pub struct PromptModule {
    pub pool: PromptPool,
    /// Per level: token-space projections into/out of the shared width.
    pub proj_in_w: Vec<ParamId>,
    pub proj_in_b: Vec<ParamId>,
    pub proj_out_w: Vec<ParamId>,
    pub proj_out_b: Vec<ParamId>,
    /// Per level: the context-absorbing block (prompt tokens as query).
    pub aggregate: Vec<AttentionBlockParams>,
    /// Per level above the shallowest-consumed one: the write-back block.
    pub inject: Vec<Option<AttentionBlockParams>>,
    pub classifier: Classifier,
    pub final_head: FinalHead,
}

impl PromptModule {
    pub fn init(store: &mut ParamStore, config: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = PromptPool::init(
            store,
            config.num_classes,
            config.prompt_len,
            config.token_dim,
            &mut rng,
        );
        let m = config.num_levels();
        let mt = config.token_dim;
        let mut proj_in_w = Vec::new();
        let mut proj_in_b = Vec::new();
        let mut proj_out_w = Vec::new();
        let mut proj_out_b = Vec::new();
        let mut aggregate = Vec::new();
        let mut inject = Vec::new();
        for i in 0..m {
            let c = config.channels[i];
            proj_in_w.push(store.add(
                format!("prompts.level{i}.proj_in.w"),
                init::xavier_uniform(&[c, mt], c, mt, &mut rng),
                true,
            ));
            proj_in_b.push(store.add(format!("prompts.level{i}.proj_in.b"), init::zeros(&[mt]), true));
            proj_out_w.push(store.add(
                format!("prompts.level{i}.proj_out.w"),
                init::xavier_uniform(&[mt, c], mt, c, &mut rng),
                true,
            ));
            proj_out_b.push(store.add(format!("prompts.level{i}.proj_out.b"), init::zeros(&[c]), true));
            aggregate.push(AttentionBlockParams::init(
                store,
                &format!("prompts.level{i}.aggregate"),
                mt,
                config.num_heads,
                config.ffn_mult,
                &mut rng,
            ));
            // the shallowest level has no next stage to feed
            inject.push(if i > 0 {
                Some(AttentionBlockParams::init(
                    store,
                    &format!("prompts.level{i}.inject"),
                    mt,
                    config.num_heads,
                    config.ffn_mult,
                    &mut rng,
                ))
            } else {
                None
            });
        }
        let classifier = Classifier::init(store, config, &mut rng);
        let final_head = FinalHead::init(store, config, &mut rng);
        PromptModule {
            pool,
            proj_in_w,
            proj_in_b,
            proj_out_w,
            proj_out_b,
            aggregate,
            inject,
            classifier,
            final_head,
        }
    }

    /// Project a `(C_i, H, W)` student feature into `(n, M_t)` token space.
    pub fn features_to_tokens(&self, g: &mut Graph, store: &ParamStore, level: usize, x: Var) -> Var {
        let tokens = g.chw_to_tokens(x);
        let w = g.param(store, self.proj_in_w[level]);
        let b = g.param(store, self.proj_in_b[level]);
        g.linear(tokens, w, b)
    }

    /// Project `(n, M_t)` tokens back to `(C_i, H, W)`.
    pub fn tokens_to_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        level: usize,
        tokens: Var,
        h: usize,
        w: usize,
    ) -> Var {
        let pw = g.param(store, self.proj_out_w[level]);
        let pb = g.param(store, self.proj_out_b[level]);
        let projected = g.linear(tokens, pw, pb);
        g.tokens_to_chw(projected, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_grad_input;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn toy_block(store: &mut ParamStore, seed: u64) -> AttentionBlockParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionBlockParams::init(store, "blk", 8, 2, 2, &mut rng)
    }

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pool_shape_and_bound() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pool = PromptPool::init(&mut store, 15, 4, 64, &mut rng);
        let v = store.value(pool.param);
        assert_eq!(v.shape(), &[15, 4, 64]);
        let bound = (6.0f64 / 68.0).sqrt();
        assert!(v.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn pool_deterministic_in_seed() {
        let make = |seed| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pool = PromptPool::init(&mut store, 5, 3, 16, &mut rng);
            store.value(pool.param).clone()
        };
        assert_eq!(make(42), make(42));
        assert_ne!(make(42), make(43));
    }

    #[test]
    fn select_returns_exact_slice_and_bounds_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pool = PromptPool::init(&mut store, 15, 4, 8, &mut rng);
        let mut g = Graph::new();
        let z = pool.select(&mut g, &store, 3).unwrap();
        let expected = store
            .value(pool.param)
            .index_axis(ndarray::Axis(0), 3)
            .to_owned();
        assert_eq!(g.value(z).view(), expected.view());
        assert!(pool.select(&mut g, &store, 15).is_err());
    }

    #[test]
    fn block_is_identity_when_attention_and_ffn_are_zeroed() {
        let mut store = ParamStore::new();
        let p = toy_block(&mut store, 1);
        // zero the output projection and the FFN second layer
        store.set_value(p.wo, init::zeros(&[8, 8]));
        store.set_value(p.ffn_w2, init::zeros(&[16, 8]));
        store.set_value(p.ffn_b2, init::zeros(&[8]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = rand_arr(&[3, 8], &mut rng);
        let f0 = rand_arr(&[5, 8], &mut rng);
        let mut g = Graph::new();
        let z = g.constant(z0.clone());
        let f = g.constant(f0);
        let out = aggregate_posterior(&mut g, &store, &p, z, f).unwrap();
        let diff = (g.value(out) - &z0).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "residual identity violated, diff {diff}");
    }

    fn identity_attention(store: &mut ParamStore, seed: u64) -> AttentionBlockParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionBlockParams::init(store, "idattn", 4, 1, 2, &mut rng);
        let eye = ndarray::Array2::<f64>::eye(4).into_dyn();
        store.set_value(p.wq, eye.clone());
        store.set_value(p.wk, eye.clone());
        store.set_value(p.wv, eye.clone());
        store.set_value(p.wo, eye);
        p
    }

    #[test]
    fn single_key_attention_returns_that_value_for_every_query() {
        // one position, identity projections, one head: softmax over a
        // single key is 1, so each output row equals the value vector
        let mut store = ParamStore::new();
        let p = identity_attention(&mut store, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut g = Graph::new();
        let q = g.constant(rand_arr(&[3, 4], &mut rng));
        let kv = g.constant(rand_arr(&[1, 4], &mut rng));
        let kv_val = g.value(kv).clone();
        let attn = multi_head_cross_attention(&mut g, &store, &p, q, kv);
        let out = g.value(attn);
        for row in 0..3 {
            for col in 0..4 {
                assert!((out[[row, col]] - kv_val[[0, col]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_identical_keys_split_attention_evenly() {
        // identical key rows get weight 0.5 each, so the output is the mean
        // of the value rows (= that shared row here)
        let mut store = ParamStore::new();
        let p = identity_attention(&mut store, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut g = Graph::new();
        let q = g.constant(rand_arr(&[2, 4], &mut rng));
        let mut kv0 = ndarray::Array2::<f64>::zeros((2, 4));
        kv0.row_mut(0).assign(&ndarray::arr1(&[1.0, 2.0, 3.0, 4.0]));
        kv0.row_mut(1).assign(&ndarray::arr1(&[1.0, 2.0, 3.0, 4.0]));
        let kv = g.constant(kv0.clone().into_dyn());
        let attn = multi_head_cross_attention(&mut g, &store, &p, q, kv);
        let out = g.value(attn);
        for row in 0..2 {
            for col in 0..4 {
                assert!((out[[row, col]] - kv0[[0, col]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_block_gradients_match_fd() {
        let mut store = ParamStore::new();
        let p = toy_block(&mut store, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z0 = rand_arr(&[2, 8], &mut rng);
        let f0 = rand_arr(&[4, 8], &mut rng);
        let build = |z: &ArrayD<f64>| {
            let mut g = Graph::new();
            let zi = g.leaf(z.clone());
            let fi = g.constant(f0.clone());
            let out = aggregate_posterior(&mut g, &store, &p, zi, fi).unwrap();
            let sq = g.mul(out, out);
            let loss = g.mean_all(sq);
            (g, zi, loss)
        };
        let err = check_grad_input(&build, &z0);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn inject_block_gradients_match_fd() {
        let mut store = ParamStore::new();
        let p = toy_block(&mut store, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z0 = rand_arr(&[2, 8], &mut rng);
        let f0 = rand_arr(&[4, 8], &mut rng);
        let build = |f: &ArrayD<f64>| {
            let mut g = Graph::new();
            let fi = g.leaf(f.clone());
            let zi = g.constant(z0.clone());
            let out = inject_prompts(&mut g, &store, &p, fi, zi).unwrap();
            let sq = g.mul(out, out);
            let loss = g.mean_all(sq);
            (g, fi, loss)
        };
        let err = check_grad_input(&build, &f0);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn final_head_gap_of_identical_tokens_is_that_token() {
        let config = ArchConfig::toy(4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = FinalHead::init(&mut store, &config, &mut rng);
        // all tokens equal v -> GAP equals v -> logits = v W + b
        let v: Vec<f64> = (0..config.token_dim).map(|i| i as f64 * 0.01).collect();
        let mut tokens = ndarray::Array2::<f64>::zeros((5, config.token_dim));
        for mut row in tokens.rows_mut() {
            row.assign(&ndarray::Array1::from(v.clone()));
        }
        let mut g = Graph::new();
        let z = g.constant(tokens.into_dyn());
        let logits = head.classify_final(&mut g, &store, z);
        let w = store.value(head.w);
        let b = store.value(head.b);
        let va = ndarray::Array1::from(v);
        let expect = va.dot(&w.view().into_dimensionality::<ndarray::Ix2>().unwrap())
            + b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for (a, e) in g.value(logits).iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_ce_is_ln_n() {
        let mut g = Graph::new();
        let logits = g.constant(ArrayD::from_elem(IxDyn(&[4]), 0.7));
        let loss = ce_loss(&mut g, logits, 1);
        assert!((g.scalar_value(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_goes_to_zero_with_margin() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0] {
            let mut g = Graph::new();
            let mut l = init::zeros(&[4]);
            l[[2]] = margin;
            let logits = g.constant(l);
            let loss = ce_loss(&mut g, logits, 2);
            let v = g.scalar_value(loss);
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-8);
    }
}
