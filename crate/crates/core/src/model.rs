//! Full detector: frozen teacher + bottleneck + prompt machinery + adapter +
//! student decoder, owned by one [`ParamStore`]. The struct knows how to run
//! the training-time forward (losses are assembled in `training`) and the
//! inference forward used by evaluation.

use ndarray::{Array3, Ix3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::arch::{check_mirror, ArchConfig, FeatureMapSet};
use crate::backbone::{Bottleneck, Encoder, Teacher};
use crate::datasets::derive_seed;
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::ParamStore;
use crate::prompts::PromptModule;
use crate::raster::ImageBuf;

/// Which components are active; mirrors the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlags {
    pub use_prompts: bool,
    pub use_adapter: bool,
}

impl Default for ModelFlags {
    fn default() -> Self {
        ModelFlags {
            use_prompts: true,
            use_adapter: true,
        }
    }
}

pub struct RoadsModel {
    pub arch: ArchConfig,
    pub classes: Vec<String>,
    pub flags: ModelFlags,
    pub store: ParamStore,
    pub teacher: Teacher,
    pub bottleneck: Bottleneck,
    pub decoder: Decoder,
    pub prompts: PromptModule,
    pub adapter: Adapter,
}

/// Everything the loss assembly needs from one training-sample forward.
pub struct TrainForward {
    pub teacher_fs: FeatureMapSet,
    pub student_fs: FeatureMapSet,
    /// Routing-classifier logits, present when prompts are on.
    pub zeta_logits: Option<Var>,
    /// Final GAP-head logits over the concatenated posterior tokens.
    pub final_logits: Option<Var>,
    /// Style codes of the normal image and its synthetic-OOD partner.
    pub code_id: Option<Var>,
    pub code_ood: Option<Var>,
}

/// Inference products for one image.
pub struct Inference {
    pub teacher_levels: Vec<Array3<f64>>,
    pub student_levels: Vec<Array3<f64>>,
    /// argmax of the routing classifier (None when prompts are off).
    pub pred_class: Option<usize>,
}

impl RoadsModel {
    pub fn new(
        arch: ArchConfig,
        classes: Vec<String>,
        flags: ModelFlags,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        if classes.len() != arch.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                classes.len(),
                arch.num_classes
            )));
        }
        let mut store = ParamStore::new();
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model.backbone"));
        let teacher = Teacher::init(&mut store, &arch, &mut rng);
        let bottleneck = Bottleneck::init(&mut store, &arch, &mut rng);
        let decoder = Decoder::init(&mut store, &arch, derive_seed(seed, "model.decoder"));
        let prompts = PromptModule::init(&mut store, &arch, derive_seed(seed, "model.prompts"));
        let adapter = Adapter::init(
            &mut store,
            &arch,
            decoder.manifest.adain_channels.clone(),
            derive_seed(seed, "model.adapter"),
        );
        Ok(RoadsModel {
            arch,
            classes,
            flags,
            store,
            teacher,
            bottleneck,
            decoder,
            prompts,
            adapter,
        })
    }

    pub fn image_to_input(&self, image: &ImageBuf) -> Result<Array3<f64>> {
        let s = self.arch.input_size;
        let resized = if image.height() == s && image.width() == s {
            image.clone()
        } else {
            image.resize_bilinear(s, s)
        };
        Ok(resized.to_chw())
    }

    /// Training-time forward for one normal sample. Routing uses the ground
    /// truth label; the OOD partner only matters when the adapter is on.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        x_id: &ImageBuf,
        x_ood: Option<&ImageBuf>,
        class_label: usize,
    ) -> Result<TrainForward> {
        if class_label >= self.arch.num_classes {
            return Err(Error::Data(format!(
                "class label {class_label} out of range {}",
                self.arch.num_classes
            )));
        }
        let img = g.constant(self.image_to_input(x_id)?.into_dyn());
        let teacher_fs = self.teacher.encode(g, &self.store, img)?;
        let phi = self.bottleneck.compress(g, &self.store, &teacher_fs)?;

        let (code_id, code_ood, adain_params) = if self.flags.use_adapter {
            let code_id = self.adapter.style_code(g, &self.store, img)?;
            let ood = x_ood.ok_or_else(|| {
                Error::Data("adapter training needs the synthetic-OOD partner image".into())
            })?;
            let ood_img = g.constant(self.image_to_input(ood)?.into_dyn());
            let code_ood = self.adapter.style_code(g, &self.store, ood_img)?;
            let params = self.adapter.adain_params(g, &self.store, code_id);
            (Some(code_id), Some(code_ood), Some(params))
        } else {
            (None, None, None)
        };

        let prompt_arg = self
            .flags
            .use_prompts
            .then_some((&self.prompts, class_label));
        let (student_fs, zs) =
            self.decoder
                .decode(g, &self.store, phi, prompt_arg, adain_params.as_deref())?;
        check_mirror(g, &teacher_fs, &student_fs)?;

        let (zeta_logits, final_logits) = if self.flags.use_prompts {
            let deepest = *teacher_fs.levels.last().expect("non-empty pyramid");
            let (logits, z0) = self.prompts.classifier.classify(g, &self.store, deepest);
            let mut rows = vec![z0];
            rows.extend(zs.iter().copied());
            let z_cat = g.concat_rows(&rows);
            let final_logits = self.prompts.final_head.classify_final(g, &self.store, z_cat);
            (Some(logits), Some(final_logits))
        } else {
            (None, None)
        };

        Ok(TrainForward {
            teacher_fs,
            student_fs,
            zeta_logits,
            final_logits,
            code_id,
            code_ood,
        })
    }

    /// Inference forward: routing via the classifier argmax, style from the
    /// test image itself, no parameter updates anywhere.
    pub fn infer(&self, image: &ImageBuf) -> Result<Inference> {
        let mut g = Graph::new();
        let img = g.constant(self.image_to_input(image)?.into_dyn());
        let teacher_fs = self.teacher.encode(&mut g, &self.store, img)?;
        let phi = self.bottleneck.compress(&mut g, &self.store, &teacher_fs)?;

        let adain_params = if self.flags.use_adapter {
            let code = self.adapter.style_code(&mut g, &self.store, img)?;
            Some(self.adapter.adain_params(&mut g, &self.store, code))
        } else {
            None
        };

        let pred_class = if self.flags.use_prompts {
            let deepest = *teacher_fs.levels.last().expect("non-empty pyramid");
            let (logits, _z0) = self.prompts.classifier.classify(&mut g, &self.store, deepest);
            Some(argmax(g.value(logits).iter().copied()))
        } else {
            None
        };

        let prompt_arg = pred_class.map(|c| (&self.prompts, c));
        let (student_fs, _zs) =
            self.decoder
                .decode(&mut g, &self.store, phi, prompt_arg, adain_params.as_deref())?;
        check_mirror(&g, &teacher_fs, &student_fs)?;

        let grab = |fs: &FeatureMapSet| -> Vec<Array3<f64>> {
            fs.levels
                .iter()
                .map(|&v| {
                    g.value(v)
                        .view()
                        .into_dimensionality::<Ix3>()
                        .expect("3-d level")
                        .to_owned()
                })
                .collect()
        };
        Ok(Inference {
            teacher_levels: grab(&teacher_fs),
            student_levels: grab(&student_fs),
            pred_class,
        })
    }

    /// Classifier argmax for one image (used for the accuracy check).
    pub fn classify_image(&self, image: &ImageBuf) -> Result<usize> {
        if !self.flags.use_prompts {
            return Err(Error::Config(
                "classification requires the prompt component".into(),
            ));
        }
        let mut g = Graph::new();
        let img = g.constant(self.image_to_input(image)?.into_dyn());
        let teacher_fs = self.teacher.encode(&mut g, &self.store, img)?;
        let deepest = *teacher_fs.levels.last().expect("non-empty pyramid");
        let (logits, _) = self.prompts.classifier.classify(&mut g, &self.store, deepest);
        Ok(argmax(g.value(logits).iter().copied()))
    }
}

pub(crate) fn argmax(iter: impl Iterator<Item = f64>) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in iter.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(flags: ModelFlags) -> RoadsModel {
        let arch = ArchConfig::toy(3);
        let classes = vec!["a".into(), "b".into(), "c".into()];
        RoadsModel::new(arch, classes, flags, 5).unwrap()
    }

    fn image() -> ImageBuf {
        let mut img = ImageBuf::zeros(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                img.data[[y, x, 0]] = ((x * 3 + y) % 13) as f64 / 13.0;
                img.data[[y, x, 1]] = ((x + y * 5) % 7) as f64 / 7.0;
                img.data[[y, x, 2]] = 0.4;
            }
        }
        img
    }

    #[test]
    fn full_forward_produces_all_heads() {
        let model = toy_model(ModelFlags::default());
        let mut g = Graph::new();
        let fwd = model
            .forward_train(&mut g, &image(), Some(&image()), 1)
            .unwrap();
        assert!(fwd.zeta_logits.is_some());
        assert!(fwd.final_logits.is_some());
        assert!(fwd.code_id.is_some());
        assert_eq!(g.shape(fwd.final_logits.unwrap()), &[3]);
    }

    #[test]
    fn kd_only_forward_skips_heads() {
        let model = toy_model(ModelFlags {
            use_prompts: false,
            use_adapter: false,
        });
        let mut g = Graph::new();
        let fwd = model.forward_train(&mut g, &image(), None, 0).unwrap();
        assert!(fwd.zeta_logits.is_none());
        assert!(fwd.code_id.is_none());
        assert_eq!(fwd.teacher_fs.levels.len(), 3);
    }

    #[test]
    fn infer_is_deterministic_and_mirrored() {
        let model = toy_model(ModelFlags::default());
        let a = model.infer(&image()).unwrap();
        let b = model.infer(&image()).unwrap();
        for (x, y) in a.student_levels.iter().zip(&b.student_levels) {
            assert_eq!(x, y);
        }
        for (t, s) in a.teacher_levels.iter().zip(&a.student_levels) {
            assert_eq!(t.dim(), s.dim());
        }
        assert!(a.pred_class.unwrap() < 3);
    }

    #[test]
    fn label_out_of_range_is_error() {
        let model = toy_model(ModelFlags::default());
        let mut g = Graph::new();
        assert!(model.forward_train(&mut g, &image(), Some(&image()), 3).is_err());
    }
}
