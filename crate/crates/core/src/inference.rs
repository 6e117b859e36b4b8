//! Single-image inference with a trained generator.

use std::path::Path;

use facefill_autodiff::Tensor;

use crate::checkpoint::load_generator;
use crate::data::{resize, Image, LandmarkSet};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, composite_output, Mask};
use crate::metrics::Inpainter;
use crate::network::{generator_forward, init_generator, Ctx, GeneratorConfig, ParamStore};

/// Immutable generator weights ready for inference.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    cfg: GeneratorConfig,
    params: ParamStore,
    id: String,
}

#[derive(Clone, Debug)]
pub struct InpaintResult {
    /// Composited or raw output at the working resolution.
    pub output: Image,
    pub raw: Image,
    /// Input resized to the working resolution.
    pub input: Image,
    pub mask: Mask,
    /// Predicted points in working-resolution pixels.
    pub landmarks: Option<LandmarkSet>,
    /// Working size divided by original size, `[x, y]`.
    pub scale: [f32; 2],
}

impl InferenceModel {
    pub fn new(cfg: GeneratorConfig, params: ParamStore, id: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        init_generator(&cfg, 0)?.check_compatible(&params)?;
        Ok(InferenceModel { cfg, params, id: id.into() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, params, id) = load_generator(path)?;
        Ok(InferenceModel { cfg, params, id })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Resizes `image` and `mask` to the working side, fills the holes and
    /// predicts landmarks. `image` and `mask` must have equal dimensions.
    pub fn run(&self, image: &Image, mask: &Mask, composite: bool) -> Result<InpaintResult> {
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(Error::Argument(format!(
                "image is {}×{} but mask is {}×{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        let side = self.cfg.input_side;
        let input = resize(&image.to_rgb(), side, side)?;
        let mask = mask.resize(side, side)?;
        let masked = apply_mask(&input, &mask)?;
        let mut ctx = Ctx::new().with(&self.params, false);
        let masked_t = Tensor::new(&[1, 3, side, side], masked.to_chw())?;
        let mask_t = Tensor::new(&[1, 1, side, side], mask.as_f32())?;
        let out = generator_forward(&mut ctx, &self.cfg, masked_t, mask_t)?;
        let raw_t = ctx.g.value(out.raw);
        if !raw_t.all_finite() {
            return Err(Error::NonFinite("generator output".into()));
        }
        let raw = Image::from_chw(3, side, side, raw_t.data())?;
        let landmarks = out.landmarks(&ctx)?.map(|mut v| v.remove(0));
        let output = if composite { composite_output(&raw, &input, &mask)? } else { raw.clone() };
        let scale = [side as f32 / image.width() as f32, side as f32 / image.height() as f32];
        Ok(InpaintResult { output, raw, input, mask, landmarks, scale })
    }
}

impl Inpainter for InferenceModel {
    fn inpaint(&self, image: &Image, mask: &Mask) -> Result<Image> {
        Ok(self.run(image, mask, true)?.output)
    }
}
