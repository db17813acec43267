use std::time::Instant;

use hitlseg::data::{GrayImage, Mask};
use hitlseg::hitl::binarize;
use hitlseg::model::{ModelParams, Prompt, PromptPoint, SegModel};
use hitlseg::uncertainty::inference_uncertainty;

/// Per-session accumulated prompt and its latest prediction.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub image: GrayImage,
    pub concept_id: usize,
    pub modality_id: usize,
    pub initial_points: Vec<PromptPoint>,
    /// Initial points followed by every refinement point, in order.
    pub points: Vec<PromptPoint>,
    pub mask: Mask,
    pub u_vl: f64,
    pub created: Instant,
    pub updated: Instant,
}

impl Session {
    /// Recomputes the mask for the current point list.
    pub fn recompute(&mut self, params: &ModelParams<f32>) -> hitlseg::Result<()> {
        let (mask, u_vl) = infer(params, &self.image, self.concept_id, self.modality_id, &self.points)?;
        self.mask = mask;
        self.u_vl = u_vl;
        self.updated = Instant::now();
        Ok(())
    }
}

/// Binary mask and `u_vl` for one image and point list.
pub fn infer(
    params: &ModelParams<f32>,
    image: &GrayImage,
    concept_id: usize,
    modality_id: usize,
    points: &[PromptPoint],
) -> hitlseg::Result<(Mask, f64)> {
    let model = SegModel::new(params, false);
    let out = model.forward(&image.to_tensor(), &Prompt::points(points.to_vec()), concept_id, modality_id)?;
    let (_, u_vl) = inference_uncertainty(&out.z_img, &out.p, &out.z_bar, 1e-6)?;
    Ok((binarize(&out.p)?, u_vl))
}
