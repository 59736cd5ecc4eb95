use rayon::prelude::*;

use super::vote::{tile, MaskRaster, VoteGrid};
use super::InferenceError;
use crate::datapipe::ScenePair;
use crate::network::{Network, Prediction};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneOutput {
    pub damage: MaskRaster,
    /// Row-major building masks.
    pub seg_pre: Vec<bool>,
    pub seg_post: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

fn window(img: &image::RgbImage, (row, col): (usize, usize), p: usize) -> Tensor<f32> {
    let w = img.width() as usize;
    let raw = img.as_raw();
    Tensor::from_fn(vec![3, p, p], |i| {
        let (c, r, x) = (i / (p * p), (i / p) % p, i % p);
        f32::from(raw[((row + r) * w + col + x) * 3 + c]) / 255.0
    })
}

/// Tiles both frames identically, runs the network per window in eval mode
/// and fuses the windows: summed-probability argmax for damage, mean
/// probability ≥ 0.5 for buildings.
pub fn predict_scene(
    net: &Network,
    scene: &ScenePair,
    stride: usize,
    batch_size: usize,
) -> Result<SceneOutput, InferenceError> {
    let p = net.config().input_size;
    let (h, w) = scene.extent();
    let origins = tile(h, w, p, stride)?;
    let classes = net.config().num_damage_classes;
    let mut damage = VoteGrid::new(classes, h, w);
    let mut seg = [VoteGrid::new(1, h, w), VoteGrid::new(1, h, w)];
    let batch_size = batch_size.max(1);
    let group = batch_size * rayon::current_num_threads();
    for chunk in origins.chunks(group) {
        let preds = chunk
            .par_chunks(batch_size)
            .map(|batch| -> Result<Prediction, InferenceError> {
                let pre: Vec<Tensor<f32>> = batch.iter().map(|&o| window(&scene.pre, o, p)).collect();
                let post: Vec<Tensor<f32>> = batch.iter().map(|&o| window(&scene.post, o, p)).collect();
                let pre = Tensor::stack(&pre.iter().collect::<Vec<_>>()).expect("equal windows");
                let post = Tensor::stack(&post.iter().collect::<Vec<_>>()).expect("equal windows");
                Ok(net.predict(&pre, &post)?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        for (batch, pred) in chunk.chunks(batch_size).zip(&preds) {
            for (i, &origin) in batch.iter().enumerate() {
                damage.add(origin, p, pred.damage.outer(i))?;
                seg[0].add(origin, p, pred.seg_pre.outer(i))?;
                seg[1].add(origin, p, pred.seg_post.outer(i))?;
            }
        }
    }
    let threshold = |g: &VoteGrid| -> Result<Vec<bool>, InferenceError> { Ok(g.mean(0)?.iter().map(|&v| v >= 0.5).collect()) };
    Ok(SceneOutput {
        damage: damage.finalize()?,
        seg_pre: threshold(&seg[0])?,
        seg_post: threshold(&seg[1])?,
        height: h,
        width: w,
    })
}
