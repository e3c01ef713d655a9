use super::{TrainConfig, TrainError};
use crate::grid::ClassMap;
use crate::metrics::{evaluate_labels, MetricReport};
use crate::model::{ParamSet, PredictionSet, Tensor, VNet};
use crate::volume_io::{assemble_prediction, normalize_intensity, plan_sliding_window, LabelVolume, Volume};

/// Patches evaluated per forward pass.
const WINDOW_BATCH: usize = 4;

/// Whole-volume prediction of every head, their mean and the hard labels.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub pred: PredictionSet,
    pub labels: LabelVolume,
}

impl Prediction {
    pub fn probs(&self) -> &ClassMap {
        &self.pred.mean_probs
    }
}

/// Sliding-window inference. Intensities are normalized first, as for
/// training; overlapping windows are averaged per head.
pub fn predict_volume(
    model: &VNet,
    params: &ParamSet,
    volume: &Volume,
    patch: [usize; 3],
    stride: [usize; 3],
) -> Result<Prediction, TrainError> {
    let grid = plan_sliding_window(volume.shape, patch, stride)?;
    let normalized = normalize_intensity(volume).volume;
    let heads = model.config.num_heads;
    let mut per_head: Vec<Vec<ClassMap>> = vec![Vec::with_capacity(grid.origins.len()); heads];
    for chunk in grid.origins.chunks(WINDOW_BATCH) {
        let crops: Vec<Vec<f32>> = chunk.iter().map(|&o| normalized.crop(o, patch)).collect();
        let refs: Vec<&[f32]> = crops.iter().map(Vec::as_slice).collect();
        for set in model.predict(params, Tensor::from_images(patch, &refs))? {
            for (k, h) in set.head_probs.into_iter().enumerate() {
                per_head[k].push(h);
            }
        }
    }
    let head_probs = per_head
        .iter()
        .map(|p| assemble_prediction(p, &grid, volume.shape))
        .collect::<Result<Vec<_>, _>>()?;
    let pred = PredictionSet::from_heads(head_probs);
    let labels = LabelVolume::new(volume.shape, model.config.num_classes, pred.mean_probs.argmax())?;
    Ok(Prediction { pred, labels })
}

/// Per-(volume, class) metrics of `params` on labeled cases, predicted with
/// the config's patch and inference stride.
pub fn evaluate_cases(
    config: &TrainConfig,
    params: &ParamSet,
    cases: &[(Volume, LabelVolume)],
) -> Result<Vec<(String, usize, MetricReport)>, TrainError> {
    let (model, _) = VNet::init(config.backbone(), 0)?;
    let mut rows = Vec::new();
    for (vol, gt) in cases {
        let p = predict_volume(&model, params, vol, config.patch(), config.stride())?;
        let per_class = evaluate_labels(&p.labels.data, &gt.data, vol.shape, vol.spacing, config.num_classes)?;
        rows.extend(per_class.into_iter().map(|(c, r)| (vol.name.clone(), c, r)));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneConfig;
    use crate::volume_io::VolumeError;

    #[test]
    fn probabilities_normalized_and_single_window_matches_direct() {
        let (model, params) = VNet::init(BackboneConfig::tiny(2), 1).unwrap();
        let data: Vec<f32> = (0..8 * 8 * 8).map(|i| ((i * 13) % 7) as f32).collect();
        let vol = Volume::new("v", [8, 8, 8], data).unwrap();
        let p = predict_volume(&model, &params, &vol, [8, 8, 8], [4, 4, 4]).unwrap();
        for v in 0..p.probs().voxels() {
            assert!((p.probs().voxel(v).iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        let norm = normalize_intensity(&vol).volume;
        let direct = model.predict(&params, Tensor::from_images([8, 8, 8], &[&norm.data])).unwrap();
        assert_eq!(direct[0].mean_probs, p.pred.mean_probs);

        let big = Volume::new("w", [12, 8, 8], vec![0.5; 12 * 64]).unwrap();
        let tiled = predict_volume(&model, &params, &big, [8, 8, 8], [4, 4, 4]).unwrap();
        assert_eq!(tiled.labels.shape, [12, 8, 8]);
        assert!(matches!(
            predict_volume(&model, &params, &vol, [16, 8, 8], [4, 4, 4]),
            Err(TrainError::Volume(VolumeError::PatchLargerThanVolume { .. }))
        ));
    }
}
