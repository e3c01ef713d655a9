use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{NodeId, ParamSet, Tape};
use super::tensor::Tensor;
use super::ModelError;
use crate::grid::{softmax_channels, voxel_count, ClassMap, Shape3};

pub const NUM_HEADS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_filters: usize,
    /// Number of resolution levels (encoder stages including the bottleneck).
    pub depth: usize,
    pub num_classes: usize,
    pub num_heads: usize,
    /// Decoder stage feeding the prototype head, 1 = coarsest.
    pub prototype_tap: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { in_channels: 1, base_filters: 16, depth: 4, num_classes: 2, num_heads: NUM_HEADS, prototype_tap: 2 }
    }
}

impl BackboneConfig {
    /// Small network used for desk-scale runs on 32^3 patches.
    pub fn tiny(num_classes: usize) -> Self {
        Self { in_channels: 1, base_filters: 8, depth: 3, num_classes, num_heads: NUM_HEADS, prototype_tap: 2 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::BadConfig(m));
        if self.in_channels != 1 {
            return bad(format!("in_channels must be 1, got {}", self.in_channels));
        }
        if self.base_filters < 4 {
            return bad(format!("base_filters must be >= 4, got {}", self.base_filters));
        }
        if self.depth < 2 {
            return bad(format!("depth must be >= 2, got {}", self.depth));
        }
        if self.num_heads != NUM_HEADS {
            return bad(format!("num_heads must be {NUM_HEADS}, got {}", self.num_heads));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(1..=3).contains(&self.prototype_tap) || self.prototype_tap > self.depth - 1 {
            return bad(format!(
                "prototype_tap {} invalid for depth {} (allowed 1..={})",
                self.prototype_tap,
                self.depth,
                (self.depth - 1).min(3)
            ));
        }
        Ok(())
    }

    /// Channel width at encoder level `level` (0 = full resolution).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Channel width of decoder stage `tap` (1 = coarsest decoder stage).
    pub fn tap_channels(&self, tap: usize) -> usize {
        self.level_channels(self.depth - 1 - tap)
    }

    /// Upsampling factor from decoder stage `tap` back to label resolution.
    pub fn tap_factor(&self, tap: usize) -> usize {
        1 << (self.depth - 1 - tap)
    }

    pub fn check_spatial(&self, shape: Shape3) -> Result<(), ModelError> {
        let m = 1 << (self.depth - 1);
        if shape.iter().any(|&s| s == 0 || s % m != 0) {
            return Err(ModelError::BadSpatialSize(format!("{shape:?} not divisible by {m}")));
        }
        Ok(())
    }

    /// Activation float counts for producing label-resolution prototype
    /// features from decoder stage `tap`.
    pub fn prototype_memory(&self, tap: usize, label_shape: Shape3) -> PrototypeMemory {
        let f = self.tap_channels(tap);
        let label = voxel_count(label_shape);
        let factor = self.tap_factor(tap);
        let tap_vox = label / (factor * factor * factor);
        prototype_memory(f, self.num_classes, tap_vox, label)
    }
}

/// Peak live activation floats of the two ways to get prototype features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrototypeMemory {
    /// Upsample the raw `F`-channel tap features to label resolution.
    pub raw_upsample: usize,
    /// Reduce `F -> F/2 -> F/4 -> C` at tap resolution, then upsample `C` channels.
    pub prototype_head: usize,
}

/// Each stage keeps its input and output alive; the peak is the largest stage.
pub fn prototype_memory(f: usize, classes: usize, tap_voxels: usize, label_voxels: usize) -> PrototypeMemory {
    let widths = [f, f / 2, f / 4, classes];
    let conv_peak = widths.windows(2).map(|w| (w[0] + w[1]) * tap_voxels).max().unwrap_or(0);
    let upsample = classes * (tap_voxels + label_voxels);
    PrototypeMemory {
        raw_upsample: f * (tap_voxels + label_voxels),
        prototype_head: conv_peak.max(upsample),
    }
}

/// Per-sample class probabilities of every head plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub head_probs: Vec<ClassMap>,
    pub mean_probs: ClassMap,
}

impl PredictionSet {
    pub fn from_heads(head_probs: Vec<ClassMap>) -> Self {
        let k = head_probs.len() as f64;
        let mut mean = ClassMap::zeros(head_probs[0].shape, head_probs[0].channels);
        for h in &head_probs {
            for (m, p) in mean.data.iter_mut().zip(&h.data) {
                *m += p;
            }
        }
        mean.data.iter_mut().for_each(|m| *m /= k);
        Self { head_probs, mean_probs: mean }
    }
}

/// Node handles produced by one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub head_logits: Vec<NodeId>,
    /// Decoder stages, coarsest first.
    pub decoder: Vec<NodeId>,
    pub prototypes: Option<NodeId>,
}

struct LevelParams {
    down: Option<(usize, usize)>,
    conv: (usize, usize),
}

struct DecoderParams {
    up: (usize, usize),
    conv: (usize, usize),
}

/// Encoder-decoder backbone with residual encoder stages, additive skips,
/// four pointwise classifier heads and a prototype head.
pub struct VNet {
    pub config: BackboneConfig,
    encoder: Vec<LevelParams>,
    decoder: Vec<DecoderParams>,
    heads: Vec<(usize, usize)>,
    proto: [(usize, usize); 3],
}

fn init_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, gain: f64) -> Vec<f32> {
    let bound = (gain / fan_in as f64).sqrt() as f32;
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl VNet {
    /// Builds the layer map and freshly initialized parameters.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<(Self, ParamSet), ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut layer = |ps: &mut ParamSet, name: &str, taps: usize, ci: usize, co: usize, gain: f64| {
            let w = ps.push(format!("{name}.w"), vec![taps, ci, co], init_uniform(&mut rng, taps * ci * co, taps * ci, gain));
            let b = ps.push(format!("{name}.b"), vec![co], vec![0.0; co]);
            (w, b)
        };
        const RELU: f64 = 6.0;
        const LINEAR: f64 = 3.0;
        let c = config.num_classes;

        let mut encoder = Vec::new();
        for l in 0..config.depth {
            let ch = config.level_channels(l);
            let down = (l > 0).then(|| layer(&mut ps, &format!("enc{l}.down"), 8, config.level_channels(l - 1), ch, RELU));
            let cin = if l == 0 { config.in_channels } else { ch };
            let conv = layer(&mut ps, &format!("enc{l}.conv"), 27, cin, ch, RELU);
            encoder.push(LevelParams { down, conv });
        }
        let mut decoder = Vec::new();
        for j in 1..config.depth {
            let l = config.depth - 1 - j;
            let (cin, ch) = (config.level_channels(l + 1), config.level_channels(l));
            let up = layer(&mut ps, &format!("dec{j}.up"), 8, cin, ch, RELU);
            let conv = layer(&mut ps, &format!("dec{j}.conv"), 27, ch, ch, RELU);
            decoder.push(DecoderParams { up, conv });
        }
        let heads = (0..config.num_heads)
            .map(|k| layer(&mut ps, &format!("head{k}"), 1, config.base_filters, c, LINEAR))
            .collect();
        let f = config.tap_channels(config.prototype_tap);
        let proto = [
            layer(&mut ps, "proto.conv1", 27, f, f / 2, RELU),
            layer(&mut ps, "proto.conv2", 27, f / 2, f / 4, RELU),
            layer(&mut ps, "proto.conv3", 27, f / 4, c, LINEAR),
        ];
        Ok((Self { config, encoder, decoder, heads, proto }, ps))
    }

    /// Records the forward pass of `x` (a `[n][h][w][d][1]` batch).
    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId, with_prototypes: bool) -> Result<ForwardNodes, ModelError> {
        let input = tape.value(x);
        if input.channels != self.config.in_channels {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} input channel(s), got {}",
                self.config.in_channels, input.channels
            )));
        }
        self.config.check_spatial(input.shape)?;

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for level in &self.encoder {
            h = match level.down {
                None => {
                    tape.conv3_relu(h, level.conv.0, level.conv.1)?
                }
                Some((dw, db)) => {
                    let d = tape.down_relu(h, dw, db)?;
                    let c = tape.conv3_relu(d, level.conv.0, level.conv.1)?;
                    tape.add(c, d)?
                }
            };
            skips.push(h);
        }
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for (j, stage) in self.decoder.iter().enumerate() {
            let l = self.config.depth - 2 - j;
            let u = tape.up_relu(h, stage.up.0, stage.up.1)?;
            let s = tape.add(u, skips[l])?;
            h = tape.conv3_relu(s, stage.conv.0, stage.conv.1)?;
            decoder.push(h);
        }
        let head_logits = self
            .heads
            .iter()
            .map(|&(w, b)| tape.pointwise(h, w, b))
            .collect::<Result<Vec<_>, _>>()?;
        let prototypes = if with_prototypes {
            Some(self.prototype_head(tape, &decoder, self.config.prototype_tap)?)
        } else {
            None
        };
        Ok(ForwardNodes { head_logits, decoder, prototypes })
    }

    /// Three 3x3x3 convs reducing the tap width to `C`, then trilinear
    /// upsampling to label resolution.
    pub fn prototype_head(&self, tape: &mut Tape<'_>, decoder: &[NodeId], tap: usize) -> Result<NodeId, ModelError> {
        if tap == 0 || tap > decoder.len() {
            return Err(ModelError::BadConfig(format!("prototype tap {tap} outside 1..={}", decoder.len())));
        }
        let feats = decoder[tap - 1];
        let [(w1, b1), (w2, b2), (w3, b3)] = self.proto;
        let p = tape.conv3_relu(feats, w1, b1)?;
        let p = tape.conv3_relu(p, w2, b2)?;
        let p = tape.conv3(p, w3, b3)?;
        Ok(tape.upsample(p, self.config.tap_factor(tap)))
    }

    /// Softmax of every head for each sample in the batch.
    pub fn predictions(&self, tape: &Tape<'_>, nodes: &ForwardNodes) -> Vec<PredictionSet> {
        let batch = tape.value(nodes.head_logits[0]).batch;
        (0..batch)
            .map(|i| {
                let heads = nodes
                    .head_logits
                    .iter()
                    .map(|&id| softmax_channels(&tape.value(id).to_class_map(i)))
                    .collect();
                PredictionSet::from_heads(heads)
            })
            .collect()
    }

    /// Gradient-free inference on a batch of single-channel images.
    pub fn predict(&self, params: &ParamSet, images: Tensor) -> Result<Vec<PredictionSet>, ModelError> {
        let mut tape = Tape::new(params);
        let x = tape.input(images);
        let nodes = self.forward(&mut tape, x, false)?;
        Ok(self.predictions(&tape, &nodes))
    }

    /// Prototype features for a batch without recording gradients.
    pub fn prototype_features(&self, params: &ParamSet, images: Tensor) -> Result<Vec<ClassMap>, ModelError> {
        let mut tape = Tape::new(params);
        let x = tape.input(images);
        let nodes = self.forward(&mut tape, x, true)?;
        let feats = tape.value(nodes.prototypes.expect("requested"));
        Ok((0..feats.batch).map(|i| feats.to_class_map(i)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_images(n: usize, shape: Shape3, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * voxel_count(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_data(n, shape, 1, data)
    }

    #[test]
    fn heads_are_distributions_and_mean_is_average() {
        let (net, ps) = VNet::init(BackboneConfig::tiny(3), 0).unwrap();
        let preds = net.predict(&ps, rand_images(2, [8, 8, 4], 1)).unwrap();
        assert_eq!(preds.len(), 2);
        for p in &preds {
            assert_eq!(p.head_probs.len(), 4);
            for h in &p.head_probs {
                for v in 0..h.voxels() {
                    assert!((h.voxel(v).iter().sum::<f64>() - 1.0).abs() < 1e-5);
                }
            }
            for i in 0..p.mean_probs.data.len() {
                let manual = p.head_probs.iter().map(|h| h.data[i]).sum::<f64>() / 4.0;
                assert!((manual - p.mean_probs.data[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_gives_finite_output() {
        let (net, ps) = VNet::init(BackboneConfig::tiny(2), 3).unwrap();
        let zeros = Tensor::zeros(1, [8, 8, 8], 1);
        let preds = net.predict(&ps, zeros.clone()).unwrap();
        assert!(preds[0].mean_probs.data.iter().all(|v| v.is_finite()));
        let feats = net.prototype_features(&ps, zeros).unwrap();
        assert!(feats[0].data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bad_spatial_size_rejected() {
        let (net, ps) = VNet::init(BackboneConfig::tiny(2), 0).unwrap();
        let err = net.predict(&ps, Tensor::zeros(1, [8, 8, 6], 1)).err().unwrap();
        assert!(matches!(err, ModelError::BadSpatialSize(_)));
    }

    #[test]
    fn prototype_head_outputs_class_channels_at_label_resolution() {
        for depth in [3usize, 4] {
            for tap in 1..depth {
                for classes in [2usize, 3] {
                    let cfg = BackboneConfig { depth, prototype_tap: tap, num_classes: classes, base_filters: 4, ..Default::default() };
                    let (net, ps) = VNet::init(cfg, 0).unwrap();
                    let shape = [8, 8, 8];
                    let feats = net.prototype_features(&ps, rand_images(1, shape, 2)).unwrap();
                    assert_eq!(feats[0].channels, classes);
                    assert_eq!(feats[0].shape, shape);
                }
            }
        }
    }

    #[test]
    fn tap_validation() {
        let cfg = BackboneConfig { prototype_tap: 3, ..BackboneConfig::tiny(2) };
        assert!(matches!(cfg.validate(), Err(ModelError::BadConfig(_))));
        let cfg = BackboneConfig { num_heads: 3, ..BackboneConfig::tiny(2) };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn memory_counts_for_wide_taps() {
        // F = 64 at the coarsest decoder stage of the default backbone.
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.tap_channels(1), 64);
        let m = cfg.prototype_memory(1, [32, 32, 32]);
        let tap_vox = 8 * 8 * 8;
        assert_eq!(m.raw_upsample, 64 * (tap_vox + 32 * 32 * 32));
        assert_eq!(m.prototype_head, 2 * (tap_vox + 32 * 32 * 32));
        assert!(m.prototype_head < m.raw_upsample);
    }
}
