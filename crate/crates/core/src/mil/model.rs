//! Scaled-down weakly labeled attention network.
//!
//! The topology keeps the original block pattern at desk scale:
//!
//! ```text
//! [D × F] ─ conv(k, same) ─ ReLU ─ maxpool(p₁) ─ … ─ conv(k, same) ─ ReLU ─ maxpool(pₙ)
//!         ─ segment conv (kernel s, no padding) ─ ReLU          → embeddings [E × K]
//!         ─ 1×1 conv ─ ReLU ─ … ─ 1×1 conv to C ─ sigmoid       → segment scores S [C × K]
//!         ─ pooling g(S)                                         → bag prediction o [C]
//! ```
//!
//! With `hop = Π pᵢ` every segment covers `s · hop` input frames and
//! consecutive segments are `hop` frames apart, so a bag of `F` frames yields
//! `K = ⌊(F − s·hop) / hop⌋ + 1` segments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Conv1dGeometry, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Conv1d;
use crate::mil::bag::Bag;
use crate::mil::pooling::{PoolingMode, PooledPrediction, SegmentScores};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockConfig {
    pub channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub n_classes: usize,
    pub conv_blocks: Vec<ConvBlockConfig>,
    pub segment_kernel: usize,
    pub embedding_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub pooling: PoolingMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            n_classes: 8,
            conv_blocks: vec![
                ConvBlockConfig {
                    channels: 16,
                    kernel: 3,
                    pool: 4,
                },
                ConvBlockConfig {
                    channels: 32,
                    kernel: 3,
                    pool: 8,
                },
            ],
            segment_kernel: 3,
            embedding_dim: 64,
            hidden_dims: vec![32],
            pooling: PoolingMode::Attention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::InvalidGeometry { op: "model", detail });
        if self.feature_dim == 0 || self.n_classes == 0 || self.embedding_dim == 0 {
            return bad("feature_dim, n_classes and embedding_dim must be positive".into());
        }
        if self.segment_kernel == 0 {
            return bad("segment_kernel must be positive".into());
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.channels == 0 || b.pool == 0 || b.kernel % 2 == 0 {
                return bad(format!(
                    "conv block {i}: channels and pool must be positive and the kernel odd"
                ));
            }
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    /// Frames between consecutive segments.
    pub fn hop(&self) -> usize {
        self.conv_blocks.iter().map(|b| b.pool).product()
    }

    /// Frames covered by one segment.
    pub fn receptive_field(&self) -> usize {
        self.segment_kernel * self.hop()
    }

    /// Segment count for a bag of `frames`, `None` if the bag is too short.
    pub fn segments(&self, frames: usize) -> Option<usize> {
        let rf = self.receptive_field();
        (frames >= rf).then(|| (frames - rf) / self.hop() + 1)
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[batch × E × K]`
    pub embeddings: Var,
    /// `[batch × C × K]`
    pub segment_scores: Var,
    /// `[batch × C]`
    pub pooled: Var,
}

/// Per-bag outputs pulled out of the graph.
#[derive(Debug, Clone)]
pub struct BagOutput {
    pub segment_scores: SegmentScores,
    pub pooled: PooledPrediction,
    /// `[E × K]`
    pub segment_embeddings: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeaNet {
    config: ModelConfig,
    params: ParamSet,
    blocks: Vec<(Conv1d, usize)>,
    segment: Conv1d,
    hidden: Vec<Conv1d>,
    predictor: Conv1d,
    attention: Option<ParamId>,
}

impl WeaNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut channels = config.feature_dim;
        let mut blocks = Vec::with_capacity(config.conv_blocks.len());
        for (i, b) in config.conv_blocks.iter().enumerate() {
            // "same" length via edge padding, applied in the graph
            let geom = Conv1dGeometry::default();
            let conv = Conv1d::new(
                &mut params,
                &format!("block{i}"),
                channels,
                b.channels,
                b.kernel,
                geom,
                Activation::Relu,
                &mut rng,
            );
            blocks.push((conv, b.pool));
            channels = b.channels;
        }
        let segment = Conv1d::new(
            &mut params,
            "segment",
            channels,
            config.embedding_dim,
            config.segment_kernel,
            Conv1dGeometry::default(),
            Activation::Relu,
            &mut rng,
        );
        channels = config.embedding_dim;
        let mut hidden = Vec::with_capacity(config.hidden_dims.len());
        for (i, &h) in config.hidden_dims.iter().enumerate() {
            hidden.push(Conv1d::new(
                &mut params,
                &format!("hidden{i}"),
                channels,
                h,
                1,
                Conv1dGeometry::default(),
                Activation::Relu,
                &mut rng,
            ));
            channels = h;
        }
        let predictor = Conv1d::new(
            &mut params,
            "predictor",
            channels,
            config.n_classes,
            1,
            Conv1dGeometry::default(),
            Activation::Sigmoid,
            &mut rng,
        );
        let attention = (config.pooling == PoolingMode::Attention)
            .then(|| params.add("attention", Tensor::zeros(&[config.n_classes, config.n_classes])));
        Ok(Self {
            config,
            params,
            blocks,
            segment,
            hidden,
            predictor,
            attention,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn attention_param(&self) -> Option<ParamId> {
        self.attention
    }

    pub fn predictor(&self) -> &Conv1d {
        &self.predictor
    }

    /// Stacks bags of equal length into `[batch × D × F]`.
    pub fn batch_input(&self, bags: &[&Bag]) -> Result<Tensor> {
        let first = bags.first().ok_or(Error::Empty("batch"))?;
        let (frames, dim) = (first.frames(), first.feature_dim());
        if dim != self.config.feature_dim {
            return Err(Error::FeatureDimMismatch {
                expected: self.config.feature_dim,
                found: dim,
            });
        }
        if self.config.segments(frames).is_none() {
            return Err(Error::InvalidGeometry {
                op: "weanet_forward",
                detail: format!(
                    "bag of {frames} frames is shorter than the {}-frame receptive field",
                    self.config.receptive_field()
                ),
            });
        }
        let mut data = vec![0.0; bags.len() * dim * frames];
        for (bi, bag) in bags.iter().enumerate() {
            if bag.features.shape() != [frames, dim] {
                return Err(Error::shape("batch_input", &[frames, dim], bag.features.shape()));
            }
            let out = &mut data[bi * dim * frames..][..dim * frames];
            for (t, row) in bag.features.data().chunks_exact(dim).enumerate() {
                for (d, &v) in row.iter().enumerate() {
                    out[d * frames + t] = v;
                }
            }
        }
        Tensor::new(vec![bags.len(), dim, frames], data)
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Forward> {
        let p = &self.params;
        let mut h = x;
        for (i, (conv, pool)) in self.blocks.iter().enumerate() {
            h = g.pad_edge(h, self.config.conv_blocks[i].kernel / 2)?;
            h = conv.forward(g, p, h)?;
            h = g.max_pool1d(h, *pool, *pool)?;
        }
        let embeddings = self.segment.forward(g, p, h)?;
        let mut h = embeddings;
        for layer in &self.hidden {
            h = layer.forward(g, p, h)?;
        }
        let segment_scores = self.predictor.forward(g, p, h)?;
        let pooled = match self.config.pooling {
            PoolingMode::Attention => {
                let w = g.param(p, self.attention.expect("attention parameter"));
                g.attention_pool(segment_scores, w)?
            }
            PoolingMode::Mean => g.segment_mean(segment_scores)?,
            PoolingMode::Max => g.segment_max(segment_scores)?,
        };
        Ok(Forward {
            embeddings,
            segment_scores,
            pooled,
        })
    }

    /// Full per-bag forward pass.
    pub fn forward_bag(&self, bag: &Bag) -> Result<BagOutput> {
        let mut g = Graph::new();
        let x = g.input(self.batch_input(&[bag])?);
        let fwd = self.forward_graph(&mut g, x)?;
        let c = self.config.n_classes;
        let s = g.value(fwd.segment_scores);
        let k = s.dim(2);
        let scores = Tensor::new(vec![c, k], s.data().to_vec())?;
        let output = g.value(fwd.pooled).data().to_vec();
        let attention = match self.config.pooling {
            PoolingMode::Attention => {
                let a = g.attention_weights(fwd.pooled).expect("attention node");
                Tensor::new(vec![c, k], a.data().to_vec())?
            }
            PoolingMode::Mean => Tensor::full(&[c, k], 1.0 / k as f64),
            PoolingMode::Max => {
                let mut a = Tensor::zeros(&[c, k]);
                for ci in 0..c {
                    let row = scores.row(ci);
                    let best = (0..k).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                    a.data_mut()[ci * k + best] = 1.0;
                }
                a
            }
        };
        let e = g.value(fwd.embeddings);
        let segment_embeddings = Tensor::new(vec![e.dim(1), k], e.data().to_vec())?;
        Ok(BagOutput {
            segment_scores: SegmentScores::new(scores)?,
            pooled: PooledPrediction { output, attention },
            segment_embeddings,
        })
    }

    /// Bag-level predictions for every bag, in order.
    pub fn predict(&self, bags: &[Bag]) -> Result<Vec<Vec<f64>>> {
        self.map_batches(bags, |g, fwd| g.value(fwd.pooled).clone())
    }

    /// Segment embeddings max-pooled across segments, one vector per bag.
    pub fn extract_embeddings(&self, bags: &[Bag]) -> Result<Vec<Vec<f64>>> {
        self.map_batches(bags, |g, fwd| {
            let e = g.value(fwd.embeddings);
            let (b, d, k) = (e.dim(0), e.dim(1), e.dim(2));
            let data = e
                .data()
                .chunks_exact(k)
                .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            Tensor::new(vec![b, d], data).expect("embedding shape")
        })
    }

    fn map_batches(
        &self,
        bags: &[Bag],
        extract: impl Fn(&Graph, &Forward) -> Tensor,
    ) -> Result<Vec<Vec<f64>>> {
        const EVAL_BATCH: usize = 64;
        let mut out = Vec::with_capacity(bags.len());
        for group in equal_length_runs(bags, EVAL_BATCH) {
            let refs: Vec<&Bag> = group.iter().collect();
            let mut g = Graph::new();
            let x = g.input(self.batch_input(&refs)?);
            let fwd = self.forward_graph(&mut g, x)?;
            let t = extract(&g, &fwd);
            let w = t.dim(1);
            out.extend(t.data().chunks_exact(w).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Replaces all parameter values, checking names and shapes.
    pub fn load_params(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::ArchitectureMismatch {
                detail: format!("expected {} parameters, found {}", self.params.len(), values.len()),
            });
        }
        for (id, (name, value)) in self.params.ids().collect::<Vec<_>>().into_iter().zip(values) {
            let expected = &self.params.param(id).name;
            if *expected != name {
                return Err(Error::ArchitectureMismatch {
                    detail: format!("expected parameter {expected}, found {name}"),
                });
            }
            self.params.set_value(id, value).map_err(|_| Error::ArchitectureMismatch {
                detail: format!("parameter {name} has the wrong shape"),
            })?;
        }
        Ok(())
    }
}

/// Splits `bags` into consecutive runs of equal frame count, at most `max` long.
pub(crate) fn equal_length_runs(bags: &[Bag], max: usize) -> Vec<&[Bag]> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=bags.len() {
        if i == bags.len() || i - start == max || bags[i].frames() != bags[start].frames() {
            if i > start {
                runs.push(&bags[start..i]);
            }
            start = i;
        }
    }
    runs
}
