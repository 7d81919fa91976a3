use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;

use super::{BlockSpec, NetworkConfig, SegnetError};
use crate::ingest::{sample_input, LabelCode, LabelCoding, MfishSample};
use crate::nn::{
    batch_norm, batch_norm_backward, bilinear_upsample, bilinear_upsample_backward, broadcast_backward,
    broadcast_spatial, conv2d, conv2d_backward, dropout, dropout_backward, global_avg_pool,
    global_avg_pool_backward, max_pool, max_pool_backward, relu, relu_backward, BatchNormCache, BatchNormState,
    ConvParams, Float, Mode, NnError, Param, Tensor4,
};

/// conv → optional ReLU → optional batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<F> {
    pub conv: ConvParams<F>,
    pub relu: bool,
    pub bn: Option<BatchNormState<F>>,
}

#[derive(Debug, Clone)]
struct UnitCache<F> {
    input: Tensor4<F>,
    pre_act: Option<Array4<F>>,
    bn: Option<BatchNormCache<F>>,
}

impl<F: Float> ConvUnit<F> {
    fn infer(&self, x: &Tensor4<F>) -> Result<Tensor4<F>, NnError> {
        let mut y = conv2d(x, &self.conv)?;
        if self.relu {
            y = relu(&y);
        }
        if let Some(bn) = &self.bn {
            // infer mode only reads the state
            y = batch_norm(&y, &mut bn.clone(), Mode::Infer)?.0;
        }
        Ok(y)
    }

    fn train(&mut self, x: Tensor4<F>) -> Result<(Tensor4<F>, UnitCache<F>), NnError> {
        let mut y = conv2d(&x, &self.conv)?;
        let mut pre_act = None;
        if self.relu {
            let r = relu(&y);
            pre_act = Some(y.into_values());
            y = r;
        }
        let mut bn_cache = None;
        if let Some(bn) = &mut self.bn {
            let (out, cache) = batch_norm(&y, bn, Mode::Train)?;
            y = out;
            bn_cache = Some(cache);
        }
        Ok((
            y,
            UnitCache {
                input: x,
                pre_act,
                bn: bn_cache,
            },
        ))
    }

    fn backward(&mut self, cache: &UnitCache<F>, grad: Array4<F>) -> Result<Array4<F>, NnError> {
        let mut g = grad;
        if let (Some(bn), Some(c)) = (&mut self.bn, &cache.bn) {
            g = batch_norm_backward(c, bn, &g)?;
        }
        if let Some(pre) = &cache.pre_act {
            g = relu_backward(pre, &g);
        }
        conv2d_backward(&cache.input, &mut self.conv, &g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrontLayer<F> {
    Conv(ConvUnit<F>),
    Pool { size: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum AsppBranch<F> {
    Conv(ConvUnit<F>),
    /// Global average pool → unit → broadcast.
    Pooling(ConvUnit<F>),
}

impl<F> AsppBranch<F> {
    fn unit(&self) -> &ConvUnit<F> {
        match self {
            Self::Conv(u) | Self::Pooling(u) => u,
        }
    }

    fn unit_mut(&mut self) -> &mut ConvUnit<F> {
        match self {
            Self::Conv(u) | Self::Pooling(u) => u,
        }
    }
}

#[derive(Debug, Clone)]
enum FrontCache<F> {
    Conv(UnitCache<F>),
    Pool { input: Tensor4<F>, size: usize, stride: usize },
}

/// Intermediate values of a training-mode forward pass, consumed by
/// [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Trace<F> {
    input_hw: (usize, usize),
    padded_hw: (usize, usize),
    feature_hw: (usize, usize),
    front: Vec<FrontCache<F>>,
    aspp: Vec<UnitCache<F>>,
    branch_channels: Vec<usize>,
    dropout_mask: Option<Array4<F>>,
    fuse: Option<UnitCache<F>>,
    classifier: UnitCache<F>,
}

impl<F> Trace<F> {
    /// Spatial size of the ASPP input, i.e. input size / output stride.
    pub fn feature_hw(&self) -> (usize, usize) {
        self.feature_hw
    }
}

/// The segmentation network: front stages, ASPP, fusion and classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<F> {
    pub config: NetworkConfig,
    pub front: Vec<FrontLayer<F>>,
    pub aspp: Vec<AsppBranch<F>>,
    pub fuse: Option<ConvUnit<F>>,
    /// Final 1×1 conv emitting raw logits (no activation, no batch norm).
    pub classifier: ConvUnit<F>,
}

impl<F: Float> Network<F> {
    /// He-initialised network; deterministic given the rng state.
    pub fn build<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self, SegnetError> {
        config.validate()?;
        let bn = |c| BatchNormState::new(c, config.batch_norm.momentum, config.batch_norm.epsilon);
        let unit = |c_out, c_in, k, d, rng: &mut R, with_bn: bool| -> Result<ConvUnit<F>, NnError> {
            Ok(ConvUnit {
                conv: ConvParams::he_init(c_out, c_in, k, d, rng)?,
                relu: true,
                bn: if with_bn { Some(bn(c_out)?) } else { None },
            })
        };
        let mut channels = config.in_channels;
        let mut front = Vec::new();
        for block in &config.front_stages {
            match *block {
                BlockSpec::Conv {
                    kernel,
                    dilation,
                    filters,
                    repeat,
                } => {
                    for _ in 0..repeat {
                        front.push(FrontLayer::Conv(unit(filters, channels, kernel, dilation, rng, true)?));
                        channels = filters;
                    }
                }
                BlockSpec::MaxPool { size, stride } => front.push(FrontLayer::Pool { size, stride }),
                _ => unreachable!("validated"),
            }
        }
        let mut aspp = Vec::new();
        let mut concat = 0;
        for block in &config.aspp_branches {
            match *block {
                BlockSpec::AsppBranch {
                    kernel,
                    dilation,
                    filters,
                } => {
                    aspp.push(AsppBranch::Conv(unit(filters, channels, kernel, dilation, rng, true)?));
                    concat += filters;
                }
                // No batch norm here: the pooled map has one value per image
                // and channel, so a batch of one image would be degenerate.
                BlockSpec::AsppPooling { filters } => {
                    aspp.push(AsppBranch::Pooling(unit(filters, channels, 1, 1, rng, false)?));
                    concat += filters;
                }
                _ => unreachable!("validated"),
            }
        }
        let mut head_in = concat;
        let fuse = if config.fuse_filters > 0 {
            head_in = config.fuse_filters;
            Some(unit(config.fuse_filters, concat, 1, 1, rng, true)?)
        } else {
            None
        };
        let mut classifier = unit(config.num_classes, head_in, 1, 1, rng, false)?;
        classifier.relu = false;
        Ok(Self {
            config: config.clone(),
            front,
            aspp,
            fuse,
            classifier,
        })
    }

    fn check_input(&self, input: &Tensor4<F>) -> Result<(), SegnetError> {
        let (_, c, _, _) = input.dims();
        if c != self.config.in_channels {
            return Err(NnError::ChannelMismatch {
                expected: self.config.in_channels,
                got: c,
            }
            .into());
        }
        Ok(())
    }

    /// Zero-pads bottom/right so both sides are multiples of the output stride.
    fn pad(&self, input: &Tensor4<F>) -> Tensor4<F> {
        let (n, c, h, w) = input.dims();
        let os = self.config.output_stride;
        let (ph, pw) = (h.div_ceil(os) * os, w.div_ceil(os) * os);
        if (ph, pw) == (h, w) {
            return input.clone();
        }
        let mut padded = Array4::zeros((n, c, ph, pw));
        padded.slice_mut(s![.., .., ..h, ..w]).assign(input.values());
        Tensor4::new(padded).expect("positive dims")
    }

    fn crop(logits: Tensor4<F>, h: usize, w: usize) -> Tensor4<F> {
        let (.., ph, pw) = logits.dims();
        if (ph, pw) == (h, w) {
            return logits;
        }
        Tensor4::new(logits.values().slice(s![.., .., ..h, ..w]).to_owned()).expect("positive dims")
    }

    /// Inference-mode logits (N×classes×H×W). Pure: dropout is inactive and
    /// batch norm uses running statistics.
    pub fn forward(&self, input: &Tensor4<F>) -> Result<Tensor4<F>, SegnetError> {
        self.check_input(input)?;
        let (.., h, w) = input.dims();
        let mut x = self.pad(input);
        let (.., ph, pw) = x.dims();
        for layer in &self.front {
            x = match layer {
                FrontLayer::Conv(u) => u.infer(&x)?,
                FrontLayer::Pool { size, stride } => max_pool(&x, *size, *stride)?,
            };
        }
        let (.., fh, fw) = x.dims();
        let mut branches = Vec::with_capacity(self.aspp.len());
        for branch in &self.aspp {
            branches.push(match branch {
                AsppBranch::Conv(u) => u.infer(&x)?.into_values(),
                AsppBranch::Pooling(u) => broadcast_spatial(&u.infer(&global_avg_pool(&x))?, fh, fw)?.into_values(),
            });
        }
        let mut y = concat(&branches);
        if let Some(u) = &self.fuse {
            y = u.infer(&y)?;
        }
        let logits = self.classifier.infer(&y)?;
        let up = bilinear_upsample(&logits, ph, pw)?;
        Ok(Self::crop(up, h, w))
    }

    /// Training-mode forward: dropout active, batch norm on batch statistics
    /// (running statistics are updated).
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        input: &Tensor4<F>,
        rng: &mut R,
    ) -> Result<(Tensor4<F>, Trace<F>), SegnetError> {
        self.check_input(input)?;
        let (.., h, w) = input.dims();
        let mut x = self.pad(input);
        let (.., ph, pw) = x.dims();
        let mut front = Vec::with_capacity(self.front.len());
        for layer in &mut self.front {
            x = match layer {
                FrontLayer::Conv(u) => {
                    let (y, cache) = u.train(x)?;
                    front.push(FrontCache::Conv(cache));
                    y
                }
                FrontLayer::Pool { size, stride } => {
                    let y = max_pool(&x, *size, *stride)?;
                    front.push(FrontCache::Pool {
                        input: x,
                        size: *size,
                        stride: *stride,
                    });
                    y
                }
            };
        }
        let (.., fh, fw) = x.dims();
        let mut branches = Vec::with_capacity(self.aspp.len());
        let mut aspp = Vec::with_capacity(self.aspp.len());
        for branch in &mut self.aspp {
            let (y, cache) = match branch {
                AsppBranch::Conv(u) => u.train(x.clone())?,
                AsppBranch::Pooling(u) => {
                    let (y, cache) = u.train(global_avg_pool(&x))?;
                    (broadcast_spatial(&y, fh, fw)?, cache)
                }
            };
            branches.push(y.into_values());
            aspp.push(cache);
        }
        let branch_channels = branches.iter().map(|b| b.dim().1).collect();
        let y = concat(&branches);
        drop(branches);
        let (mut y, dropout_mask) = dropout(&y, self.config.dropout_rate, Mode::Train, rng)?;
        let mut fuse = None;
        if let Some(u) = &mut self.fuse {
            let (out, cache) = u.train(y)?;
            y = out;
            fuse = Some(cache);
        }
        let (logits, classifier) = self.classifier.train(y)?;
        let up = bilinear_upsample(&logits, ph, pw)?;
        let trace = Trace {
            input_hw: (h, w),
            padded_hw: (ph, pw),
            feature_hw: (fh, fw),
            front,
            aspp,
            branch_channels,
            dropout_mask,
            fuse,
            classifier,
        };
        Ok((Self::crop(up, h, w), trace))
    }

    /// Back-propagates the gradient of the loss with respect to the logits
    /// returned by [`Network::forward_train`], accumulating parameter
    /// gradients. Returns the gradient with respect to the input.
    pub fn backward(&mut self, trace: Trace<F>, grad_logits: &Array4<F>) -> Result<Array4<F>, SegnetError> {
        let (h, w) = trace.input_hw;
        let (ph, pw) = trace.padded_hw;
        let (n, c, gh, gw) = grad_logits.dim();
        if (gh, gw) != (h, w) || c != self.config.num_classes {
            return Err(NnError::Shape(format!(
                "logit gradient {:?} does not match output ({n}, {}, {h}, {w})",
                grad_logits.shape(),
                self.config.num_classes
            ))
            .into());
        }
        let mut g = Array4::zeros((n, c, ph, pw));
        g.slice_mut(s![.., .., ..h, ..w]).assign(grad_logits);
        let (lh, lw) = trace.feature_hw;
        let g = bilinear_upsample_backward(&g, lh, lw)?;
        let mut g = self.classifier.backward(&trace.classifier, g)?;
        if let (Some(u), Some(cache)) = (&mut self.fuse, &trace.fuse) {
            g = u.backward(cache, g)?;
        }
        let g = dropout_backward(trace.dropout_mask.as_ref(), &g);

        let (fh, fw) = trace.feature_hw;
        let mut g_feat: Option<Array4<F>> = None;
        let mut start = 0;
        for ((branch, cache), &width) in self.aspp.iter_mut().zip(&trace.aspp).zip(&trace.branch_channels) {
            let gb = g.slice(s![.., start..start + width, .., ..]).to_owned();
            start += width;
            let gx = match branch {
                AsppBranch::Conv(u) => u.backward(cache, gb)?,
                AsppBranch::Pooling(u) => {
                    let gp = u.backward(cache, broadcast_backward(&gb))?;
                    global_avg_pool_backward(&gp, fh, fw)
                }
            };
            match &mut g_feat {
                Some(acc) => *acc += &gx,
                None => g_feat = Some(gx),
            }
        }
        let mut g = g_feat.expect("at least one branch");
        for (layer, cache) in self.front.iter_mut().zip(&trace.front).rev() {
            g = match (layer, cache) {
                (FrontLayer::Conv(u), FrontCache::Conv(c)) => u.backward(c, g)?,
                (FrontLayer::Pool { .. }, FrontCache::Pool { input, size, stride }) => {
                    max_pool_backward(input, *size, *stride, &g)?
                }
                _ => unreachable!("trace matches layers"),
            };
        }
        Ok(g.slice(s![.., .., ..h, ..w]).to_owned())
    }

    /// Every conv unit with a stable dotted name, in parameter order.
    pub fn units(&self) -> Vec<(String, &ConvUnit<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.front.iter().enumerate() {
            if let FrontLayer::Conv(u) = layer {
                out.push((format!("front.{i}"), u));
            }
        }
        for (i, b) in self.aspp.iter().enumerate() {
            out.push((format!("aspp.{i}"), b.unit()));
        }
        if let Some(u) = &self.fuse {
            out.push(("fuse".to_string(), u));
        }
        out.push(("classifier".to_string(), &self.classifier));
        out
    }

    pub fn units_mut(&mut self) -> Vec<(String, &mut ConvUnit<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.front.iter_mut().enumerate() {
            if let FrontLayer::Conv(u) = layer {
                out.push((format!("front.{i}"), u));
            }
        }
        for (i, b) in self.aspp.iter_mut().enumerate() {
            out.push((format!("aspp.{i}"), b.unit_mut()));
        }
        if let Some(u) = &mut self.fuse {
            out.push(("fuse".to_string(), u));
        }
        out.push(("classifier".to_string(), &mut self.classifier));
        out
    }

    /// Trainable parameters with names, in optimizer order.
    pub fn named_params(&self) -> Vec<(String, &Param<F>)> {
        let mut out = Vec::new();
        for (name, u) in self.units() {
            out.push((format!("{name}.conv.weight"), &u.conv.weights));
            out.push((format!("{name}.conv.bias"), &u.conv.bias));
            if let Some(bn) = &u.bn {
                out.push((format!("{name}.bn.gamma"), &bn.gamma));
                out.push((format!("{name}.bn.beta"), &bn.beta));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut out = Vec::new();
        for (name, u) in self.units_mut() {
            out.push((format!("{name}.conv.weight"), &mut u.conv.weights));
            out.push((format!("{name}.conv.bias"), &mut u.conv.bias));
            if let Some(bn) = &mut u.bn {
                out.push((format!("{name}.bn.gamma"), &mut bn.gamma));
                out.push((format!("{name}.bn.beta"), &mut bn.beta));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Number of trainable scalars (batch-norm running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Per-pixel class indices of inference logits; ties go to the lowest index.
    pub fn argmax_classes(logits: &Tensor4<F>) -> ndarray::Array3<usize> {
        let (n, c, h, w) = logits.dims();
        let v = logits.values();
        ndarray::Array3::from_shape_fn((n, h, w), |(b, y, x)| {
            let mut best = 0;
            for k in 1..c {
                if v[[b, k, y, x]] > v[[b, best, y, x]] {
                    best = k;
                }
            }
            best
        })
    }

    /// Label map of chromosome codes for one sample.
    pub fn predict_labels(&self, sample: &MfishSample, coding: &LabelCoding) -> Result<Array2<LabelCode>, SegnetError> {
        let logits = self.forward(&sample_input(sample))?;
        let classes = Self::argmax_classes(&logits);
        Ok(classes.index_axis(Axis(0), 0).mapv(|k| coding.chromosome_codes[k]))
    }
}

fn concat<F: Float>(parts: &[Array4<F>]) -> Tensor4<F> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Tensor4::new(ndarray::concatenate(Axis(1), &views).expect("matching branch shapes")).expect("positive dims")
}
