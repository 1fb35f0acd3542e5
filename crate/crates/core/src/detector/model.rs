use std::collections::HashSet;

use crate::blocks::{Conv, MbConv, MbConvSpec, SE_RATIO};
use crate::error::{Result, SacError};
use crate::geometry::{same_padding, GeometryQuery};
use crate::kernels::{ConvSpec, Pad2d};
use crate::params::{seeded_rng, Builder, Graph, Init, ParamStore};
use crate::real::Real;
use crate::tape::{sigmoid, Var};
use crate::tensor::Tensor;

use super::anchors::{generate_anchors, Anchor, LevelGeometry};
use super::bifpn::Bifpn;
use super::boxes::{decode, Detection};
use super::config::ModelConfig;
use super::nms::nms;

/// Prior probability encoded in the initial class-head bias.
const CLASS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug)]
struct Head {
    tower: Conv,
    cls: Conv,
    reg: Conv,
}

/// Stem, MBConv stages, lateral 1x1s, pyramid fusion and shared heads.
#[derive(Clone, Debug)]
pub struct Detector<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    stem: Conv,
    stages: Vec<Vec<MbConv>>,
    laterals: Vec<Conv>,
    fpn: Bifpn,
    head: Head,
}

impl<T: Real> Detector<T> {
    /// Builds the architecture with deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed, 0);
        let mut b = Builder::new(&mut store, &mut rng);

        let stem = b.scoped("stem", |b| {
            Conv::new(
                b,
                "conv",
                config.in_channels,
                config.stem_channels,
                3,
                ConvSpec::default().with_stride(ModelConfig::STEM_STRIDE),
                None,
                Some(Init::Zeros),
            )
        })?;

        let mut stages = Vec::with_capacity(config.stages.len());
        let mut c_in = config.stem_channels;
        for (i, st) in config.stages.iter().enumerate() {
            let mut blocks = Vec::with_capacity(st.repeats);
            for j in 0..st.repeats {
                let spec = MbConvSpec {
                    c_in,
                    c_out: st.channels,
                    kernel: st.kernel,
                    stride: if j == 0 { st.stride } else { 1 },
                    expand: st.expand,
                    core: config.stage_cores[i],
                    context: config.context,
                    rate: config.rate,
                    activation: config.activation,
                    se_ratio: SE_RATIO,
                };
                let block = b.scoped(&format!("stage{i}"), |b| b.scoped(&format!("block{j}"), |b| MbConv::new(b, spec)))?;
                blocks.push(block);
                c_in = st.channels;
            }
            stages.push(blocks);
        }

        let n = config.stages.len();
        let width = config.fpn_width;
        let (laterals, fpn) = b.scoped("fpn", |b| -> Result<_> {
            let laterals = (0..3)
                .map(|l| {
                    let c = config.stages[n - 3 + l].channels;
                    Conv::pointwise(b, &format!("lateral{l}"), c, width, None, Init::Zeros)
                })
                .collect::<Result<Vec<_>>>()?;
            let fpn = Bifpn::new(b, width, 3, config.fpn_passes)?;
            Ok((laterals, fpn))
        })?;

        let a = config.anchors_per_cell();
        let k = config.num_classes;
        let pad1 = ConvSpec::default().with_padding(Pad2d::uniform(1));
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        let head = b.scoped("head", |b| -> Result<_> {
            Ok(Head {
                tower: Conv::new(b, "tower", width, width, 3, pad1, None, Some(Init::Zeros))?,
                cls: Conv::new(b, "cls", width, a * k, 3, pad1, Some(Init::Normal(0.01)), Some(Init::Const(prior)))?,
                reg: Conv::new(b, "box", width, a * 4, 3, pad1, Some(Init::Normal(0.01)), Some(Init::Zeros))?,
            })
        })?;

        Ok(Self {
            config,
            store,
            stem,
            stages,
            laterals,
            fpn,
            head,
        })
    }

    /// Builds the architecture and loads `store`, which must contain exactly
    /// the parameters the architecture declares.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected: HashSet<&str> = model.store.iter().map(|p| p.name.as_str()).collect();
        for p in store.iter() {
            if !expected.contains(p.name.as_str()) {
                return Err(SacError::Invalid(format!("unexpected tensor {} for this architecture", p.name)));
            }
        }
        for p in model.store.iter() {
            if store.by_name(&p.name).is_none() {
                return Err(SacError::Invalid(format!("missing tensor {}", p.name)));
            }
        }
        model.store.copy_from(&store)?;
        Ok(model)
    }

    pub fn stages(&self) -> &[Vec<MbConv>] {
        &self.stages
    }

    pub fn level_geometry(&self) -> Vec<LevelGeometry> {
        self.config
            .level_strides()
            .into_iter()
            .map(|s| LevelGeometry {
                height: self.config.input_size / s,
                width: self.config.input_size / s,
                stride: s,
            })
            .collect()
    }

    pub fn anchors(&self) -> Vec<Anchor> {
        generate_anchors(&self.level_geometry(), &self.config.anchor_ratios, self.config.anchor_base)
    }

    fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        let s = self.config.input_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(SacError::shape(
                "detector",
                format!("expected (N,{},{s},{s}) images, got {shape:?}", self.config.in_channels),
            ));
        }
        Ok(())
    }

    /// Stem and stages; returns the outputs of the last three stages.
    pub fn backbone(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let [_, _, h, w] = g.tape.shape(x);
        let top = *self.config.level_strides().last().unwrap();
        if h % top != 0 || w % top != 0 {
            return Err(SacError::Invalid(format!(
                "input {h}x{w} is not divisible by the coarsest pyramid stride {top}"
            )));
        }
        let mut spec = self.stem.spec;
        let (t, bt) = same_padding(&GeometryQuery::new(3, 1, ModelConfig::STEM_STRIDE, h)?)?;
        let (l, r) = same_padding(&GeometryQuery::new(3, 1, ModelConfig::STEM_STRIDE, w)?)?;
        spec.padding = Pad2d {
            top: t,
            bottom: bt,
            left: l,
            right: r,
        };
        let (sw, sb) = (g.p(self.stem.weight), self.stem.bias.map(|b| g.p(b)));
        let mut h = g.tape.conv2d(x, sw, sb, spec)?;
        h = self.config.activation.apply(g, h);
        let mut outs = Vec::with_capacity(self.stages.len());
        for blocks in &self.stages {
            for block in blocks {
                h = block.forward(g, h)?;
            }
            outs.push(h);
        }
        Ok(outs.split_off(outs.len() - 3))
    }

    /// Lateral projections to the pyramid width followed by fusion.
    pub fn neck(&self, g: &mut Graph<T>, features: &[Var]) -> Result<Vec<Var>> {
        let lat = features
            .iter()
            .zip(&self.laterals)
            .map(|(&f, conv)| conv.forward(g, f))
            .collect::<Result<Vec<_>>>()?;
        self.fpn.forward(g, &lat)
    }

    /// Class logits `(N, A_total, K, 1)` and box deltas `(N, A_total, 4, 1)`,
    /// rows in [`Detector::anchors`] order.
    pub fn heads(&self, g: &mut Graph<T>, pyramid: &[Var]) -> Result<(Var, Var)> {
        let k = self.config.num_classes;
        let mut logits = Vec::with_capacity(pyramid.len());
        let mut deltas = Vec::with_capacity(pyramid.len());
        for &p in pyramid {
            let t = self.head.tower.forward(g, p)?;
            let t = self.config.activation.apply(g, t);
            let c = self.head.cls.forward(g, t)?;
            let r = self.head.reg.forward(g, t)?;
            logits.push(g.tape.anchor_major(c, k)?);
            deltas.push(g.tape.anchor_major(r, 4)?);
        }
        Ok((g.tape.concat(&logits)?, g.tape.concat(&deltas)?))
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        self.check_input(g.tape.shape(x))?;
        let feats = self.backbone(g, x)?;
        let pyramid = self.neck(g, &feats)?;
        self.heads(g, &pyramid)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = self.store.bind(false);
        let x = g.tape.constant(images.clone());
        let (l, d) = self.forward(&mut g, x)?;
        Ok((g.tape.value(l).clone(), g.tape.value(d).clone()))
    }

    pub fn detect(&self, images: &Tensor<T>, opts: &PostprocessOptions) -> Result<Vec<Vec<Detection>>> {
        let (logits, deltas) = self.predict(images)?;
        let s = self.config.input_size as f64;
        Ok(postprocess(&logits, &deltas, &self.anchors(), s, s, opts))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostprocessOptions {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for PostprocessOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

/// Scores, decodes, clips and suppresses raw head outputs per image.
pub fn postprocess<T: Real>(
    logits: &Tensor<T>,
    deltas: &Tensor<T>,
    anchors: &[Anchor],
    width: f64,
    height: f64,
    opts: &PostprocessOptions,
) -> Vec<Vec<Detection>> {
    let [n, a_total, k, _] = logits.shape();
    assert_eq!(a_total, anchors.len(), "logit rows must match anchors");
    (0..n)
        .map(|ni| {
            let mut cands = Vec::new();
            for (ai, anchor) in anchors.iter().enumerate() {
                let row = (ni * a_total + ai) * k;
                let drow = (ni * a_total + ai) * 4;
                let d = [0, 1, 2, 3].map(|j| deltas.data()[drow + j].as_f64());
                let bbox = decode(&d, anchor).clip(width, height);
                if !bbox.is_valid() {
                    continue;
                }
                for c in 0..k {
                    let score = sigmoid(logits.data()[row + c].as_f64());
                    if score >= opts.score_threshold {
                        cands.push(Detection { bbox, class: c, score });
                    }
                }
            }
            let mut kept = nms(&cands, opts.nms_iou);
            kept.sort_by(|a, b| b.score.total_cmp(&a.score));
            kept.truncate(opts.max_detections);
            kept
        })
        .collect()
}
