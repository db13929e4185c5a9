use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::CascadeConfig;
use crate::error::{dim_err, Error, Result};
use crate::geometry::{generate_anchors, BBox};
use crate::params::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How a parameter is drawn at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with `sqrt(2 / fan_in)` deviation.
    He,
    Gaussian(f64),
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn fc(out: &mut Vec<ParamSpec>, name: &str, inputs: usize, outputs: usize, init: Init) {
    out.push(spec(format!("{name}.w"), &[outputs, inputs], init));
    out.push(spec(format!("{name}.b"), &[outputs], Init::Zeros));
}

/// Names, shapes and initializers of every parameter, in a fixed order.
pub fn param_specs(cfg: &CascadeConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut channels = cfg.in_channels;
    for (i, layer) in cfg.backbone.iter().enumerate() {
        let k = layer.kernel;
        out.push(spec(format!("conv{}.w", i + 1), &[layer.out_channels, channels, k, k], Init::He));
        out.push(spec(format!("conv{}.b", i + 1), &[layer.out_channels], Init::Zeros));
        channels = layer.out_channels;
    }
    let a = cfg.anchors_per_position();
    out.push(spec("rpn.conv.w", &[cfg.rpn_channels, channels, 3, 3], Init::He));
    out.push(spec("rpn.conv.b", &[cfg.rpn_channels], Init::Zeros));
    out.push(spec("rpn.cls.w", &[a, cfg.rpn_channels, 1, 1], Init::Gaussian(0.01)));
    out.push(spec("rpn.cls.b", &[a], Init::Zeros));
    out.push(spec("rpn.bbox.w", &[4 * a, cfg.rpn_channels, 1, 1], Init::Gaussian(0.001)));
    out.push(spec("rpn.bbox.b", &[4 * a], Init::Zeros));

    let m2 = cfg.mask_resolution * cfg.mask_resolution;
    let s2 = channels * cfg.stage2_size() * cfg.stage2_size();
    fc(&mut out, "s2.fc", s2, cfg.mask_hidden, Init::He);
    fc(&mut out, "s2.mask", cfg.mask_hidden, m2, Init::Gaussian(0.001));

    let s3 = channels * cfg.stage3_size() * cfg.stage3_size();
    let h = cfg.stage3_hidden;
    let k = cfg.num_categories + 1;
    fc(&mut out, "s3.mask_fc1", s3, h, Init::He);
    fc(&mut out, "s3.mask_fc2", h, h, Init::He);
    fc(&mut out, "s3.box_fc1", s3, h, Init::He);
    fc(&mut out, "s3.box_fc2", h, h, Init::He);
    fc(&mut out, "s3.mask_cls", 2 * h, k, Init::Gaussian(0.01));
    fc(&mut out, "s3.box_cls", 2 * h, k, Init::Gaussian(0.01));
    fc(&mut out, "s3.reg", 2 * h, 4 * k, Init::Gaussian(0.001));
    out
}

/// A configured cascade and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: CascadeConfig,
    pub params: ParameterStore,
}

impl Model {
    /// Randomly initialized parameters: He-normal for hidden layers, small
    /// Gaussians for output layers, zero biases.
    pub fn new(config: CascadeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        for p in param_specs(&config) {
            let std = match p.init {
                Init::Zeros => 0.0,
                Init::Gaussian(s) => s,
                Init::He => (2.0 / p.shape[1..].iter().product::<usize>() as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            let value = Tensor::from_fn(&p.shape, |_| if std > 0.0 { normal.sample(&mut rng) } else { 0.0 });
            params.insert(p.name, value);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking they match the configuration.
    pub fn from_params(config: CascadeConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let model = Self { config, params };
        model.check()?;
        Ok(model)
    }

    pub fn load(config: CascadeConfig, checkpoint: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(config, ParameterStore::load(checkpoint)?)
    }

    /// Every parameter the configuration needs is present with the right shape.
    pub fn check(&self) -> Result<()> {
        for p in param_specs(&self.config) {
            match self.params.get(&p.name) {
                None => return Err(Error::Config(format!("missing parameter {}", p.name))),
                Some(t) if t.shape() != p.shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.shape
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn anchors(&self, feature_h: usize, feature_w: usize) -> Vec<BBox> {
        generate_anchors(
            feature_h,
            feature_w,
            self.config.stride() as f64,
            &self.config.anchor_scales,
            &self.config.anchor_ratios,
        )
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Net> {
        let mut vars = BTreeMap::new();
        for name in self.params.names() {
            let v = if trainable {
                self.params.bind(tape, name)?
            } else {
                tape.constant(self.params.get(name).expect("listed").clone())
            };
            vars.insert(name.to_string(), v);
        }
        Ok(Net { vars })
    }
}

/// Parameter handles for one forward pass.
pub(crate) struct Net {
    vars: BTreeMap<String, Var>,
}

impl Net {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    fn affine(&self, t: &mut Tape, name: &str, x: Var) -> Result<Var> {
        t.affine(x, self.get(&format!("{name}.w")), self.get(&format!("{name}.b")))
    }

    fn affine_relu(&self, t: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let y = self.affine(t, name, x)?;
        Ok(t.relu(y))
    }
}

/// Shared convolutional features `[C, H/stride, W/stride]`.
pub(crate) fn backbone(t: &mut Tape, net: &Net, cfg: &CascadeConfig, image: Var) -> Result<Var> {
    let mut x = image;
    for (i, layer) in cfg.backbone.iter().enumerate() {
        let w = net.get(&format!("conv{}.w", i + 1));
        let b = net.get(&format!("conv{}.b", i + 1));
        let y = t.conv2d(x, w, Some(b), layer.stride, layer.kernel / 2)?;
        x = t.relu(y);
    }
    Ok(x)
}

/// Objectness logits `[K]` and deltas `[K, 4]` in anchor order.
pub(crate) struct RpnOut {
    pub logits: Var,
    pub deltas: Var,
}

pub(crate) fn rpn(t: &mut Tape, net: &Net, features: Var) -> Result<RpnOut> {
    let h = t.conv2d(features, net.get("rpn.conv.w"), Some(net.get("rpn.conv.b")), 1, 1)?;
    let h = t.relu(h);
    let cls = t.conv2d(h, net.get("rpn.cls.w"), Some(net.get("rpn.cls.b")), 1, 0)?;
    let bbox = t.conv2d(h, net.get("rpn.bbox.w"), Some(net.get("rpn.bbox.b")), 1, 0)?;
    let shape = t.value(cls).shape().to_vec();
    let (a, fh, fw) = (shape[0], shape[1], shape[2]);
    let hw = fh * fw;
    let k = hw * a;
    let mut cls_idx = Vec::with_capacity(k);
    let mut box_idx = Vec::with_capacity(4 * k);
    for pos in 0..hw {
        for anchor in 0..a {
            cls_idx.push(anchor * hw + pos);
            for j in 0..4 {
                box_idx.push((4 * anchor + j) * hw + pos);
            }
        }
    }
    Ok(RpnOut {
        logits: t.index_select(cls, cls_idx, &[k])?,
        deltas: t.index_select(bbox, box_idx, &[k, 4])?,
    })
}

/// Warps image-space boxes `[R, 4]` out of the feature map:
/// `[R, C, W′, W′]`.
pub(crate) fn warp_rois(t: &mut Tape, cfg: &CascadeConfig, features: Var, boxes: Var) -> Result<Var> {
    let feature_boxes = t.scale(boxes, 1.0 / cfg.stride() as f64);
    t.roi_warp(features, feature_boxes, cfg.warp_size, cfg.warp_size)
}

fn flatten_rows(t: &mut Tape, x: Var) -> Result<Var> {
    let shape = t.value(x).shape().to_vec();
    let width = shape[1..].iter().product::<usize>();
    t.reshape(x, &[shape[0], width])
}

/// Stage-2 mask logits `[R, m²]` from warped features.
pub(crate) fn mask_head(t: &mut Tape, net: &Net, cfg: &CascadeConfig, warped: Var) -> Result<Var> {
    let pooled = t.max_pool2d(warped, cfg.stage2_pool)?;
    let flat = flatten_rows(t, pooled)?;
    let hidden = net.affine_relu(t, "s2.fc", flat)?;
    net.affine(t, "s2.mask", hidden)
}

/// Stage-3 outputs: mask-level logits `[R, N+1]`, box-level logits
/// `[R, N+1]`, class-wise deltas `[R, 4(N+1)]`, and the masked features.
pub(crate) struct ClassifyOut {
    pub mask_cls: Var,
    pub box_cls: Var,
    pub reg: Var,
    pub masked: Var,
}

/// Masking layer: the stage-3 pooled features times the stage-2 mask
/// probabilities resized to the pooled resolution and replicated over
/// channels. Returns `(pooled, masked)`.
pub(crate) fn mask_features(
    t: &mut Tape,
    cfg: &CascadeConfig,
    warped: Var,
    mask_logits: Var,
) -> Result<(Var, Var)> {
    let pooled = t.max_pool2d(warped, cfg.stage3_pool)?;
    let shape = t.value(pooled).shape().to_vec();
    let (r, c, s) = (shape[0], shape[1], shape[2]);
    let m = cfg.mask_resolution;
    let probs = t.sigmoid(mask_logits);
    let grid = t.reshape(probs, &[r, 1, m, m])?;
    let resized = t.resize_bilinear(grid, s, s)?;
    let plane = s * s;
    let mut idx = Vec::with_capacity(r * c * plane);
    for roi in 0..r {
        for _ in 0..c {
            idx.extend(roi * plane..(roi + 1) * plane);
        }
    }
    let tiled = t.index_select(resized, idx, &shape)?;
    let masked = t.mul(pooled, tiled)?;
    Ok((pooled, masked))
}

pub(crate) fn classify_head(
    t: &mut Tape,
    net: &Net,
    cfg: &CascadeConfig,
    warped: Var,
    mask_logits: Var,
) -> Result<ClassifyOut> {
    let (pooled, masked) = mask_features(t, cfg, warped, mask_logits)?;
    let mask_in = flatten_rows(t, masked)?;
    let box_in = flatten_rows(t, pooled)?;
    let mh = net.affine_relu(t, "s3.mask_fc1", mask_in)?;
    let mh = net.affine_relu(t, "s3.mask_fc2", mh)?;
    let bh = net.affine_relu(t, "s3.box_fc1", box_in)?;
    let bh = net.affine_relu(t, "s3.box_fc2", bh)?;
    let joint = t.concat(&[mh, bh], 1)?;
    Ok(ClassifyOut {
        mask_cls: net.affine(t, "s3.mask_cls", joint)?,
        box_cls: net.affine(t, "s3.box_cls", joint)?,
        reg: net.affine(t, "s3.reg", joint)?,
        masked,
    })
}

/// Picks, for each row, the 4 deltas of `classes[row]` out of `[R, 4(N+1)]`.
pub(crate) fn select_class_deltas(t: &mut Tape, reg: Var, classes: &[usize]) -> Result<Var> {
    let width = t.value(reg).shape()[1];
    let mut idx = Vec::with_capacity(4 * classes.len());
    for (row, &c) in classes.iter().enumerate() {
        if 4 * c + 4 > width {
            return dim_err(format!("class {c} has no regressor in a width-{width} output"));
        }
        idx.extend((0..4).map(|j| row * width + 4 * c + j));
    }
    t.index_select(reg, idx, &[classes.len(), 4])
}

/// Image tensor checked against the configured input channels.
pub(crate) fn check_image(cfg: &CascadeConfig, image: &Tensor) -> Result<()> {
    match image.shape() {
        [c, h, w] if *c == cfg.in_channels && *h > 0 && *w > 0 => Ok(()),
        s => dim_err(format!("image must be [{}, H, W], got {s:?}", cfg.in_channels)),
    }
}
