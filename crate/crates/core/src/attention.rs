//! VGG-style classifier with two trainable spatial attention blocks.
//!
//! Each attention block turns a tapped feature map `F` and the global
//! feature `G` into a one-channel map
//! `A = sigmoid(W * relu(W_L * F + up(W_G G)))` and reweights `F` by it.
//! The classifier sees `concat(gap(A1 F1), gap(A2 F2), G)`; without
//! attention it sees `G` alone.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LesionBox;
use crate::metrics::{auc, ScoredSet};
use crate::raster::GrayImage;
use crate::rng::{derive_seed, rng_for};
use crate::roi::{crop_offset, crop_square, resize_roi, CropMode, PreprocessConfig, RoiImage};
use crate::tensor::{he_init, load_checkpoint, save_checkpoint, Graph, ParamStore, Sgd, Tensor, Var};

/// How the global feature reaches the attention blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalFeatureMode {
    /// `G` is the pooled last-block vector, broadcast over the tap grid.
    Pooled,
    /// `G` keeps its spatial extent and is bilinearly upsampled to the tap.
    Spatial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub block_channels: Vec<usize>,
    pub convs_per_block: Vec<usize>,
    pub input_size: usize,
    /// Block indices whose (pre-pooling) outputs feed attention blocks.
    pub attention_taps: Vec<usize>,
    /// Hidden width of the attention blocks; `None` uses the tapped width.
    pub attention_hidden: Option<usize>,
    /// Hidden units of the classifier head; 0 means a single linear layer.
    pub classifier_width: usize,
    pub global_feature: GlobalFeatureMode,
}

impl BackboneConfig {
    /// VGG-16 layout at 224 px.
    pub fn full() -> Self {
        Self {
            block_channels: vec![64, 128, 256, 512, 512],
            convs_per_block: vec![2, 2, 3, 3, 3],
            input_size: 224,
            attention_taps: vec![2, 3],
            attention_hidden: None,
            classifier_width: 0,
            global_feature: GlobalFeatureMode::Pooled,
        }
    }

    /// Thin layout for 64 px inputs on a CPU.
    pub fn desk() -> Self {
        Self {
            block_channels: vec![16, 32, 64, 96, 96],
            convs_per_block: vec![1, 1, 1, 1, 1],
            input_size: 64,
            attention_taps: vec![2, 3],
            attention_hidden: None,
            classifier_width: 0,
            global_feature: GlobalFeatureMode::Pooled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nb = self.block_channels.len();
        if nb < 2 {
            return Err(Error::config("block_channels", "need at least two blocks"));
        }
        if self.convs_per_block.len() != nb {
            return Err(Error::config(
                "convs_per_block",
                format!("has {} entries for {nb} blocks", self.convs_per_block.len()),
            ));
        }
        if self.block_channels.contains(&0) || self.convs_per_block.contains(&0) {
            return Err(Error::config("block_channels", "channel and conv counts must be positive"));
        }
        if self.attention_hidden == Some(0) {
            return Err(Error::config("attention_hidden", "must be positive"));
        }
        let pools = nb - 1;
        if self.input_size == 0 || self.input_size % (1 << pools) != 0 {
            return Err(Error::config(
                "input_size",
                format!("must be a positive multiple of {} for {nb} blocks", 1 << pools),
            ));
        }
        for (i, &t) in self.attention_taps.iter().enumerate() {
            if t + 1 >= nb {
                return Err(Error::config(
                    "attention_taps",
                    format!("tap {t} must precede the last block (index {})", nb - 1),
                ));
            }
            if self.attention_taps[..i].contains(&t) {
                return Err(Error::config("attention_taps", format!("tap {t} listed twice")));
            }
        }
        Ok(())
    }

    /// Spatial size of block `b`'s output.
    pub fn block_resolution(&self, b: usize) -> usize {
        self.input_size >> b
    }

    fn global_dim(&self) -> usize {
        *self.block_channels.last().expect("validated")
    }

    fn hidden_for(&self, tap: usize) -> usize {
        self.attention_hidden.unwrap_or(self.block_channels[tap])
    }

    /// Width of the vector fed to the classifier head.
    fn head_input(&self, with_attention: bool) -> usize {
        let taps: usize = if with_attention {
            self.attention_taps.iter().map(|&t| self.block_channels[t]).sum()
        } else {
            0
        };
        taps + self.global_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub alpha: Option<f64>,
    /// Random training crops; off means the eval center crop throughout.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 45,
            lr0: 0.001,
            lr_decay_every: 10,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            gamma: 2.0,
            alpha: None,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::config("lr0", "must be positive"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::config("lr_decay_every", "must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma", "must be non-negative"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::config("alpha", "must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// `lr0 * factor^floor(epoch / every)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Graph handles of one attention block's weights.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    /// `d x C_F x 1 x 1`.
    pub w_l: Var,
    /// `d x D_g` (pooled) or `d x D_g x 1 x 1` (spatial).
    pub w_g: Var,
    /// `1 x d x 1 x 1`.
    pub w: Var,
}

/// `A = sigmoid(W * relu(W_L * F + up(W_G G)))`, `F_hat = A F`.
/// `global` is `N x D_g` or, in spatial mode, `N x D_g x h x w`.
pub fn spatial_attention(g: &mut Graph, f: Var, global: Var, block: &AttentionVars) -> Result<(Var, Var)> {
    let fs = g.value(f).shape().to_vec();
    if fs.len() != 4 {
        return Err(Error::Shape(format!("attention input must be N x C x H x W, got {fs:?}")));
    }
    let (h, w) = (fs[2], fs[3]);
    let local = g.conv2d(f, block.w_l, None, 1, 0)?;
    let gproj = match g.value(global).shape().len() {
        2 => {
            let v = g.linear(global, block.w_g, None)?;
            g.broadcast_spatial(v, h, w)?
        }
        4 => {
            let v = g.conv2d(global, block.w_g, None, 1, 0)?;
            g.upsample_bilinear(v, h, w)?
        }
        _ => {
            return Err(Error::Shape(format!(
                "global feature must be rank 2 or 4, got {:?}",
                g.value(global).shape()
            )))
        }
    };
    let s = g.add(local, gproj)?;
    let r = g.relu(s);
    let logits = g.conv2d(r, block.w, None, 1, 0)?;
    let a = g.sigmoid(logits);
    let fhat = g.mul(a, f)?;
    Ok((a, fhat))
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `N` logits.
    pub logits: Var,
    /// One `N x 1 x h x w` map per tap.
    pub attention: Vec<Var>,
    /// Pooled global feature `N x D_g`.
    pub global: Var,
    /// Graph leaf for every parameter, in store order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionNet {
    backbone: BackboneConfig,
    with_attention: bool,
    params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    backbone: BackboneConfig,
    with_attention: bool,
}

impl AttentionNet {
    /// He-initialized network; biases start at zero.
    pub fn new(backbone: &BackboneConfig, with_attention: bool, seed: u64) -> Result<Self> {
        backbone.validate()?;
        let mut store = ParamStore::new();
        let mut k = 0u64;
        let mut he = |shape: &[usize], fan_in: usize| {
            k += 1;
            he_init(shape, fan_in, derive_seed(seed, k))
        };
        let mut cin = 1;
        for (b, (&c, &n)) in backbone.block_channels.iter().zip(&backbone.convs_per_block).enumerate() {
            for i in 0..n {
                store.add(format!("block{b}.conv{i}.weight"), he(&[c, cin, 3, 3], cin * 9)?)?;
                store.add(format!("block{b}.conv{i}.bias"), Tensor::zeros(&[c]))?;
                cin = c;
            }
        }
        let dg = backbone.global_dim();
        if with_attention {
            for (i, &t) in backbone.attention_taps.iter().enumerate() {
                let cf = backbone.block_channels[t];
                let d = backbone.hidden_for(t);
                store.add(format!("attn{i}.w_l"), he(&[d, cf, 1, 1], cf)?)?;
                let wg_shape: Vec<usize> = match backbone.global_feature {
                    GlobalFeatureMode::Pooled => vec![d, dg],
                    GlobalFeatureMode::Spatial => vec![d, dg, 1, 1],
                };
                store.add(format!("attn{i}.w_g"), he(&wg_shape, dg)?)?;
                store.add(format!("attn{i}.w"), he(&[1, d, 1, 1], d)?)?;
            }
        }
        let din = backbone.head_input(with_attention);
        if backbone.classifier_width > 0 {
            let hw = backbone.classifier_width;
            store.add("head.hidden.weight", he(&[hw, din], din)?)?;
            store.add("head.hidden.bias", Tensor::zeros(&[hw]))?;
            store.add("head.out.weight", he(&[1, hw], hw)?)?;
        } else {
            store.add("head.out.weight", he(&[1, din], din)?)?;
        }
        store.add("head.out.bias", Tensor::zeros(&[1]))?;
        Ok(Self {
            backbone: backbone.clone(),
            with_attention,
            params: store,
        })
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.backbone
    }

    pub fn with_attention(&self) -> bool {
        self.with_attention
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn pidx(&self, name: &str) -> usize {
        self.params.index_of(name).unwrap_or_else(|| panic!("parameter {name} not in store"))
    }

    /// Build the forward graph for an `N x 1 x S x S` input. With
    /// `trainable` the parameters are graph variables, else constants.
    pub fn forward(&self, g: &mut Graph, input: Var, trainable: bool) -> Result<ForwardOutput> {
        let s = g.value(input).shape().to_vec();
        let size = self.backbone.input_size;
        if s.len() != 4 || s[1] != 1 || s[2] != size || s[3] != size {
            return Err(Error::Shape(format!(
                "network expects N x 1 x {size} x {size} input, got {s:?}"
            )));
        }
        let params: Vec<Var> = self
            .params
            .params()
            .iter()
            .map(|p| {
                if trainable {
                    g.variable(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        let p = |name: &str| params[self.pidx(name)];
        let nb = self.backbone.block_channels.len();
        let mut x = input;
        let mut taps = Vec::new();
        for b in 0..nb {
            for i in 0..self.backbone.convs_per_block[b] {
                let y = g.conv2d(
                    x,
                    p(&format!("block{b}.conv{i}.weight")),
                    Some(p(&format!("block{b}.conv{i}.bias"))),
                    1,
                    1,
                )?;
                x = g.relu(y);
            }
            if self.backbone.attention_taps.contains(&b) {
                taps.push((b, x));
            }
            if b + 1 < nb {
                x = g.maxpool2(x)?;
            }
        }
        let global = g.gap(x)?;
        let mut features = Vec::new();
        let mut attention = Vec::new();
        if self.with_attention {
            let gin = match self.backbone.global_feature {
                GlobalFeatureMode::Pooled => global,
                GlobalFeatureMode::Spatial => x,
            };
            // Taps in configured order, not block order.
            for (i, &t) in self.backbone.attention_taps.iter().enumerate() {
                let f = taps.iter().find(|(b, _)| *b == t).expect("tap recorded").1;
                let block = AttentionVars {
                    w_l: p(&format!("attn{i}.w_l")),
                    w_g: p(&format!("attn{i}.w_g")),
                    w: p(&format!("attn{i}.w")),
                };
                let (a, fhat) = spatial_attention(g, f, gin, &block)?;
                attention.push(a);
                features.push(g.gap(fhat)?);
            }
        }
        features.push(global);
        let feat = if features.len() == 1 {
            global
        } else {
            g.concat_features(&features)?
        };
        let out_in = if self.backbone.classifier_width > 0 {
            let h = g.linear(feat, p("head.hidden.weight"), Some(p("head.hidden.bias")))?;
            g.relu(h)
        } else {
            feat
        };
        let logits = g.linear(out_in, p("head.out.weight"), Some(p("head.out.bias")))?;
        Ok(ForwardOutput {
            logits,
            attention,
            global,
            params,
        })
    }

    /// Logits for a batch of cropped inputs (each `S x S`).
    pub fn predict_logits(&self, images: &[GrayImage]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let x = g.constant(stack_images(chunk, self.backbone.input_size)?);
            let fo = self.forward(&mut g, x, false)?;
            out.extend_from_slice(g.value(fo.logits).data());
        }
        Ok(out)
    }

    pub fn predict_proba(&self, images: &[GrayImage]) -> Result<Vec<f64>> {
        Ok(self
            .predict_logits(images)?
            .into_iter()
            .map(crate::tensor::sigmoid)
            .collect())
    }

    /// Attention maps of one cropped input, one `h x w` image per tap.
    pub fn attention_maps(&self, image: &GrayImage) -> Result<Vec<GrayImage>> {
        let mut g = Graph::new();
        let x = g.constant(stack_images(std::slice::from_ref(image), self.backbone.input_size)?);
        let fo = self.forward(&mut g, x, false)?;
        fo.attention
            .iter()
            .map(|&a| {
                let t = g.value(a);
                GrayImage::from_vec(t.shape()[3], t.shape()[2], t.data().to_vec())
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(CheckpointMeta {
            backbone: self.backbone.clone(),
            with_attention: self.with_attention,
        })?;
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = load_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)
            .map_err(|e| Error::Load(format!("{}: bad network metadata: {e}", path.display())))?;
        let template = Self::new(&meta.backbone, meta.with_attention, 0)?;
        let names = |s: &ParamStore| -> Vec<(String, Vec<usize>)> {
            s.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
        };
        if names(&template.params) != names(&store) {
            return Err(Error::Load(format!(
                "{}: parameters do not match the recorded network configuration",
                path.display()
            )));
        }
        Ok(Self {
            backbone: meta.backbone,
            with_attention: meta.with_attention,
            params: store,
        })
    }
}

/// Number of weights the attention pathway adds: the blocks themselves plus
/// the classifier inputs fed by the attended features.
pub fn attention_parameter_count(backbone: &BackboneConfig) -> usize {
    let dg = backbone.global_dim();
    let head_rows = if backbone.classifier_width > 0 {
        backbone.classifier_width
    } else {
        1
    };
    backbone
        .attention_taps
        .iter()
        .map(|&t| {
            let cf = backbone.block_channels[t];
            let d = backbone.hidden_for(t);
            d * cf + d * dg + d + cf * head_rows
        })
        .sum()
}

/// Stack `S x S` images into an `N x 1 x S x S` tensor.
pub fn stack_images(images: &[GrayImage], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.width() != size || img.height() != size {
            return Err(Error::Shape(format!(
                "expected {size}x{size} input, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[images.len(), 1, size, size], data)
}

/// ROIs resized to `resize_to`, ready for cropping, with labels.
#[derive(Debug, Clone, Default)]
pub struct RoiDataset {
    pub ids: Vec<String>,
    pub images: Vec<GrayImage>,
    pub labels: Vec<u8>,
}

impl RoiDataset {
    pub fn from_rois(ids: Vec<String>, rois: &[RoiImage], labels: Vec<u8>, pre: &PreprocessConfig) -> Result<Self> {
        if ids.len() != rois.len() || labels.len() != rois.len() {
            return Err(Error::Validation(format!(
                "{} ids, {} ROIs and {} labels",
                ids.len(),
                rois.len(),
                labels.len()
            )));
        }
        Ok(Self {
            ids,
            images: rois.iter().map(|r| resize_roi(r, pre)).collect(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Center crops of every image.
    pub fn eval_crops(&self, pre: &PreprocessConfig) -> Vec<GrayImage> {
        let off = crop_offset(pre, CropMode::Eval);
        self.images.iter().map(|i| crop_square(i, pre.crop_to, off)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AttentionNet,
    pub history: Vec<EpochRecord>,
}

/// Minibatch SGD with momentum on the focal loss.
pub fn train_model(
    train: &RoiDataset,
    val: Option<&RoiDataset>,
    backbone: &BackboneConfig,
    pre: &PreprocessConfig,
    cfg: &TrainConfig,
    with_attention: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    pre.validate()?;
    if pre.crop_to != backbone.input_size {
        return Err(Error::config(
            "crop_to",
            format!("crop size {} differs from network input {}", pre.crop_to, backbone.input_size),
        ));
    }
    let pos = train.labels.iter().filter(|&&l| l == 1).count();
    if train.is_empty() || pos == 0 || pos == train.len() {
        return Err(Error::Validation("training set needs both classes".into()));
    }
    let mut model = AttentionNet::new(backbone, with_attention, derive_seed(cfg.seed, 1))?;
    let val_crops = val.map(|v| v.eval_crops(pre));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let opt = Sgd {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        order.shuffle(&mut rng_for(cfg.seed, 0x5EED_0000 + epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let crops: Vec<GrayImage> = batch
                .iter()
                .map(|&i| {
                    let mode = if cfg.augment {
                        CropMode::Train {
                            seed: derive_seed(cfg.seed, ((epoch as u64) << 32) | i as u64),
                        }
                    } else {
                        CropMode::Eval
                    };
                    crop_square(&train.images[i], pre.crop_to, crop_offset(pre, mode))
                })
                .collect();
            let labels: Vec<f64> = batch.iter().map(|&i| train.labels[i] as f64).collect();
            let mut g = Graph::new();
            let x = g.constant(stack_images(&crops, backbone.input_size)?);
            let fo = model.forward(&mut g, x, true)?;
            let loss = g.focal_loss(fo.logits, &labels, cfg.gamma, cfg.alpha)?;
            loss_sum += g.value(loss).item() * batch.len() as f64;
            g.backward(loss)?;
            for (k, &v) in fo.params.iter().enumerate() {
                opt.step(model.params.get_mut(k), g.grad(v))?;
            }
        }
        let val_auc = match (&val_crops, val) {
            (Some(crops), Some(v)) => {
                let p = model.predict_proba(crops)?;
                ScoredSet::new(p, v.labels.clone()).ok().and_then(|s| auc(&s).ok())
            }
            _ => None,
        };
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_auc,
        });
    }
    Ok(TrainOutcome { model, history })
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,val_auc\n");
    for h in history {
        let v = h.val_auc.map_or(String::new(), |a| a.to_string());
        out.push_str(&format!("{},{},{},{}\n", h.epoch, h.lr, h.train_loss, v));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Attention of one tap at ROI resolution.
#[derive(Debug, Clone)]
pub struct AttentionOverlay {
    /// Sigmoid values resampled to the ROI grid.
    pub raw: GrayImage,
    /// `raw` min-max scaled to [0, 1] (all zeros for a constant map).
    pub scaled: GrayImage,
}

/// Resample tap `tap` (default: the deepest) of the eval-mode attention to
/// the ROI pixel grid, undoing the resize and center crop.
pub fn export_attention_overlay(
    model: &AttentionNet,
    roi: &RoiImage,
    pre: &PreprocessConfig,
    tap: Option<usize>,
) -> Result<AttentionOverlay> {
    if !model.with_attention {
        return Err(Error::Validation("model was trained without attention blocks".into()));
    }
    let n_taps = model.backbone.attention_taps.len();
    let tap = match tap {
        Some(t) if t < n_taps => t,
        Some(t) => {
            return Err(Error::Validation(format!(
                "attention tap {t} out of range; model has {n_taps} taps"
            )))
        }
        None => (0..n_taps)
            .max_by_key(|&i| model.backbone.attention_taps[i])
            .ok_or_else(|| Error::Validation("model has no attention taps".into()))?,
    };
    let resized = resize_roi(roi, pre);
    let off = crop_offset(pre, CropMode::Eval);
    let crop = crop_square(&resized, pre.crop_to, off);
    let map = model.attention_maps(&crop)?.swap_remove(tap);
    let s = roi.pixels.size as f64;
    let r = pre.resize_to as f64;
    let c = pre.crop_to as f64;
    let mh = map.height() as f64;
    let mw = map.width() as f64;
    let n = roi.pixels.size;
    let mut raw = GrayImage::new(n, n);
    for v in 0..n {
        let cy = (v as f64 + 0.5) * r / s - 0.5 - off.1 as f64;
        let my = (cy + 0.5) * mh / c - 0.5;
        for u in 0..n {
            let cx = (u as f64 + 0.5) * r / s - 0.5 - off.0 as f64;
            let mx = (cx + 0.5) * mw / c - 0.5;
            raw.set(u, v, map.sample_bilinear(mx, my));
        }
    }
    let (lo, hi) = raw.min_max();
    let scaled = GrayImage::from_vec(
        n,
        n,
        raw.data()
            .iter()
            .map(|&a| if hi > lo { (a - lo) / (hi - lo) } else { 0.0 })
            .collect(),
    )?;
    Ok(AttentionOverlay { raw, scaled })
}

/// Write `<stem>.png` (scaled, 8-bit) and `<stem>.f32` (raw values).
pub fn write_overlay(dir: &Path, stem: &str, overlay: &AttentionOverlay) -> Result<()> {
    overlay.scaled.save_png8_scaled(&dir.join(format!("{stem}.png")))?;
    let bin = dir.join(format!("{stem}.f32"));
    let bytes: Vec<u8> = overlay.raw.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
}

/// `(attention mass fraction inside the boxes, area fraction of the boxes)`
/// over the pixels of `map`.
pub fn lesion_mass_fraction(map: &GrayImage, boxes: &[LesionBox]) -> (f64, f64) {
    let (mut inside_mass, mut total_mass, mut inside_px) = (0.0, 0.0, 0usize);
    for y in 0..map.height() {
        for x in 0..map.width() {
            let a = map.get(x, y);
            total_mass += a;
            if boxes.iter().any(|b| b.contains([x as f64, y as f64])) {
                inside_mass += a;
                inside_px += 1;
            }
        }
    }
    let area = inside_px as f64 / (map.width() * map.height()) as f64;
    let mass = if total_mass > 0.0 { inside_mass / total_mass } else { area };
    (mass, area)
}
