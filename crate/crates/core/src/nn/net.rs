use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::losses::{a_softmax, a_softmax_logits, identification_loss_on};
use crate::rng::{RandomStream, SeedKey};

use super::layers::{
    apply_mask, batchnorm_backward, batchnorm_forward_eval, batchnorm_forward_train, conv2d_backward,
    conv2d_forward, dropout_mask, gsp_backward, gsp_forward, linear_backward, linear_forward,
    relu_backward, relu_forward, BnCache, ConvSpec, GspCache, BN_MOMENTUM,
};
use super::tensor::ParamId;
use super::{ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Softmax,
    #[serde(alias = "asoftmax", alias = "a_softmax")]
    ASoftmax,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(HeadKind::Softmax),
            "a-softmax" | "asoftmax" | "a_softmax" => Ok(HeadKind::ASoftmax),
            other => Err(Error::Config(format!("unknown head '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub stage_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub n_mels: usize,
    pub embedding_dim: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    pub head: HeadKind,
    pub a_softmax_margin: u32,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::desk(12)
    }
}

impl NetConfig {
    /// ResNet-34 layout: 16/32/64/128 channels, 3/4/6/3 blocks, 128-d
    /// embedding, 1211 training speakers.
    pub fn full() -> Self {
        NetConfig {
            stage_channels: vec![16, 32, 64, 128],
            stage_blocks: vec![3, 4, 6, 3],
            n_mels: 64,
            embedding_dim: 128,
            n_classes: 1211,
            dropout_p: 0.5,
            head: HeadKind::Softmax,
            a_softmax_margin: 4,
        }
    }

    /// Scaled-down layout that trains in minutes on one CPU core.
    pub fn desk(n_classes: usize) -> Self {
        NetConfig {
            stage_channels: vec![4, 8, 16, 32],
            stage_blocks: vec![1, 1, 1, 1],
            embedding_dim: 32,
            n_classes,
            ..NetConfig::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("net: {m}")));
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_blocks.len() {
            return bad("stage_channels and stage_blocks must be non-empty and equally long".into());
        }
        if self.stage_channels.iter().chain(&self.stage_blocks).any(|&v| v == 0) {
            return bad("channels and block counts must be positive".into());
        }
        if self.n_mels == 0 || self.embedding_dim == 0 || self.n_classes == 0 {
            return bad("n_mels, embedding_dim and n_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if !(1..=4).contains(&self.a_softmax_margin) {
            return bad(format!("a_softmax_margin {} outside 1..=4", self.a_softmax_margin));
        }
        Ok(())
    }

    pub fn encoding_dim(&self) -> usize {
        2 * self.stage_channels.last().copied().unwrap_or(0)
    }

    /// `(channels, height, width)` after the stem and after each stage for an
    /// input of `frames` frames. Every stage after the first halves height
    /// and width, rounding up.
    pub fn shape_trace(&self, frames: usize) -> Vec<(usize, usize, usize)> {
        let half = |x: usize| x.div_ceil(2);
        let mut out = vec![(self.stage_channels[0], self.n_mels, frames)];
        let (mut h, mut w) = (self.n_mels, frames);
        for (s, &c) in self.stage_channels.iter().enumerate() {
            if s > 0 {
                h = half(h);
                w = half(w);
            }
            out.push((c, h, w));
        }
        out
    }

    /// Human-readable layer table with width written in terms of `L`.
    pub fn symbolic_shapes(&self) -> Vec<(String, String)> {
        let mut rows = vec![("conv1".to_string(), format!("{}x{}xL", self.stage_channels[0], self.n_mels))];
        let mut h = self.n_mels;
        for (s, &c) in self.stage_channels.iter().enumerate() {
            let width = if s == 0 { "L".to_string() } else { format!("L/{}", 1usize << s) };
            if s > 0 {
                h = h.div_ceil(2);
            }
            rows.push((format!("residual{}", s + 1), format!("{c}x{h}x{width}")));
        }
        rows.push(("encoding".into(), self.encoding_dim().to_string()));
        rows.push(("embedding".into(), self.embedding_dim.to_string()));
        rows.push(("classifier".into(), self.n_classes.to_string()));
        rows
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    spec: ConvSpec,
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

/// Saved activations of one train-mode forward pass over a batch.
#[derive(Debug, Clone)]
pub struct EmbedTape<T> {
    input: Tensor<T>,
    stem_bn: BnCache<T>,
    stem_out: Tensor<T>,
    blocks: Vec<BlockTape<T>>,
    gsp: GspCache,
    pooled: Vec<T>,
    batch: usize,
}

#[derive(Debug, Clone)]
struct BlockTape<T> {
    bn1: BnCache<T>,
    mid: Tensor<T>,
    bn2: BnCache<T>,
    shortcut_bn: Option<BnCache<T>>,
    out: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub config: NetConfig,
    pub params: ParamStore<T>,
    stem: ConvBn,
    blocks: Vec<Block>,
    emb_weight: ParamId,
    emb_bias: ParamId,
    cls_weight: ParamId,
    cls_bias: Option<ParamId>,
}

impl<T: Real> Network<T> {
    /// Builds the network with fan-in scaled normal weights, batch-norm
    /// scale 1 and shift 0.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let init = |name: &str, shape: &[usize], std: f64| -> Tensor<T> {
            let mut rng = SeedKey::new("init").u64(seed).str(name).stream();
            let normal = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| T::of(normal.sample(&mut rng))).collect())
                .expect("consistent shape")
        };
        let conv_bn = |store: &mut ParamStore<T>, name: &str, spec: ConvSpec| -> Result<ConvBn> {
            let fan_in = (spec.cin * spec.kernel * spec.kernel) as f64;
            let c = spec.cout;
            Ok(ConvBn {
                spec,
                weight: store.add(
                    &format!("{name}.conv.weight"),
                    init(&format!("{name}.conv.weight"), &spec.weight_shape(), (2.0 / fan_in).sqrt()),
                    true,
                )?,
                gamma: store.add(&format!("{name}.bn.weight"), Tensor::from_vec(&[c], vec![T::one(); c])?, true)?,
                beta: store.add(&format!("{name}.bn.bias"), Tensor::zeros(&[c]), true)?,
                running_mean: store.add(&format!("{name}.bn.running_mean"), Tensor::zeros(&[c]), false)?,
                running_var: store.add(
                    &format!("{name}.bn.running_var"),
                    Tensor::from_vec(&[c], vec![T::one(); c])?,
                    false,
                )?,
            })
        };

        let c0 = config.stage_channels[0];
        let stem = conv_bn(&mut store, "stem", ConvSpec::new(1, c0, 3, 1))?;
        let mut blocks = Vec::new();
        let mut cin = c0;
        for (s, (&c, &nb)) in config.stage_channels.iter().zip(&config.stage_blocks).enumerate() {
            for b in 0..nb {
                let name = format!("stage{}.block{}", s + 1, b);
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let conv1 = conv_bn(&mut store, &format!("{name}.conv1"), ConvSpec::new(cin, c, 3, stride))?;
                let conv2 = conv_bn(&mut store, &format!("{name}.conv2"), ConvSpec::new(c, c, 3, 1))?;
                let shortcut = if stride != 1 || cin != c {
                    Some(conv_bn(&mut store, &format!("{name}.shortcut"), ConvSpec::new(cin, c, 1, stride))?)
                } else {
                    None
                };
                blocks.push(Block { conv1, conv2, shortcut });
                cin = c;
            }
        }
        let enc = config.encoding_dim();
        let p = config.embedding_dim;
        let emb_weight =
            store.add("embedding.weight", init("embedding.weight", &[p, enc], (1.0 / enc as f64).sqrt()), true)?;
        let emb_bias = store.add("embedding.bias", Tensor::zeros(&[p]), true)?;
        let k = config.n_classes;
        let cls_weight =
            store.add("classifier.weight", init("classifier.weight", &[k, p], (1.0 / p as f64).sqrt()), true)?;
        let cls_bias = match config.head {
            HeadKind::Softmax => Some(store.add("classifier.bias", Tensor::zeros(&[k]), true)?),
            HeadKind::ASoftmax => None,
        };
        let mut net = Network { config, params: store, stem, blocks, emb_weight, emb_bias, cls_weight, cls_bias };
        if net.config.head == HeadKind::ASoftmax {
            net.renormalize_class_weights();
        }
        Ok(net)
    }

    /// Rebuilds the layer layout for `config` around an existing store,
    /// checking that every expected tensor is present with the right shape.
    pub fn from_store(config: NetConfig, store: ParamStore<T>) -> Result<Self> {
        let mut net = Network::new(config, 0)?;
        if net.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                net.params.len(),
                store.len()
            )));
        }
        for (want, got) in net.params.entries().iter().zip(store.entries()) {
            if want.name != got.name || want.tensor.shape != got.tensor.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    want.name, want.tensor.shape, got.name, got.tensor.shape
                )));
            }
        }
        net.params = store;
        Ok(net)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn conv_bn_forward(
        &self,
        unit: &ConvBn,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
        let p = &self.params;
        let h = conv2d_forward(x, &p.get(unit.weight).data, &unit.spec)?;
        let gamma = &p.get(unit.gamma).data;
        let beta = &p.get(unit.beta).data;
        match mode {
            Mode::Train => {
                let (y, cache) = batchnorm_forward_train(&h, gamma, beta)?;
                Ok((y, Some(cache)))
            }
            Mode::Eval => Ok((
                batchnorm_forward_eval(
                    &h,
                    gamma,
                    beta,
                    &p.get(unit.running_mean).data,
                    &p.get(unit.running_var).data,
                )?,
                None,
            )),
        }
    }

    fn conv_bn_backward(&mut self, unit: &ConvBn, x: &Tensor<T>, cache: &BnCache<T>, dy: &[T], shape: &[usize]) -> Result<Tensor<T>> {
        let (dh, dgamma, dbeta) = batchnorm_backward(dy, &self.params.get(unit.gamma).data, cache, shape)?;
        let (dx, dw) = conv2d_backward(x, &self.params.get(unit.weight).data, &unit.spec, &dh.data)?;
        accumulate(&mut self.params, unit.weight, &dw);
        accumulate(&mut self.params, unit.gamma, &dgamma);
        accumulate(&mut self.params, unit.beta, &dbeta);
        Ok(dx)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || h != self.config.n_mels || w == 0 {
            return Err(Error::Shape(format!(
                "network expects [N, 1, {}, L>0] input, got {:?}",
                self.config.n_mels, x.shape
            )));
        }
        Ok(())
    }

    /// Embeddings `[N, embedding_dim]`, flattened, in eval mode (running
    /// batch-norm statistics, no dropout). Samples are independent.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.check_input(x)?;
        let (mut h, _) = self.conv_bn_forward(&self.stem, x, Mode::Eval)?;
        h = relu_forward(&h);
        for block in &self.blocks {
            let (a, _) = self.conv_bn_forward(&block.conv1, &h, Mode::Eval)?;
            let a = relu_forward(&a);
            let (b, _) = self.conv_bn_forward(&block.conv2, &a, Mode::Eval)?;
            let skip = match &block.shortcut {
                Some(sc) => self.conv_bn_forward(sc, &h, Mode::Eval)?.0,
                None => h.clone(),
            };
            let sum = add(&b, &skip)?;
            h = relu_forward(&sum);
        }
        let (pooled, _) = gsp_forward(&h)?;
        let emb = self.embedding_layer(&pooled, x.shape[0])?;
        check_finite(&emb, "embeddings")?;
        Ok(emb)
    }

    /// Train-mode forward (batch statistics) returning embeddings and the
    /// tape for [`Network::backward`].
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Vec<T>, EmbedTape<T>)> {
        self.check_input(x)?;
        let (s, stem_bn) = self.conv_bn_forward(&self.stem, x, Mode::Train)?;
        let stem_out = relu_forward(&s);
        let mut tapes = Vec::with_capacity(self.blocks.len());
        let mut h = stem_out.clone();
        for block in &self.blocks {
            let (a, bn1) = self.conv_bn_forward(&block.conv1, &h, Mode::Train)?;
            let mid = relu_forward(&a);
            let (b, bn2) = self.conv_bn_forward(&block.conv2, &mid, Mode::Train)?;
            let (skip, shortcut_bn) = match &block.shortcut {
                Some(sc) => self.conv_bn_forward(sc, &h, Mode::Train)?,
                None => (h.clone(), None),
            };
            let out = relu_forward(&add(&b, &skip)?);
            tapes.push(BlockTape {
                bn1: bn1.expect("train mode caches"),
                mid,
                bn2: bn2.expect("train mode caches"),
                shortcut_bn,
                out: out.clone(),
            });
            h = out;
        }
        let (pooled, gsp) = gsp_forward(&h)?;
        let emb = self.embedding_layer(&pooled, x.shape[0])?;
        check_finite(&emb, "embeddings")?;
        Ok((
            emb,
            EmbedTape {
                input: x.clone(),
                stem_bn: stem_bn.expect("train mode caches"),
                stem_out,
                blocks: tapes,
                gsp,
                pooled,
                batch: x.shape[0],
            },
        ))
    }

    pub fn forward_embed(&self, x: &Tensor<T>, mode: Mode) -> Result<Vec<T>> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => Ok(self.forward_train(x)?.0),
        }
    }

    fn embedding_layer(&self, pooled: &[T], n: usize) -> Result<Vec<T>> {
        linear_forward(
            pooled,
            n,
            &self.params.get(self.emb_weight).data,
            Some(&self.params.get(self.emb_bias).data),
            self.config.encoding_dim(),
            self.config.embedding_dim,
        )
    }

    /// Folds the batch statistics recorded in `tape` into the running
    /// estimates.
    pub fn update_running_stats(&mut self, tape: &EmbedTape<T>) {
        let mut pairs: Vec<(ConvBn, &BnCache<T>)> = vec![(self.stem.clone(), &tape.stem_bn)];
        for (block, bt) in self.blocks.iter().zip(&tape.blocks) {
            pairs.push((block.conv1.clone(), &bt.bn1));
            pairs.push((block.conv2.clone(), &bt.bn2));
            if let (Some(sc), Some(c)) = (&block.shortcut, &bt.shortcut_bn) {
                pairs.push((sc.clone(), c));
            }
        }
        for (unit, cache) in pairs {
            let rm = self.params.get_mut(unit.running_mean);
            for (r, &m) in rm.data.iter_mut().zip(&cache.batch_mean) {
                *r = T::of((1.0 - BN_MOMENTUM) * r.f64() + BN_MOMENTUM * m);
            }
            let rv = self.params.get_mut(unit.running_var);
            for (r, &v) in rv.data.iter_mut().zip(&cache.batch_var) {
                *r = T::of((1.0 - BN_MOMENTUM) * r.f64() + BN_MOMENTUM * v);
            }
        }
    }

    /// Accumulates parameter gradients of `sum(d_emb * embeddings)` into
    /// the store. Call [`ParamStore::zero_grads`] first.
    pub fn backward(&mut self, tape: &EmbedTape<T>, d_emb: &[T]) -> Result<()> {
        let n = tape.batch;
        let enc = self.config.encoding_dim();
        let p = self.config.embedding_dim;
        if d_emb.len() != n * p {
            return Err(Error::Shape("embedding gradient has the wrong size".into()));
        }
        let (dpool, dw, db) = linear_backward(&tape.pooled, n, &self.params.get(self.emb_weight).data, enc, p, d_emb);
        accumulate(&mut self.params, self.emb_weight, &dw);
        accumulate(&mut self.params, self.emb_bias, &db);
        let last = tape.blocks.last().map(|b| &b.out).unwrap_or(&tape.stem_out);
        let mut dh = gsp_backward(last, &tape.gsp, &dpool)?;
        let blocks = self.blocks.clone();
        for (i, (block, bt)) in blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let input = if i == 0 { &tape.stem_out } else { &tape.blocks[i - 1].out };
            let dsum = relu_backward(&bt.out, &dh.data);
            let dmid_out = self.conv_bn_backward(&block.conv2, &bt.mid, &bt.bn2, &dsum, &bt.out.shape)?;
            let da = relu_backward(&bt.mid, &dmid_out.data);
            let mut dx = self.conv_bn_backward(&block.conv1, input, &bt.bn1, &da, &bt.mid.shape)?;
            let dskip = match (&block.shortcut, &bt.shortcut_bn) {
                (Some(sc), Some(cache)) => self.conv_bn_backward(sc, input, cache, &dsum, &bt.out.shape)?.data,
                _ => dsum,
            };
            for (a, b) in dx.data.iter_mut().zip(&dskip) {
                *a += *b;
            }
            dh = dx;
        }
        let ds = relu_backward(&tape.stem_out, &dh.data);
        let stem = self.stem.clone();
        self.conv_bn_backward(&stem, &tape.input, &tape.stem_bn, &ds, &tape.stem_out.shape)?;
        Ok(())
    }

    /// Prediction logits `[N, n_classes]` (no dropout).
    pub fn classifier_forward(&self, emb: &[T]) -> Result<Vec<T>> {
        let p = self.config.embedding_dim;
        if !emb.len().is_multiple_of(p) {
            return Err(Error::Shape("embedding batch is not a multiple of embedding_dim".into()));
        }
        let w = &self.params.get(self.cls_weight).data;
        match self.cls_bias {
            Some(b) => linear_forward(emb, emb.len() / p, w, Some(&self.params.get(b).data), p, self.config.n_classes),
            None => Ok(emb.chunks_exact(p).flat_map(|f| a_softmax_logits(f, w)).collect()),
        }
    }

    /// Mean identification loss over the batch. Accumulates classifier
    /// gradients into the store and returns `(loss, d_embeddings)`.
    ///
    /// `dropout` supplies the mask stream in train mode; it only applies to
    /// the softmax head. `lambda` is the A-softmax annealing weight.
    pub fn head_loss(
        &mut self,
        emb: &[T],
        labels: &[usize],
        dropout: Option<&mut RandomStream>,
        lambda: f64,
    ) -> Result<(f64, Vec<T>)> {
        let p = self.config.embedding_dim;
        let k = self.config.n_classes;
        if emb.len() != labels.len() * p {
            return Err(Error::Shape("labels do not match the embedding batch".into()));
        }
        let n = labels.len();
        match self.cls_bias {
            Some(bias) => {
                let mask = match dropout {
                    Some(rng) if self.config.dropout_p > 0.0 => Some(dropout_mask::<T>(emb.len(), self.config.dropout_p, rng)),
                    _ => None,
                };
                let x = match &mask {
                    Some(m) => apply_mask(emb, m),
                    None => emb.to_vec(),
                };
                let w = self.params.get(self.cls_weight).data.clone();
                let logits = linear_forward(&x, n, &w, Some(&self.params.get(bias).data), p, k)?;
                let loss = identification_loss_on(&logits, labels, k)?;
                let (dx, dw, db) = linear_backward(&x, n, &w, p, k, &loss.grads[0]);
                accumulate(&mut self.params, self.cls_weight, &dw);
                accumulate(&mut self.params, bias, &db);
                let demb = match &mask {
                    Some(m) => apply_mask(&dx, m),
                    None => dx,
                };
                Ok((loss.value.f64(), demb))
            }
            None => {
                let w = self.params.get(self.cls_weight).data.clone();
                let margin = self.config.a_softmax_margin;
                let mut total = 0.0;
                let mut demb = Vec::with_capacity(emb.len());
                let mut dw = vec![T::zero(); w.len()];
                for (f, &y) in emb.chunks_exact(p).zip(labels) {
                    let l = a_softmax(f, y, &w, margin, lambda)?;
                    total += l.value.f64();
                    demb.extend(l.grads[0].iter().map(|&g| g / T::of(n as f64)));
                    for (a, &g) in dw.iter_mut().zip(&l.grads[1]) {
                        *a += g / T::of(n as f64);
                    }
                }
                accumulate(&mut self.params, self.cls_weight, &dw);
                Ok((total / n as f64, demb))
            }
        }
    }

    /// Rescales every A-softmax class weight row to unit norm.
    pub fn renormalize_class_weights(&mut self) {
        if self.config.head != HeadKind::ASoftmax {
            return;
        }
        let p = self.config.embedding_dim;
        let w = self.params.get_mut(self.cls_weight);
        for row in w.data.chunks_exact_mut(p) {
            let n = row.iter().map(|v| v.f64().powi(2)).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v = T::of(v.f64() / n));
            }
        }
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            emb_weight: self.emb_weight,
            emb_bias: self.emb_bias,
            cls_weight: self.cls_weight,
            cls_bias: self.cls_bias,
        }
    }
}

fn accumulate<T: Real>(store: &mut ParamStore<T>, id: ParamId, g: &[T]) {
    let grad = store.get_mut(id).grad_mut();
    for (a, &b) in grad.iter_mut().zip(g) {
        *a += b;
    }
}

fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("residual add {:?} + {:?}", a.shape, b.shape)));
    }
    Tensor::from_vec(&a.shape, a.data.iter().zip(&b.data).map(|(x, y)| *x + *y).collect())
}

fn check_finite<T: Real>(v: &[T], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Stacks equal-length feature matrices into a `[N, 1, n_mels, frames]`
/// batch (mel bins along height, time along width).
pub fn features_to_batch<T: Real>(feats: &[&FeatureMatrix]) -> Result<Tensor<T>> {
    let first = feats.first().ok_or_else(|| Error::Shape("empty feature batch".into()))?;
    let (frames, mels) = first.shape();
    let mut data = Vec::with_capacity(feats.len() * frames * mels);
    for f in feats {
        if f.shape() != (frames, mels) {
            return Err(Error::Shape(format!(
                "batch mixes shapes {:?} and {:?}",
                (frames, mels),
                f.shape()
            )));
        }
        for m in 0..mels {
            data.extend((0..frames).map(|t| T::of(f.get(t, m) as f64)));
        }
    }
    Tensor::from_vec(&[feats.len(), 1, mels, frames], data)
}
