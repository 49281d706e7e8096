//! Full detector assembly: residual extraction through the constrained
//! filter bank, eight convolutional feature blocks with a mixed
//! adaptive-threshold/ReLU activation schedule, and a single-logit
//! classification head. Returns both the probability and the pooled
//! feature vector consumed by the contrastive loss.

use crate::activations::{apam_forward, ApamNodes, ApamParams, TluLayer};
use crate::error::{Error, Result};
use crate::rng;
use crate::srm::{self, Constraint, FilterBank, KERNEL_SIZE};
use crate::tape::{BatchStats, NodeId, Tape};
use crate::tensor::Tensor;

pub const BLOCKS: usize = 8;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Spatial downsampling applied at the end of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    None,
    AvgStride2,
}

impl Pool {
    pub fn name(self) -> &'static str {
        match self {
            Pool::None => "none",
            Pool::AvgStride2 => "avg_stride2",
        }
    }

    pub fn parse(s: &str) -> Result<Pool> {
        match s {
            "none" => Ok(Pool::None),
            "avg_stride2" => Ok(Pool::AvgStride2),
            other => Err(Error::Config(format!(
                "unknown pool '{other}' (expected none or avg_stride2)"
            ))),
        }
    }
}

/// Nonlinearity applied inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Apam,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Apam => "apam",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Activation> {
        match s {
            "apam" => Ok(Activation::Apam),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!(
                "unknown activation '{other}' (expected apam or relu)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub block_channels: [usize; BLOCKS],
    pub kernel_size: usize,
    pub pool_schedule: [Pool; BLOCKS],
    pub activation_schedule: [Activation; BLOCKS],
    pub tlu_t: f64,
    pub use_batch_norm: bool,
    pub feature_dim: usize,
    pub constraint: Constraint,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        use Activation::{Apam, Relu};
        use Pool::{AvgStride2 as P, None as N};
        NetworkConfig {
            block_channels: [30, 30, 30, 64, 64, 128, 128, 256],
            kernel_size: 3,
            pool_schedule: [N, N, P, N, P, N, P, N],
            activation_schedule: [Apam, Relu, Relu, Apam, Apam, Apam, Apam, Apam],
            tlu_t: 3.0,
            use_batch_norm: true,
            feature_dim: 256,
            constraint: Constraint::Ours,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size {} must be odd",
                self.kernel_size
            )));
        }
        for (i, &c) in self.block_channels.iter().enumerate() {
            if c == 0 {
                return Err(Error::Config(format!("block {i} has zero channels")));
            }
        }
        // The first two blocks must keep full resolution so the detector sees
        // unsmoothed residual statistics.
        for i in 0..2 {
            if self.pool_schedule[i] != Pool::None {
                return Err(Error::Config(format!(
                    "pool_schedule[{i}] must be none (blocks 1-2 keep full resolution)"
                )));
            }
        }
        if !(self.tlu_t > 0.0) {
            return Err(Error::Config(format!(
                "tlu_t {} must be positive",
                self.tlu_t
            )));
        }
        if self.feature_dim != self.block_channels[BLOCKS - 1] {
            return Err(Error::Config(format!(
                "feature_dim {} != last block width {}",
                self.feature_dim,
                self.block_channels[BLOCKS - 1]
            )));
        }
        Ok(())
    }

    /// All-ReLU copy of this config (adaptive thresholds disabled).
    pub fn with_all_relu(&self) -> NetworkConfig {
        let mut cfg = self.clone();
        cfg.activation_schedule = [Activation::Relu; BLOCKS];
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnParams {
    fn init(c: usize) -> BnParams {
        BnParams {
            gamma: Tensor::full(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub conv_w: Tensor,
    pub bn: Option<BnParams>,
    pub apam: Option<ApamParams>,
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub cfg: NetworkConfig,
    pub bank: FilterBank,
    pub blocks: Vec<Block>,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

/// He-uniform draw over [-sqrt(6 / fan_in), +sqrt(6 / fan_in)].
fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut rng::Stream) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

pub fn init_model(cfg: &NetworkConfig, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    let bank = FilterBank::new(cfg.constraint);
    let k = cfg.kernel_size;
    let mut blocks = Vec::with_capacity(BLOCKS);
    let mut cin = srm::FILTER_COUNT;
    for i in 0..BLOCKS {
        let cout = cfg.block_channels[i];
        let mut conv_rng = rng::stream(rng::derive(seed, 10 + i as u64));
        let conv_w = he_uniform(&[cout, cin, k, k], cin * k * k, &mut conv_rng);
        let bn = cfg.use_batch_norm.then(|| BnParams::init(cout));
        let apam = (cfg.activation_schedule[i] == Activation::Apam).then(|| {
            let mut apam_rng = rng::stream(rng::derive(seed, 50 + i as u64));
            ApamParams::init(cout, &mut apam_rng)
        });
        blocks.push(Block { conv_w, bn, apam });
        cin = cout;
    }
    let mut fc_rng = rng::stream(rng::derive(seed, 90));
    let fc_w = he_uniform(&[cfg.feature_dim, 1], cfg.feature_dim, &mut fc_rng);
    let fc_b = Tensor::zeros(&[1]);
    Ok(ModelState {
        cfg: cfg.clone(),
        bank,
        blocks,
        fc_w,
        fc_b,
    })
}

impl ModelState {
    /// Stable parameter order shared by `params`, `params_mut`, and the
    /// leaves built in `forward_graph`; the optimizer and checkpoints key
    /// state by these names.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["bank.kernels".to_string()];
        for (i, blk) in self.blocks.iter().enumerate() {
            names.push(format!("block{i}.conv_w"));
            if blk.bn.is_some() {
                names.push(format!("block{i}.bn_gamma"));
                names.push(format!("block{i}.bn_beta"));
            }
            if blk.apam.is_some() {
                names.push(format!("block{i}.apam_w1"));
                names.push(format!("block{i}.apam_b1"));
                names.push(format!("block{i}.apam_w2"));
                names.push(format!("block{i}.apam_b2"));
            }
        }
        names.push("fc.w".to_string());
        names.push("fc.b".to_string());
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = vec![self.bank.kernels()];
        for blk in &self.blocks {
            out.push(&blk.conv_w);
            if let Some(bn) = &blk.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
            if let Some(ap) = &blk.apam {
                out.push(&ap.w1);
                out.push(&ap.b1);
                out.push(&ap.w2);
                out.push(&ap.b2);
            }
        }
        out.push(&self.fc_w);
        out.push(&self.fc_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![self.bank.kernels_mut()];
        for blk in &mut self.blocks {
            out.push(&mut blk.conv_w);
            if let Some(bn) = &mut blk.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
            if let Some(ap) = &mut blk.apam {
                out.push(&mut ap.w1);
                out.push(&mut ap.b1);
                out.push(&mut ap.w2);
                out.push(&mut ap.b2);
            }
        }
        out.push(&mut self.fc_w);
        out.push(&mut self.fc_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Structural and numeric consistency: shapes match the config, optional
    /// parts match the schedules, every value is finite, and the bank obeys
    /// its projection invariants.
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.bank.constraint() != self.cfg.constraint {
            return Err(Error::Config(format!(
                "bank constraint {} != config constraint {}",
                self.bank.constraint(),
                self.cfg.constraint
            )));
        }
        self.bank.check_invariants()?;
        if self.blocks.len() != BLOCKS {
            return Err(Error::Config(format!(
                "{} blocks in state, expected {BLOCKS}",
                self.blocks.len()
            )));
        }
        let k = self.cfg.kernel_size;
        let mut cin = srm::FILTER_COUNT;
        for (i, blk) in self.blocks.iter().enumerate() {
            let cout = self.cfg.block_channels[i];
            if blk.conv_w.shape() != [cout, cin, k, k] {
                return Err(Error::Config(format!(
                    "block{i}.conv_w shape {:?}, expected [{cout}, {cin}, {k}, {k}]",
                    blk.conv_w.shape()
                )));
            }
            blk.conv_w.validate_finite(&format!("block{i}.conv_w"))?;
            match (&blk.bn, self.cfg.use_batch_norm) {
                (Some(bn), true) => {
                    for (t, part) in [(&bn.gamma, "gamma"), (&bn.beta, "beta")] {
                        if t.shape() != [cout] {
                            return Err(Error::Config(format!(
                                "block{i}.bn_{part} shape {:?}, expected [{cout}]",
                                t.shape()
                            )));
                        }
                        t.validate_finite(&format!("block{i}.bn_{part}"))?;
                    }
                    if bn.running_mean.len() != cout || bn.running_var.len() != cout {
                        return Err(Error::Config(format!(
                            "block{i} running stats length != {cout}"
                        )));
                    }
                    if bn
                        .running_mean
                        .iter()
                        .chain(&bn.running_var)
                        .any(|v| !v.is_finite())
                    {
                        return Err(Error::Config(format!(
                            "block{i} running stats not finite"
                        )));
                    }
                }
                (None, false) => {}
                (got, _) => {
                    return Err(Error::Config(format!(
                        "block{i} batch-norm state {} but use_batch_norm={}",
                        if got.is_some() { "present" } else { "missing" },
                        self.cfg.use_batch_norm
                    )));
                }
            }
            match (&blk.apam, self.cfg.activation_schedule[i]) {
                (Some(ap), Activation::Apam) => ap.validate(cout)?,
                (None, Activation::Relu) => {}
                (got, want) => {
                    return Err(Error::Config(format!(
                        "block{i} threshold params {} but activation is {}",
                        if got.is_some() { "present" } else { "missing" },
                        want.name()
                    )));
                }
            }
            cin = cout;
        }
        if self.fc_w.shape() != [self.cfg.feature_dim, 1] {
            return Err(Error::Config(format!(
                "fc.w shape {:?}, expected [{}, 1]",
                self.fc_w.shape(),
                self.cfg.feature_dim
            )));
        }
        if self.fc_b.shape() != [1] {
            return Err(Error::Config(format!(
                "fc.b shape {:?}, expected [1]",
                self.fc_b.shape()
            )));
        }
        self.fc_w.validate_finite("fc.w")?;
        self.fc_b.validate_finite("fc.b")?;
        Ok(())
    }

    /// Folds train-mode batch statistics into the running averages:
    /// running = (1 - momentum) * running + momentum * batch.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (i, s) in stats {
            let bn = self.blocks[*i]
                .bn
                .as_mut()
                .expect("stats only come from blocks with batch norm");
            for (r, &b) in bn.running_mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, &b) in bn.running_var.iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct GraphOut {
    /// Sigmoid probabilities, shape [N, 1].
    pub p: NodeId,
    /// Pre-sigmoid logits, shape [N, 1].
    pub logits: NodeId,
    /// Global-average-pooled features, shape [N, feature_dim].
    pub features: NodeId,
    /// Residual stage output (post filter bank, pre TLU), [N, 30, H, W].
    pub residuals: NodeId,
    /// Input of block 1's activation (the one closest to the residual
    /// stage), tapped for the bright-spot diagnostic.
    pub block1_act_input: NodeId,
    /// Parameter leaves in `ModelState::param_names` order.
    pub params: Vec<(String, NodeId)>,
    /// Per-block batch statistics gathered in train mode (empty in eval).
    pub batch_stats: Vec<(usize, BatchStats)>,
}

pub fn forward_graph(
    tape: &mut Tape,
    images: &Tensor,
    model: &ModelState,
    mode: Mode,
    with_grad: bool,
) -> Result<GraphOut> {
    forward_graph_override(tape, images, model, mode, with_grad, None)
}

/// `forward_graph` with one leaf substituted by a caller-built node, keyed
/// by parameter name ("input" swaps the replicate-padded image batch).
/// Gradient checks differentiate the whole network with respect to a single
/// tensor this way.
pub fn forward_graph_override(
    tape: &mut Tape,
    images: &Tensor,
    model: &ModelState,
    mode: Mode,
    with_grad: bool,
    override_leaf: Option<(&str, NodeId)>,
) -> Result<GraphOut> {
    let cfg = &model.cfg;
    cfg.validate()?;
    let pad = KERNEL_SIZE / 2;
    let sub = |name: &str| -> Option<NodeId> {
        override_leaf.and_then(|(n, id)| (n == name).then_some(id))
    };
    let ximg = match sub("input") {
        Some(id) => id,
        None => {
            let padded = srm::replicate_pad(images, pad, "forward")?;
            tape.leaf(padded, false)
        }
    };
    let mut params = Vec::new();
    let leaf = |tape: &mut Tape,
                    params: &mut Vec<(String, NodeId)>,
                    name: String,
                    value: &Tensor|
     -> NodeId {
        let id = match sub(&name) {
            Some(id) => id,
            None => tape.leaf(value.clone(), with_grad),
        };
        params.push((name, id));
        id
    };

    let wbank = leaf(tape, &mut params, "bank.kernels".into(), model.bank.kernels());
    let residuals = tape.conv2d(ximg, wbank, 1, 0)?;
    let tlu = TluLayer::new(cfg.tlu_t)?;
    let clamped = tlu.forward(tape, residuals)?;
    let mut cur = tape.abs(clamped);

    let mut block1_act_input = None;
    let mut batch_stats = Vec::new();
    for (i, blk) in model.blocks.iter().enumerate() {
        let wconv = leaf(tape, &mut params, format!("block{i}.conv_w"), &blk.conv_w);
        cur = tape.conv2d(cur, wconv, 1, cfg.kernel_size / 2)?;
        if let Some(bn) = &blk.bn {
            let gamma = leaf(tape, &mut params, format!("block{i}.bn_gamma"), &bn.gamma);
            let beta = leaf(tape, &mut params, format!("block{i}.bn_beta"), &bn.beta);
            cur = match mode {
                Mode::Train => {
                    let (y, stats) = tape.batch_norm(cur, gamma, beta, BN_EPS)?;
                    batch_stats.push((i, stats));
                    y
                }
                Mode::Eval => tape.batch_norm_eval(
                    cur,
                    gamma,
                    beta,
                    &bn.running_mean,
                    &bn.running_var,
                    BN_EPS,
                )?,
            };
        }
        if i == 0 {
            block1_act_input = Some(cur);
        }
        cur = match cfg.activation_schedule[i] {
            Activation::Apam => {
                let ap = blk
                    .apam
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("block{i} missing threshold params")))?;
                let nodes = ApamNodes {
                    w1: leaf(tape, &mut params, format!("block{i}.apam_w1"), &ap.w1),
                    b1: leaf(tape, &mut params, format!("block{i}.apam_b1"), &ap.b1),
                    w2: leaf(tape, &mut params, format!("block{i}.apam_w2"), &ap.w2),
                    b2: leaf(tape, &mut params, format!("block{i}.apam_b2"), &ap.b2),
                };
                let (y, _alpha) = apam_forward(tape, cur, nodes)?;
                y
            }
            Activation::Relu => tape.relu(cur),
        };
        if cfg.pool_schedule[i] == Pool::AvgStride2 {
            cur = tape.avg_pool2(cur)?;
        }
    }

    let features = tape.global_avg_pool(cur)?;
    let fc_w = leaf(tape, &mut params, "fc.w".into(), &model.fc_w);
    let fc_b = leaf(tape, &mut params, "fc.b".into(), &model.fc_b);
    let logits = tape.linear(features, fc_w, fc_b)?;
    let p = tape.sigmoid(logits);
    Ok(GraphOut {
        p,
        logits,
        features,
        residuals,
        block1_act_input: block1_act_input.expect("at least one block"),
        params,
        batch_stats,
    })
}

/// Value-level forward: probabilities (shape [N]) and pooled features.
/// Eval mode normalizes with running statistics and never mutates state.
pub fn forward(model: &ModelState, images: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let out = forward_graph(&mut tape, images, model, mode, false)?;
    let n = images.shape()[0];
    let p = Tensor::new(&[n], tape.value(out.p).data().to_vec())?;
    let features = tape.value(out.features).clone();
    Ok((p, features))
}

/// One row of the component ablation table: a named network/loss pairing.
#[derive(Clone, Debug)]
pub struct AblationVariant {
    pub name: &'static str,
    pub net: NetworkConfig,
    pub lambda: f64,
}

/// The eight component combinations, from the plain all-ReLU unconstrained
/// baseline to the full detector. `base` supplies everything the toggles do
/// not touch (widths, pooling, thresholds).
pub fn ablation_variants(base: &NetworkConfig) -> Vec<AblationVariant> {
    let rows: [(&'static str, bool, Constraint, f64); 8] = [
        ("origin", false, Constraint::Without, 0.0),
        ("apam", true, Constraint::Without, 0.0),
        ("constraint", false, Constraint::Ours, 0.0),
        ("contrastive", false, Constraint::Without, 0.05),
        ("apam+constraint", true, Constraint::Ours, 0.0),
        ("apam+contrastive", true, Constraint::Without, 0.05),
        ("constraint+contrastive", false, Constraint::Ours, 0.05),
        ("full", true, Constraint::Ours, 0.05),
    ];
    rows.iter()
        .map(|&(name, apam, constraint, lambda)| {
            let mut net = if apam {
                base.clone()
            } else {
                base.with_all_relu()
            };
            net.constraint = constraint;
            AblationVariant { name, net, lambda }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check_guarded;
    use crate::losses::{self, LossConfig};

    /// Narrow copy of the default topology for cheap forward passes.
    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            block_channels: [6, 6, 6, 8, 8, 8, 8, 8],
            feature_dim: 8,
            ..NetworkConfig::default()
        }
    }

    fn rand_images(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed);
        Tensor::rand_uniform(&[n, 1, h, w], 0.0, 255.0, &mut r)
    }

    #[test]
    fn default_config_is_valid_and_matches_published_schedule() {
        let cfg = NetworkConfig::default();
        cfg.validate().unwrap();
        let apam: Vec<usize> = (0..BLOCKS)
            .filter(|&i| cfg.activation_schedule[i] == Activation::Apam)
            .map(|i| i + 1)
            .collect();
        assert_eq!(apam, vec![1, 4, 5, 6, 7, 8]);
        let pooled: Vec<usize> = (0..BLOCKS)
            .filter(|&i| cfg.pool_schedule[i] == Pool::AvgStride2)
            .map(|i| i + 1)
            .collect();
        assert_eq!(pooled, vec![3, 5, 7]);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = NetworkConfig::default();
        cfg.kernel_size = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = NetworkConfig::default();
        cfg.pool_schedule[0] = Pool::AvgStride2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = NetworkConfig::default();
        cfg.tlu_t = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = NetworkConfig::default();
        cfg.feature_dim = 128;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn default_parameter_count_is_pinned() {
        let model = init_model(&NetworkConfig::default(), 0).unwrap();
        assert_eq!(model.param_count(), 920_535);
        assert_eq!(model.param_names().len(), model.params().len());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = NetworkConfig::default();
        let a = init_model(&cfg, 7).unwrap();
        let b = init_model(&cfg, 7).unwrap();
        for (ta, tb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(ta.data(), tb.data());
        }

        let c = init_model(&cfg, 8).unwrap();
        assert_ne!(a.blocks[0].conv_w.data(), c.blocks[0].conv_w.data());
        assert_eq!(a.bank.kernels().data(), c.bank.kernels().data());
        a.validate().unwrap();
    }

    #[test]
    fn param_accessors_agree_on_order_and_shapes() {
        let mut model = init_model(&small_cfg(), 3).unwrap();
        let names = model.param_names();
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(names.len(), shapes.len());
        let muts: Vec<Vec<usize>> = model
            .params_mut()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        assert_eq!(shapes, muts);
        assert_eq!(names[0], "bank.kernels");
        assert_eq!(names[names.len() - 2], "fc.w");
        assert_eq!(shapes[0], vec![30, 1, 5, 5]);
    }

    #[test]
    fn forward_leaves_match_param_order() {
        let model = init_model(&small_cfg(), 5).unwrap();
        let images = rand_images(2, 16, 16, 11);
        let mut tape = Tape::new();
        let out = forward_graph(&mut tape, &images, &model, Mode::Train, true).unwrap();
        let got: Vec<&str> = out.params.iter().map(|(n, _)| n.as_str()).collect();
        let want = model.param_names();
        assert_eq!(got, want.iter().map(String::as_str).collect::<Vec<_>>());
        for ((_, id), t) in out.params.iter().zip(model.params()) {
            assert_eq!(tape.value(*id).data(), t.data());
        }
    }

    #[test]
    fn forward_shapes_and_probability_range() {
        let model = init_model(&small_cfg(), 1).unwrap();
        let images = rand_images(4, 32, 32, 2);
        let (p, features) = forward(&model, &images, Mode::Eval).unwrap();
        assert_eq!(p.shape(), &[4]);
        assert_eq!(features.shape(), &[4, 8]);
        for &v in p.data() {
            assert!(v > 0.0 && v < 1.0, "p = {v}");
        }
        features.validate_finite("features").unwrap();
    }

    #[test]
    fn constant_images_give_level_independent_output() {
        let model = init_model(&small_cfg(), 9).unwrap();
        let mut outputs = Vec::new();
        for level in [0.0, 17.0, 128.0, 255.0] {
            let img = Tensor::full(&[1, 1, 16, 16], level);
            let (p, _) = forward(&model, &img, Mode::Eval).unwrap();
            outputs.push(p.data()[0]);
        }
        for w in outputs.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-9, "{} vs {}", w[0], w[1]);
        }
    }

    #[test]
    fn duplicated_rows_get_identical_outputs_in_eval() {
        let model = init_model(&small_cfg(), 13).unwrap();
        let one = rand_images(1, 16, 16, 17);
        let mut dup = Tensor::zeros(&[3, 1, 16, 16]);
        for i in 0..3 {
            dup.data_mut()[i * 256..(i + 1) * 256].copy_from_slice(one.data());
        }
        let (p, features) = forward(&model, &dup, Mode::Eval).unwrap();
        assert_eq!(p.data()[0], p.data()[1]);
        assert_eq!(p.data()[1], p.data()[2]);
        assert_eq!(features.data()[..8], features.data()[8..16]);
    }

    #[test]
    fn train_mode_collects_stats_and_updates_running_averages() {
        let cfg = small_cfg();
        let mut model = init_model(&cfg, 21).unwrap();
        let images = rand_images(2, 16, 16, 22);
        let mut tape = Tape::new();
        let out = forward_graph(&mut tape, &images, &model, Mode::Train, false).unwrap();
        assert_eq!(out.batch_stats.len(), BLOCKS);
        let (i0, s0) = (&out.batch_stats[0].0, out.batch_stats[0].1.clone());
        assert_eq!(*i0, 0);
        model.update_running_stats(&out.batch_stats);
        let bn = model.blocks[0].bn.as_ref().unwrap();
        for c in 0..cfg.block_channels[0] {
            let want = 0.9 * 0.0 + 0.1 * s0.mean[c];
            assert!((bn.running_mean[c] - want).abs() < 1e-15);
            let want = 0.9 * 1.0 + 0.1 * s0.var[c];
            assert!((bn.running_var[c] - want).abs() < 1e-15);
        }

        let mut evtape = Tape::new();
        let ev = forward_graph(&mut evtape, &images, &model, Mode::Eval, false).unwrap();
        assert!(ev.batch_stats.is_empty());
    }

    #[test]
    fn eval_forward_is_reentrant_and_deterministic() {
        let model = init_model(&small_cfg(), 31).unwrap();
        let images = rand_images(2, 16, 16, 32);
        let (p1, f1) = forward(&model, &images, Mode::Eval).unwrap();
        let (p2, f2) = forward(&model, &images, Mode::Eval).unwrap();
        assert_eq!(p1.data(), p2.data());
        assert_eq!(f1.data(), f2.data());
    }

    #[test]
    fn state_validation_catches_mismatches() {
        let model = init_model(&small_cfg(), 41).unwrap();
        model.validate().unwrap();

        let mut broken = model.clone();
        broken.blocks[2].apam = broken.blocks[0].apam.clone();
        assert!(matches!(broken.validate(), Err(Error::Config(_))));

        let mut broken = model.clone();
        broken.fc_b = Tensor::zeros(&[2]);
        assert!(matches!(broken.validate(), Err(Error::Config(_))));

        let mut broken = model.clone();
        broken.blocks[1].conv_w.data_mut()[0] = f64::NAN;
        assert!(broken.validate().is_err());

        let mut broken = model.clone();
        broken.bank.kernels_mut().data_mut()[12] = 0.5;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn ablation_table_has_expected_toggles() {
        let base = NetworkConfig::default();
        let rows = ablation_variants(&base);
        assert_eq!(rows.len(), 8);
        let names: Vec<&str> = rows.iter().map(|r| r.name).collect();
        assert_eq!(
            names,
            vec![
                "origin",
                "apam",
                "constraint",
                "contrastive",
                "apam+constraint",
                "apam+contrastive",
                "constraint+contrastive",
                "full"
            ]
        );
        let origin = &rows[0];
        assert!(origin
            .net
            .activation_schedule
            .iter()
            .all(|&a| a == Activation::Relu));
        assert_eq!(origin.net.constraint, Constraint::Without);
        assert_eq!(origin.lambda, 0.0);
        let full = &rows[7];
        assert_eq!(full.net, base);
        assert_eq!(full.lambda, LossConfig::default().lambda);
        let constraint_only = &rows[2];
        assert_eq!(constraint_only.net.constraint, Constraint::Ours);
        assert!(constraint_only
            .net
            .activation_schedule
            .iter()
            .all(|&a| a == Activation::Relu));
        for row in &rows {
            row.net.validate().unwrap();
        }
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let cfg = NetworkConfig {
            block_channels: [4, 4, 4, 4, 4, 4, 4, 4],
            feature_dim: 4,
            ..NetworkConfig::default()
        };
        let model = init_model(&cfg, 51).unwrap();
        let images = rand_images(4, 12, 12, 52);
        let labels = [0u8, 1, 0, 1];
        let loss_cfg = LossConfig::default();

        for target in ["bank.kernels", "block0.conv_w", "block3.apam_w1", "fc.w"] {
            let f = |t: &mut Tape, x: NodeId| {
                let out =
                    forward_graph_override(t, &images, &model, Mode::Train, false, Some((target, x)))?;
                losses::combined_loss(t, out.logits, &labels, out.features, &loss_cfg)
            };
            let idx = model
                .param_names()
                .iter()
                .position(|n| n == target)
                .unwrap();
            let base = model.params()[idx].clone();
            let err = finite_diff_check_guarded(f, &base, 1e-5, 24, 99).unwrap();
            assert!(err < 1e-4, "{target}: {err}");
        }
    }

    #[test]
    fn input_override_differentiates_through_whole_stack() {
        let cfg = NetworkConfig {
            block_channels: [4, 4, 4, 4, 4, 4, 4, 4],
            feature_dim: 4,
            ..NetworkConfig::default()
        };
        let model = init_model(&cfg, 61).unwrap();
        let images = rand_images(4, 12, 12, 62);
        let labels = [0u8, 1, 0, 1];
        let loss_cfg = LossConfig::default();
        let padded = srm::replicate_pad(&images, 2, "test").unwrap();
        let f = |t: &mut Tape, x: NodeId| {
            let out =
                forward_graph_override(t, &images, &model, Mode::Train, false, Some(("input", x)))?;
            losses::combined_loss(t, out.logits, &labels, out.features, &loss_cfg)
        };
        let err = finite_diff_check_guarded(f, &padded, 1e-5, 24, 77).unwrap();
        assert!(err < 1e-4, "input: {err}");
    }
}
