//! AdaDelta training loop: weight decay, stepped learning-rate scale, the
//! per-step filter-bank projection, evaluation, checkpoints, and metric
//! logging.
//!
//! Determinism contract: with a fixed seed, batch order, update arithmetic,
//! metric rows, and checkpoint bytes are identical across runs. The epoch
//! index is the only optimizer clock: it salts the batch shuffle and drives
//! the learning-rate schedule, so resuming from a checkpoint replays the
//! un-interrupted trajectory bit for bit.

use crate::dataset::make_batches;
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image8};
use crate::losses::{combined_loss, interleaved_labels, LossConfig};
use crate::network::{forward, forward_graph, init_model, Mode, ModelState, NetworkConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;
use std::fs;
use std::path::{Path, PathBuf};

/// Probability clamp shared with the cross-entropy graph op.
const CE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub rho: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_scale: f64,
    pub step_epochs: usize,
    pub step_factor: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            rho: 0.95,
            eps: 1e-8,
            weight_decay: 5e-4,
            lr_scale: 1.0,
            step_epochs: 50,
            step_factor: 0.8,
            epochs: 300,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho {} outside (0, 1)", self.rho)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if !(self.lr_scale > 0.0) {
            return Err(Error::Config(format!(
                "lr_scale {} must be positive",
                self.lr_scale
            )));
        }
        if !(self.step_factor > 0.0 && self.step_factor <= 1.0) {
            return Err(Error::Config(format!(
                "step_factor {} outside (0, 1]",
                self.step_factor
            )));
        }
        if self.step_epochs == 0 {
            return Err(Error::Config("step_epochs must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BestVal {
    pub accuracy: f64,
    pub epoch: usize,
}

/// Optimizer state. Accumulator vectors line up with
/// [`ModelState::param_names`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub eg: Vec<Vec<f64>>,
    pub ed: Vec<Vec<f64>>,
    pub epoch: usize,
    pub best: Option<BestVal>,
}

impl TrainState {
    pub fn new(model: &ModelState) -> TrainState {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
        TrainState {
            eg: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            ed: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            epoch: 0,
            best: None,
        }
    }

    /// lr_scale0 * step_factor^floor(epoch / step_epochs).
    pub fn lr_scale(&self, cfg: &OptimConfig) -> f64 {
        cfg.lr_scale * cfg.step_factor.powi((self.epoch / cfg.step_epochs) as i32)
    }
}

/// One AdaDelta update over all parameters, in place. Applies weight decay
/// uniformly (the bank's center taps are re-pinned by the projection that
/// follows every step, not by an exemption here).
pub fn adadelta_step(
    names: &[String],
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut TrainState,
    cfg: &OptimConfig,
) -> Result<()> {
    cfg.validate()?;
    if names.len() != params.len() || grads.len() != params.len() || state.eg.len() != params.len()
    {
        return Err(Error::dim(
            "adadelta_step",
            format!(
                "{} names, {} params, {} grads, {} accumulators",
                names.len(),
                params.len(),
                grads.len(),
                state.eg.len()
            ),
        ));
    }
    for ((name, param), grad) in names.iter().zip(params.iter()).zip(grads) {
        if grad.len() != param.numel() {
            return Err(Error::dim(
                "adadelta_step",
                format!("{name}: {} grads for {} values", grad.len(), param.numel()),
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient for {name}"),
            });
        }
    }
    let scale = state.lr_scale(cfg);
    for (k, param) in params.iter_mut().enumerate() {
        let xs = param.data_mut();
        let (eg, ed) = (&mut state.eg[k], &mut state.ed[k]);
        for (i, x) in xs.iter_mut().enumerate() {
            let g = grads[k][i] + cfg.weight_decay * *x;
            eg[i] = cfg.rho * eg[i] + (1.0 - cfg.rho) * g * g;
            let delta = -((ed[i] + cfg.eps).sqrt() / (eg[i] + cfg.eps).sqrt()) * g * scale;
            ed[i] = cfg.rho * ed[i] + (1.0 - cfg.rho) * delta * delta;
            *x += delta;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub steps: usize,
    pub proj_resets: u64,
}

/// Runs one epoch over `pairs`: seeded shuffle into full batches, and for
/// each batch a forward pass, combined loss, backward pass, AdaDelta step,
/// and bank projection. Increments `state.epoch` on return. The step counter
/// equals the projection counter by construction; the bank invariants are
/// re-checked after every step.
pub fn train_epoch(
    model: &mut ModelState,
    pairs: &[(Image8, Image8)],
    loss_cfg: &LossConfig,
    optim_cfg: &OptimConfig,
    state: &mut TrainState,
    pairs_per_batch: usize,
) -> Result<EpochMetrics> {
    let batches = make_batches(pairs.len(), pairs_per_batch, optim_cfg.seed, state.epoch)?;
    if batches.is_empty() {
        return Err(Error::Config(format!(
            "no full batch: {} pairs with {pairs_per_batch} pairs per batch",
            pairs.len()
        )));
    }
    let resets_before = model.bank.reset_count();
    let names = model.param_names();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut steps = 0usize;
    let mut projections = 0usize;
    for batch in &batches {
        let mut refs = Vec::with_capacity(2 * batch.len());
        for &pi in batch {
            refs.push(&pairs[pi].0);
            refs.push(&pairs[pi].1);
        }
        let images = batch_tensor(&refs)?;
        let labels = interleaved_labels(batch.len());

        let mut tape = Tape::new();
        let out = forward_graph(&mut tape, &images, model, Mode::Train, true)?;
        let loss = combined_loss(&mut tape, out.logits, &labels, out.features, loss_cfg)?;
        tape.backward(loss)?;
        model.update_running_stats(&out.batch_stats);

        loss_sum += tape.value(loss).item()?;
        for (i, &p) in tape.value(out.p).data().iter().enumerate() {
            let stego = p >= 0.5;
            if stego == (labels[i] == 1) {
                correct += 1;
            }
        }
        seen += labels.len();

        let grads: Vec<&[f64]> = out
            .params
            .iter()
            .map(|(name, id)| {
                tape.grad(*id)
                    .ok_or_else(|| Error::Config(format!("no gradient for {name}")))
            })
            .collect::<Result<_>>()?;
        let mut params = model.params_mut();
        adadelta_step(&names, &mut params, &grads, state, optim_cfg)?;
        steps += 1;
        model.bank.project();
        projections += 1;
        model.bank.check_invariants()?;
    }
    assert_eq!(steps, projections);
    state.epoch += 1;
    Ok(EpochMetrics {
        mean_loss: loss_sum / steps as f64,
        accuracy: correct as f64 / seen as f64,
        steps,
        proj_resets: model.bank.reset_count() - resets_before,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
    pub false_alarm: f64,
    pub miss: f64,
}

/// Scores cover/stego pairs in eval mode (frozen batch-norm). A tie at
/// p = 0.5 is called stego. The loss is the mean cross-entropy term only;
/// the pair-separation term is a training regularizer. Chunking exists for
/// memory; per-image results do not depend on it.
pub fn evaluate(
    model: &ModelState,
    pairs: &[(Image8, Image8)],
    pairs_per_chunk: usize,
) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let chunk = pairs_per_chunk.max(1);
    let mut loss_sum = 0.0;
    let mut false_alarms = 0usize;
    let mut misses = 0usize;
    for group in pairs.chunks(chunk) {
        let mut refs = Vec::with_capacity(2 * group.len());
        for (c, s) in group {
            refs.push(c);
            refs.push(s);
        }
        let images = batch_tensor(&refs)?;
        let (p, _) = forward(model, &images, Mode::Eval)?;
        for (i, &pv) in p.data().iter().enumerate() {
            let is_stego = i % 2 == 1;
            let pred_stego = pv >= 0.5;
            match (is_stego, pred_stego) {
                (false, true) => false_alarms += 1,
                (true, false) => misses += 1,
                _ => {}
            }
            let q = if is_stego { pv } else { 1.0 - pv };
            loss_sum += -q.max(CE_CLAMP).ln();
        }
    }
    let n = pairs.len() as f64;
    Ok(EvalMetrics {
        accuracy: 1.0 - (false_alarms + misses) as f64 / (2.0 * n),
        loss: loss_sum / (2.0 * n),
        false_alarm: false_alarms as f64 / n,
        miss: misses as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr_scale: f64,
    pub proj_resets: u64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr_scale,proj_resets";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr_scale, r.proj_resets
        ));
    }
    s
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---- checkpoints ----

const CKPT_MAGIC: &[u8; 8] = b"SSCK0001";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Raw checkpoint payload: the canonical config text plus named tensors in
/// a fixed order (parameters, then batch-norm buffers, then both AdaDelta
/// accumulator families). Save of a loaded checkpoint reproduces the file
/// byte for byte.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub config_echo: String,
    pub epoch: usize,
    pub best: Option<BestVal>,
    pub entries: Vec<TensorEntry>,
}

fn entry(name: String, shape: &[usize], data: &[f64]) -> TensorEntry {
    TensorEntry {
        name,
        shape: shape.to_vec(),
        data: data.to_vec(),
    }
}

impl CheckpointData {
    pub fn from_parts(config_echo: &str, model: &ModelState, state: &TrainState) -> CheckpointData {
        let names = model.param_names();
        let mut entries = Vec::new();
        for (name, p) in names.iter().zip(model.params()) {
            entries.push(entry(format!("param.{name}"), p.shape(), p.data()));
        }
        for (i, block) in model.blocks.iter().enumerate() {
            if let Some(bn) = &block.bn {
                let c = bn.running_mean.len();
                entries.push(entry(format!("buffer.block{i}.bn_mean"), &[c], &bn.running_mean));
                entries.push(entry(format!("buffer.block{i}.bn_var"), &[c], &bn.running_var));
            }
        }
        for (name, eg) in names.iter().zip(&state.eg) {
            entries.push(entry(format!("optim.eg.{name}"), &[eg.len()], eg));
        }
        for (name, ed) in names.iter().zip(&state.ed) {
            entries.push(entry(format!("optim.ed.{name}"), &[ed.len()], ed));
        }
        CheckpointData {
            config_echo: config_echo.to_string(),
            epoch: state.epoch,
            best: state.best,
            entries,
        }
    }

    /// Rejects a checkpoint whose embedded config differs from the one the
    /// caller is running with; the message carries both texts.
    pub fn require_config(&self, expected: &str) -> Result<()> {
        if self.config_echo == expected {
            return Ok(());
        }
        Err(Error::Config(format!(
            "checkpoint was written under a different config\n\
             --- checkpoint config ---\n{}\n--- requested config ---\n{}",
            self.config_echo.trim_end(),
            expected.trim_end()
        )))
    }

    /// Rebuilds the model and optimizer state. Entry names, order, and
    /// shapes must match what `from_parts` produces for `cfg` exactly.
    pub fn instantiate(&self, cfg: &NetworkConfig) -> Result<(ModelState, TrainState)> {
        let mut model = init_model(cfg, 0)?;
        let mut state = TrainState::new(&model);
        state.epoch = self.epoch;
        state.best = self.best;
        let expect = CheckpointData::from_parts(&self.config_echo, &model, &state);
        if expect.entries.len() != self.entries.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, this config needs {}",
                self.entries.len(),
                expect.entries.len()
            )));
        }
        for (got, want) in self.entries.iter().zip(&expect.entries) {
            if got.name != want.name || got.shape != want.shape {
                return Err(Error::Data(format!(
                    "checkpoint tensor {} {:?} does not match expected {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        let names = model.param_names();
        let mut it = self.entries.iter();
        for p in model.params_mut() {
            p.data_mut().copy_from_slice(&it.next().unwrap().data);
        }
        for block in &mut model.blocks {
            if let Some(bn) = &mut block.bn {
                bn.running_mean.copy_from_slice(&it.next().unwrap().data);
                bn.running_var.copy_from_slice(&it.next().unwrap().data);
            }
        }
        for k in 0..names.len() {
            state.eg[k].copy_from_slice(&it.next().unwrap().data);
        }
        for k in 0..names.len() {
            state.ed[k].copy_from_slice(&it.next().unwrap().data);
        }
        model.validate()?;
        Ok((model, state))
    }

    /// Model weights and buffers only, with fresh optimizer state: the
    /// transfer path for warm-starting one payload from another.
    pub fn instantiate_weights(&self, cfg: &NetworkConfig) -> Result<ModelState> {
        let (model, _) = self.instantiate(cfg)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        put_bytes(&mut buf, self.config_echo.as_bytes());
        put_u64(&mut buf, self.epoch as u64);
        match self.best {
            None => buf.push(0),
            Some(b) => {
                buf.push(1);
                buf.extend_from_slice(&b.accuracy.to_le_bytes());
                put_u64(&mut buf, b.epoch as u64);
            }
        }
        put_u64(&mut buf, self.entries.len() as u64);
        for e in &self.entries {
            put_bytes(&mut buf, e.name.as_bytes());
            put_u64(&mut buf, e.shape.len() as u64);
            for &d in &e.shape {
                put_u64(&mut buf, d as u64);
            }
            for &v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<CheckpointData, (usize, String)> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != CKPT_MAGIC {
            if magic.starts_with(b"SSCK") {
                return Err((
                    4,
                    format!(
                        "checkpoint format version {} unsupported (need {})",
                        String::from_utf8_lossy(&magic[4..]),
                        String::from_utf8_lossy(&CKPT_MAGIC[4..])
                    ),
                ));
            }
            return Err((0, "not a checkpoint file (bad magic)".into()));
        }
        let config_echo = r.string("config text")?;
        let epoch = r.u64("epoch")? as usize;
        let best = match r.take(1, "best-val flag")?[0] {
            0 => None,
            1 => Some(BestVal {
                accuracy: r.f64("best-val accuracy")?,
                epoch: r.u64("best-val epoch")? as usize,
            }),
            b => return Err((r.pos - 1, format!("best-val flag byte {b} invalid"))),
        };
        let count = r.u64("tensor count")? as usize;
        let mut entries = Vec::new();
        for i in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u64("tensor rank")? as usize;
            if rank > 8 {
                return Err((r.pos - 8, format!("tensor {name} rank {rank} implausible")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("tensor dim")? as usize);
            }
            let numel: usize = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(
                (r.pos, format!("tensor {name} shape {shape:?} overflows")),
            )?;
            let raw = r.take(numel * 8, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(TensorEntry { name, shape, data });
            let _ = i;
        }
        if r.pos != bytes.len() {
            return Err((
                r.pos,
                format!("{} trailing bytes after checkpoint payload", bytes.len() - r.pos),
            ));
        }
        Ok(CheckpointData {
            config_echo,
            epoch,
            best,
            entries,
        })
    }
}

pub fn save_checkpoint(ckpt: &CheckpointData, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    CheckpointData::from_bytes(&bytes).map_err(|(offset, detail)| Error::Parse {
        path: Some(path.to_path_buf()),
        offset,
        detail,
    })
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    put_u64(buf, b.len() as u64);
    buf.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], (usize, String)> {
        if self.bytes.len() - self.pos < n {
            return Err((
                self.pos,
                format!(
                    "truncated reading {what}: {} of {n} bytes left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, (usize, String)> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> std::result::Result<f64, (usize, String)> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> std::result::Result<String, (usize, String)> {
        let at = self.pos;
        let len = self.u64(what)? as usize;
        if len > self.bytes.len() {
            return Err((at, format!("{what} length {len} exceeds the file size")));
        }
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|e| (at + 8 + e.utf8_error().valid_up_to(), format!("{what} is not UTF-8")))
    }
}

// ---- fit loop ----

#[derive(Clone, Debug)]
pub struct FitSession<'a> {
    pub train_pairs: &'a [(Image8, Image8)],
    pub val_pairs: &'a [(Image8, Image8)],
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub pairs_per_batch: usize,
    /// Stop once train accuracy moves less than `early_stop_delta` across
    /// this many consecutive epochs. Zero disables the rule.
    pub early_stop_window: usize,
    pub early_stop_delta: f64,
    pub config_echo: String,
    /// When set, `last.ckpt` is rewritten every epoch and `best.ckpt`
    /// whenever validation accuracy improves.
    pub ckpt_dir: Option<PathBuf>,
    /// Called with each completed epoch row.
    pub progress: Option<fn(&MetricsRow)>,
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub rows: Vec<MetricsRow>,
    pub best: Option<BestVal>,
    pub stopped_early: bool,
}

/// Trains until the epoch budget or the train-accuracy convergence rule
/// fires, evaluating on the validation pairs once per epoch. Resumable:
/// passing a model/state pair restored from `last.ckpt` continues the same
/// trajectory.
pub fn fit(model: &mut ModelState, state: &mut TrainState, session: &FitSession) -> Result<FitOutput> {
    session.optim.validate()?;
    session.loss.validate()?;
    let mut rows = Vec::new();
    let mut stopped_early = false;
    let mut acc_history: Vec<f64> = Vec::new();
    while state.epoch < session.optim.epochs {
        let lr_scale = state.lr_scale(&session.optim);
        let epoch = state.epoch;
        let tm = train_epoch(
            model,
            session.train_pairs,
            &session.loss,
            &session.optim,
            state,
            session.pairs_per_batch,
        )?;
        let vm = evaluate(model, session.val_pairs, session.pairs_per_batch)?;
        let row = MetricsRow {
            epoch,
            train_loss: tm.mean_loss,
            train_acc: tm.accuracy,
            val_loss: vm.loss,
            val_acc: vm.accuracy,
            lr_scale,
            proj_resets: tm.proj_resets,
        };
        if let Some(notify) = session.progress {
            notify(&row);
        }
        rows.push(row);
        acc_history.push(tm.accuracy);
        let improved = state
            .best
            .map_or(true, |b| vm.accuracy > b.accuracy);
        if improved {
            state.best = Some(BestVal {
                accuracy: vm.accuracy,
                epoch,
            });
        }
        if let Some(dir) = &session.ckpt_dir {
            let ckpt = CheckpointData::from_parts(&session.config_echo, model, state);
            save_checkpoint(&ckpt, &dir.join("last.ckpt"))?;
            if improved {
                save_checkpoint(&ckpt, &dir.join("best.ckpt"))?;
            }
        }
        let w = session.early_stop_window;
        if w > 0 && acc_history.len() >= w {
            let tail = &acc_history[acc_history.len() - w..];
            let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < session.early_stop_delta {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(FitOutput {
        rows,
        best: state.best,
        stopped_early,
    })
}
