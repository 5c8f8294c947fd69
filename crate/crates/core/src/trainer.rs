//! Two-stage training: cross-set mixing with the linear classifier, then
//! prototype alignment; plus the weak-only baseline, checkpoints and the
//! ablation driver.

use crate::augment::{strong_views, weak_augment, CutMix, WeakAugSpec, WeakView};
use crate::backbone::{ema_copy, Tensor, UNet};
use crate::config::{Method, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_model, MetricReport};
use crate::grid::Grid;
use crate::labels::{sample_batch, Dataset, PartialLabelMap, SampleRecord};
use crate::losses::{partial_bce_logits, strong_view_loss, BinaryTargets, LinearGrad, LossComponents, StrongView};
use crate::prototypes::{DualBanks, PrototypeBank, UnitEmbeddings};
use crate::teacher::teacher_step;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// `lr0 * (1 - t / T)^power`.
pub fn poly_lr(lr0: f64, step: u64, total: u64, power: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 - step as f64 / total as f64).max(0.0).powf(power)
}

/// SGD with momentum and L2 weight decay folded into the gradient.
pub fn sgd_update(params: &mut [f32], grads: &[f32], velocity: &mut [f32], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = m * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

pub fn stack_images(images: &[&Grid<f32>]) -> Result<Tensor<f32>> {
    let (h, w) = images.first().map(|g| g.dims()).ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for g in images {
        if g.dims() != (h, w) {
            return Err(Error::Shape(format!("image {:?} in a batch of {h}x{w}", g.dims())));
        }
        data.extend_from_slice(&g.data);
    }
    Ok(Tensor::from_vec(images.len(), 1, h, w, data))
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

fn scaled_tensor(like: &Tensor<f32>, data: &[f64], scale: f64) -> Tensor<f32> {
    Tensor::from_vec(like.n, like.c, like.h, like.w, data.iter().map(|&v| (v * scale) as f32).collect())
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: u8,
    /// Steps completed in the current stage.
    pub step: u64,
    pub total_steps: u64,
    pub global_step: u64,
    pub student: UNet<f32>,
    pub teacher: UNet<f32>,
    pub velocity: Vec<f32>,
    pub banks: Option<DualBanks>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps
    }
}

/// One logged row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossComponents,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,L_pbce_weak,L_linear_s,L_lproto,L_ulproto,L_ppd,L_ppc,total,lr";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, l.pbce_weak, l.linear_s, l.lproto, l.ulproto, l.ppd, l.ppc, l.total, self.lr
        )
    }
}

pub fn steps_per_epoch(num_train: usize, batch_size: usize) -> u64 {
    (num_train / batch_size.max(1)).max(1) as u64
}

/// Steps of a stage for a method; the baseline runs one stage covering both
/// epoch budgets.
pub fn stage_steps(config: &TrainConfig, stage: u8, num_train: usize) -> u64 {
    let spe = steps_per_epoch(num_train, config.schedule.batch_size);
    let epochs = match (config.method, stage) {
        (Method::Baseline, _) => config.schedule.stage1_epochs + config.schedule.stage2_epochs,
        (_, 1) => config.schedule.stage1_epochs,
        _ => config.schedule.stage2_epochs,
    };
    epochs as u64 * spe
}

/// Training loop over an in-memory training set.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub data: &'a [SampleRecord],
    pub num_classes: usize,
    pub state: TrainState,
    /// Directory receiving a diagnostic dump when a loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    /// Fresh stage-1 (or baseline) run.
    pub fn stage1(config: TrainConfig, data: &'a [SampleRecord], num_classes: usize) -> Result<Self> {
        config.validate()?;
        check_data(data, num_classes, &config)?;
        let student = UNet::<f32>::new(config.model.clone(), num_classes, config.seed)?;
        let teacher = student.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let state = TrainState {
            stage: 1,
            step: 0,
            total_steps: stage_steps(&config, 1, data.len()),
            global_step: 0,
            velocity: vec![0.0; student.num_params()],
            student,
            teacher,
            banks: None,
            rng,
        };
        Ok(Self {
            config,
            data,
            num_classes,
            state,
            dump_dir: None,
        })
    }

    /// Stage 2 initialized from a finished stage-1 state: student and teacher
    /// both start from the stage-1 student, the optimizer restarts and the
    /// random stream continues.
    pub fn stage2(config: TrainConfig, data: &'a [SampleRecord], num_classes: usize, stage1: &TrainState) -> Result<Self> {
        config.validate()?;
        check_data(data, num_classes, &config)?;
        if config.method == Method::Baseline {
            return Err(Error::Config("the baseline has no second stage".into()));
        }
        if stage1.stage != 1 {
            return Err(Error::Checkpoint(format!("expected a stage-1 checkpoint, got stage {}", stage1.stage)));
        }
        if stage1.student.config != config.model || stage1.student.num_classes != num_classes {
            return Err(Error::Checkpoint("stage-1 model does not match the configuration".into()));
        }
        let banks = (config.method == Method::Full && config.loss.prototypes_active())
            .then(|| DualBanks::new(num_classes, config.proto.k, config.model.embed_dim, config.proto.momentum))
            .transpose()?;
        let state = TrainState {
            stage: 2,
            step: 0,
            total_steps: stage_steps(&config, 2, data.len()),
            global_step: stage1.global_step,
            student: stage1.student.clone(),
            teacher: stage1.student.clone(),
            velocity: vec![0.0; stage1.student.num_params()],
            banks,
            rng: stage1.rng.clone(),
        };
        Ok(Self {
            config,
            data,
            num_classes,
            state,
            dump_dir: None,
        })
    }

    pub fn resume(config: TrainConfig, data: &'a [SampleRecord], num_classes: usize, state: TrainState) -> Result<Self> {
        config.validate()?;
        check_data(data, num_classes, &config)?;
        Ok(Self {
            config,
            data,
            num_classes,
            state,
            dump_dir: None,
        })
    }

    fn uses_strong_views(&self) -> bool {
        self.config.method != Method::Baseline
    }

    fn warmup_steps(&self) -> u64 {
        self.config.proto.warmup_epochs as u64 * steps_per_epoch(self.data.len(), self.config.schedule.batch_size)
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let cfg = &self.config;
        let c = self.num_classes;
        let st = &mut self.state;
        let lr = poly_lr(cfg.optim.lr, st.step, st.total_steps, cfg.optim.poly_power);

        let idx = sample_batch(self.data.len(), cfg.schedule.batch_size, &mut st.rng)?;
        let weak: Vec<SampleRecord> = idx
            .iter()
            .map(|&i| {
                let spec = WeakAugSpec::sample(cfg.aug.weak.max_angle, cfg.aug.weak.scale_range, &mut st.rng);
                weak_augment(&self.data[i], spec)
            })
            .collect();
        let x_w = stack_images(&weak.iter().map(|r| &r.image).collect::<Vec<_>>())?;
        let partials: Vec<&PartialLabelMap> = weak.iter().map(|r| &r.partial_label).collect();

        let mut grads = vec![0.0f32; st.student.num_params()];
        let tape = st.student.forward(&x_w)?;
        let weak_loss = partial_bce_logits(&to_f64(&tape.probs), &BinaryTargets::from_partial(&partials, c));
        st.student.backward(&tape, &scaled_tensor(&tape.logits, &weak_loss.grad, 1.0), None, &mut grads);
        drop(tape);

        let mut views_out = Vec::new();
        let pseudo_warm = st.stage == 2 || st.step >= cfg.pseudo.warmup_epochs as u64 * steps_per_epoch(self.data.len(), cfg.schedule.batch_size);
        if cfg.method != Method::Baseline && pseudo_warm {
            let pseudo = teacher_step(&st.teacher, &x_w, &partials, cfg.tau, cfg.pseudo.conflict)?;
            let weak_views: Vec<WeakView> = weak
                .iter()
                .zip(pseudo)
                .map(|(r, p)| WeakView {
                    image: r.image.clone(),
                    pseudo: p,
                    partial: r.partial_label.classes.clone(),
                })
                .collect();
            let mixer = CutMix {
                placement: cfg.aug.strong.placement,
            };
            let views = strong_views(&weak_views, cfg.aug.strong.views, &mixer, &mut st.rng)?;
            let m = views.len() as f64;
            let warm = st.step >= self.config.proto.warmup_epochs as u64 * steps_per_epoch(self.data.len(), cfg.schedule.batch_size);
            for view in views {
                let x_s = stack_images(&view.iter().map(|s| &s.image).collect::<Vec<_>>())?;
                let targets: Vec<u8> = view.iter().flat_map(|s| s.pseudo.classes.data.iter().copied()).collect();
                let tape = st.student.forward(&x_s)?;
                let e = &tape.embeddings;
                let hw = e.h * e.w;
                let emb = match &st.banks {
                    Some(_) => UnitEmbeddings::from_nchw(&e.data, e.n, e.c, hw),
                    None => UnitEmbeddings::from_pixel_major(&[], e.c),
                };
                let bank_pair = st
                    .banks
                    .as_ref()
                    .filter(|b| warm && b.is_fully_initialized())
                    .map(|b| (&b.labeled, &b.unlabeled));
                let probs = to_f64(&tape.probs);
                let loss = strong_view_loss(
                    &StrongView {
                        probs: &probs,
                        embeddings: &emb,
                        targets: &targets,
                        batch: view.len(),
                        num_classes: c,
                    },
                    bank_pair,
                    &cfg.loss,
                    LinearGrad::Logits,
                )?;
                let d_logits = scaled_tensor(&tape.logits, &loss.grad_linear, 1.0 / m);
                let d_embed = (!loss.grad_embed.is_empty()).then(|| {
                    let raw: Vec<f64> = emb.backprop_nchw(&loss.grad_embed, hw);
                    scaled_tensor(e, &raw, 1.0 / m)
                });
                st.student.backward(&tape, &d_logits, d_embed.as_ref(), &mut grads);
                if let Some(banks) = st.banks.as_mut() {
                    let partial: Vec<i16> = view.iter().flat_map(|s| s.partial.data.iter().copied()).collect();
                    banks.update(&emb, &partial, &targets, &mut st.rng)?;
                }
                views_out.push(loss);
            }
        }

        let losses = LossComponents::combine(weak_loss.value, &views_out, &cfg.loss);
        if !losses.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            let detail = format!("batch {idx:?}, losses {losses:?}");
            if let Some(dir) = &self.dump_dir {
                let path = dir.join(format!("nan_dump_step{}.json", st.global_step));
                let dump = serde_json::json!({
                    "stage": st.stage,
                    "step": st.step,
                    "global_step": st.global_step,
                    "batch": idx,
                    "losses": losses,
                    "lr": lr,
                });
                std::fs::write(&path, dump.to_string()).map_err(|e| Error::io(&path, e))?;
            }
            return Err(Error::NonFiniteLoss {
                stage: st.stage,
                step: st.global_step,
                detail,
            });
        }
        sgd_update(&mut st.student.params, &grads, &mut st.velocity, lr, cfg.optim.momentum, cfg.optim.weight_decay);
        ema_copy(&st.student, &mut st.teacher, cfg.pseudo.teacher_ema)?;
        let record = StepRecord {
            step: st.global_step,
            losses,
            lr,
        };
        st.step += 1;
        st.global_step += 1;
        Ok(record)
    }

    /// Runs until the stage ends or `max_steps` more steps were taken.
    pub fn run(&mut self, max_steps: Option<u64>, mut on_step: impl FnMut(&StepRecord, &TrainState) -> Result<()>) -> Result<()> {
        let mut taken = 0;
        while !self.state.is_finished() && max_steps.is_none_or(|m| taken < m) {
            let rec = self.step()?;
            on_step(&rec, &self.state)?;
            taken += 1;
        }
        Ok(())
    }

    /// Whether the prototype terms are active at the current step.
    pub fn prototypes_active(&self) -> bool {
        self.uses_strong_views()
            && self.state.step >= self.warmup_steps()
            && self.state.banks.as_ref().is_some_and(|b| b.is_fully_initialized())
    }
}

fn check_data(data: &[SampleRecord], num_classes: usize, config: &TrainConfig) -> Result<()> {
    if data.len() < config.schedule.batch_size {
        return Err(Error::Validation(format!(
            "{} training samples for batch size {}",
            data.len(),
            config.schedule.batch_size
        )));
    }
    if num_classes == 0 || num_classes > u8::MAX as usize - 1 {
        return Err(Error::Validation(format!("unsupported class count {num_classes}")));
    }
    Ok(())
}

const MAGIC: &[u8; 8] = b"LTUDACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    k: usize,
    dim: usize,
    momentum: f64,
    labeled_initialized: Vec<bool>,
    unlabeled_initialized: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    num_classes: usize,
    stage: u8,
    step: u64,
    total_steps: u64,
    global_step: u64,
    num_params: usize,
    rng: RngState,
    banks: Option<BankHeader>,
}

/// A checkpoint's configuration together with its state.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub num_classes: usize,
    pub state: TrainState,
}

fn put_f32(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_f64(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, config: &TrainConfig, num_classes: usize, state: &TrainState) -> Result<()> {
    let header = CheckpointHeader {
        config: config.clone(),
        num_classes,
        stage: state.stage,
        step: state.step,
        total_steps: state.total_steps,
        global_step: state.global_step,
        num_params: state.student.num_params(),
        rng: RngState {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        banks: state.banks.as_ref().map(|b| BankHeader {
            k: b.labeled.k,
            dim: b.labeled.dim,
            momentum: b.labeled.momentum,
            labeled_initialized: b.labeled.initialized.clone(),
            unlabeled_initialized: b.unlabeled.initialized.clone(),
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    put_f32(&mut out, &state.student.params);
    put_f32(&mut out, &state.teacher.params);
    put_f32(&mut out, &state.velocity);
    if let Some(b) = &state.banks {
        put_f64(&mut out, &b.labeled.protos);
        put_f64(&mut out, &b.unlabeled.protos);
    }
    let tmp = path.with_extension("bin.tmp");
    std::fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut student = UNet::<f32>::new(header.config.model.clone(), header.num_classes, 0)?;
    if student.num_params() != header.num_params {
        return Err(Error::Checkpoint("parameter count does not match the architecture".into()));
    }
    let n = header.num_params;
    student.params = r.f32s(n)?;
    let mut teacher = student.clone();
    teacher.params = r.f32s(n)?;
    let velocity = r.f32s(n)?;
    let banks = match header.banks {
        Some(h) => {
            let mut banks = DualBanks::new(header.num_classes, h.k, h.dim, h.momentum)?;
            let len = banks.labeled.protos.len();
            let fill = |bank: &mut PrototypeBank, protos: Vec<f64>, init: Vec<bool>| -> Result<()> {
                if init.len() != bank.initialized.len() {
                    return Err(Error::Checkpoint("bank flags do not match its size".into()));
                }
                bank.protos = protos;
                bank.initialized = init;
                Ok(())
            };
            fill(&mut banks.labeled, r.f64s(len)?, h.labeled_initialized)?;
            fill(&mut banks.unlabeled, r.f64s(len)?, h.unlabeled_initialized)?;
            Some(banks)
        }
        None => None,
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint payload".into()));
    }
    let mut rng = ChaCha8Rng::from_seed(header.rng.seed);
    rng.set_stream(header.rng.stream);
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Checkpoint("malformed rng position".into()))?;
    rng.set_word_pos(word_pos);
    Ok(Checkpoint {
        config: header.config,
        num_classes: header.num_classes,
        state: TrainState {
            stage: header.stage,
            step: header.step,
            total_steps: header.total_steps,
            global_step: header.global_step,
            student,
            teacher,
            velocity,
            banks,
            rng,
        },
    })
}

/// Appends step rows to `metrics.csv`.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        w.line(METRICS_HEADER)?;
        Ok(w)
    }

    pub fn append(path: &Path) -> Result<Self> {
        let exists = path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        if !exists {
            w.line(METRICS_HEADER)?;
        }
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        self.line(&rec.csv_row())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Which stages a `train` invocation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelection {
    One,
    Two,
    Both,
}

/// Run-directory bookkeeping for a training invocation.
pub struct RunOptions<'p> {
    pub out_dir: &'p Path,
    pub stages: StageSelection,
    /// Stage-1 checkpoint for `StageSelection::Two`; defaults to the one in `out_dir`.
    pub init: Option<&'p Path>,
    /// Continue an interrupted stage from this checkpoint.
    pub resume: Option<&'p Path>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

fn drive(trainer: &mut Trainer<'_>, metrics: &mut MetricsWriter, out_dir: &Path, verbose: bool) -> Result<()> {
    let every = trainer.config.schedule.checkpoint_every as u64;
    let config = trainer.config.clone();
    let num_classes = trainer.num_classes;
    let spe = steps_per_epoch(trainer.data.len(), config.schedule.batch_size);
    trainer.dump_dir = Some(out_dir.to_path_buf());
    trainer.run(None, |rec, state| {
        metrics.write(rec)?;
        if every > 0 && state.step % every == 0 && !state.is_finished() {
            metrics.flush()?;
            let p = out_dir.join(format!("ckpt_step{}.bin", state.global_step));
            save_checkpoint(&p, &config, num_classes, state)?;
        }
        if verbose && state.step % spe == 0 {
            eprintln!(
                "stage {} epoch {}/{}: total {:.4} lr {:.3e}",
                state.stage,
                state.step / spe,
                state.total_steps / spe,
                rec.losses.total,
                rec.lr
            );
        }
        Ok(())
    })?;
    metrics.flush()
}

fn stage_ckpt(out_dir: &Path, stage: u8) -> PathBuf {
    out_dir.join(format!("ckpt_stage{stage}.bin"))
}

/// Trains into `out_dir` (writing `config.json`, `metrics.csv` and
/// `ckpt_*.bin`) and returns the path of the final checkpoint.
pub fn train_run(config: &TrainConfig, dataset: &Dataset, opts: &RunOptions<'_>) -> Result<PathBuf> {
    config.validate()?;
    let out = opts.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, config.to_json() + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    let c = dataset.num_classes() as usize;
    let data = &dataset.train;
    let metrics_path = out.join("metrics.csv");

    if let Some(resume) = opts.resume {
        let ck = load_checkpoint(resume)?;
        if ck.num_classes != c {
            return Err(Error::Checkpoint("checkpoint class count differs from the dataset".into()));
        }
        let stage = ck.state.stage;
        let mut metrics = MetricsWriter::append(&metrics_path)?;
        let mut t = Trainer::resume(config.clone(), data, c, ck.state)?;
        drive(&mut t, &mut metrics, out, opts.verbose)?;
        let path = stage_ckpt(out, stage);
        save_checkpoint(&path, config, c, &t.state)?;
        if stage == 1 && opts.stages == StageSelection::Both && config.method != Method::Baseline {
            return run_stage2(config, data, c, &t.state, &mut metrics, opts);
        }
        return Ok(path);
    }

    match opts.stages {
        StageSelection::One | StageSelection::Both => {
            let mut metrics = MetricsWriter::create(&metrics_path)?;
            let mut t = Trainer::stage1(config.clone(), data, c)?;
            drive(&mut t, &mut metrics, out, opts.verbose)?;
            let path = stage_ckpt(out, 1);
            save_checkpoint(&path, config, c, &t.state)?;
            if opts.stages == StageSelection::One || config.method == Method::Baseline {
                return Ok(path);
            }
            run_stage2(config, data, c, &t.state, &mut metrics, opts)
        }
        StageSelection::Two => {
            let init = opts.init.map(Path::to_path_buf).unwrap_or_else(|| stage_ckpt(out, 1));
            let ck = load_checkpoint(&init)?;
            if ck.num_classes != c {
                return Err(Error::Checkpoint("checkpoint class count differs from the dataset".into()));
            }
            let mut metrics = MetricsWriter::append(&metrics_path)?;
            run_stage2(config, data, c, &ck.state, &mut metrics, opts)
        }
    }
}

fn run_stage2(
    config: &TrainConfig,
    data: &[SampleRecord],
    c: usize,
    stage1: &TrainState,
    metrics: &mut MetricsWriter,
    opts: &RunOptions<'_>,
) -> Result<PathBuf> {
    let mut t = Trainer::stage2(config.clone(), data, c, stage1)?;
    drive(&mut t, metrics, opts.out_dir, opts.verbose)?;
    let path = stage_ckpt(opts.out_dir, 2);
    save_checkpoint(&path, config, c, &t.state)?;
    Ok(path)
}

/// One ablation row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    pub checkpoint: PathBuf,
    pub report: MetricReport,
    /// Training wall-clock seconds, including a shared stage-1 run.
    pub train_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// `method, dice_1..dice_C, dice_mean, hd_1..hd_C, hd_mean`.
    pub fn to_csv(&self) -> String {
        let Some(first) = self.rows.first() else {
            return String::new();
        };
        let names: Vec<&str> = first.report.rows.iter().map(|r| r.class.as_str()).collect();
        let mut s = String::from("method");
        for n in &names {
            s.push_str(&format!(",dice_{n}"));
        }
        for n in &names {
            s.push_str(&format!(",hd_{n}"));
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(row.method.name());
            for r in &row.report.rows {
                s.push_str(&format!(",{:.6}", r.dice));
            }
            for r in &row.report.rows {
                s.push_str(&r.hd.map_or(",nan".into(), |v| format!(",{v:.6}")));
            }
            s.push('\n');
        }
        s
    }

    pub fn mean_dice(&self, method: Method) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method).map(|r| r.report.mean_dice)
    }

    pub fn variance_ratio(&self, method: Method) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method)
            .and_then(|r| r.report.variance.as_ref())
            .map(|v| v.ratio)
    }
}

/// Trains baseline, +CDA and the full method on the same data and seed and
/// scores each on the held-out split. +CDA and the full method share the
/// stage-1 run.
pub fn run_ablation(config: &TrainConfig, dataset: &Dataset, out_dir: &Path, verbose: bool) -> Result<AblationReport> {
    let eval_set = if dataset.test.is_empty() { &dataset.train } else { &dataset.test };
    let shared = stage_ckpt(&out_dir.join(Method::Cda.name()), 1);
    let mut stage1_seconds = 0.0;
    let mut rows = Vec::new();
    for method in Method::ALL {
        let cfg = TrainConfig {
            method,
            ..config.clone()
        };
        let dir = out_dir.join(method.name());
        let train = |stages, init: Option<&Path>| {
            let start = Instant::now();
            let opts = RunOptions {
                out_dir: &dir,
                stages,
                init,
                resume: None,
                verbose,
            };
            train_run(&cfg, dataset, &opts).map(|p| (p, start.elapsed().as_secs_f64()))
        };
        let (ckpt, seconds) = match method {
            Method::Baseline => train(StageSelection::Both, None)?,
            Method::Cda => {
                let (_, t1) = train(StageSelection::One, None)?;
                stage1_seconds = t1;
                let (p, t2) = train(StageSelection::Two, None)?;
                (p, t1 + t2)
            }
            Method::Full => {
                let (p, t2) = train(StageSelection::Two, Some(&shared))?;
                (p, stage1_seconds + t2)
            }
        };
        let model = load_checkpoint(&ckpt)?.state.student;
        let report = evaluate_model(&model, eval_set, cfg.tau, true)?;
        if verbose {
            eprintln!("{}: mean dice {:.4}, {:.0} s", method.name(), report.mean_dice, seconds);
        }
        rows.push(AblationRow {
            method,
            checkpoint: ckpt,
            report,
            train_seconds: seconds,
        });
    }
    let report = AblationReport { seed: config.seed, rows };
    let json_path = out_dir.join("ablation.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    let csv_path = out_dir.join("ablation.csv");
    std::fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    Ok(report)
}
