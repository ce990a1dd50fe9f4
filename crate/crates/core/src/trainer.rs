//! Optimization loop for every method variant.

use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FinetuneScope, Method};
use crate::data::{compose_batch, AugmentParams, BatchLayout, DomainDatasets, Image, LabeledSample, Mask, SampleBatch, UnlabeledSample};
use crate::eval::mean_dice;
use crate::losses::{consistency_loss_grad, contrastive_loss_grad, seg_loss_grad, total_loss, LossBreakdown};
use crate::mean_teacher::{consistency_weight, ema_update, perturb, TeacherState};
use crate::model::{build_model, stack_images, ModelParams, SegPass, TensorRole};
use crate::{DomainId, Error, Result};

/// `lr0 * decay^floor(k / step)`.
pub fn lr_schedule(k: usize, lr0: f64, decay: f64, step: usize) -> f64 {
    lr0 * decay.powi((k / step.max(1)) as i32)
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let n = params.parameter_count();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One update of every trainable tensor accepted by `keep`. Running
    /// statistics are never touched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, keep: &dyn Fn(&str, TensorRole) -> bool) {
        self.t += 1;
        let g = grads.flatten(|_, _| true);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut offset = 0;
        params.visit_mut(&mut |name, role, p| {
            let range = offset..offset + p.len();
            offset += p.len();
            if !role.trainable() || !keep(name, role) {
                return;
            }
            for ((w, &gi), (mi, vi)) in p
                .iter_mut()
                .zip(&g[range.clone()])
                .zip(m[range.clone()].iter_mut().zip(v[range].iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        });
    }
}

/// Number of samples read from each pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolAccess {
    pub source_labeled: usize,
    pub target_labeled: usize,
    pub target_unlabeled: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iter: usize,
    pub l_sup: f64,
    /// Unweighted consistency loss.
    pub l_unsup: f64,
    pub l_ct: f64,
    pub total: f64,
    pub lr: f64,
    pub consistency_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub iter: usize,
    pub val_dice: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<LossRow>,
    pub validation: Vec<ValidationRow>,
    /// Iteration of the selected model; 0 is the initialization.
    pub best_iteration: usize,
    pub best_val_dice: Option<f64>,
}

impl TrainHistory {
    pub fn losses_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.losses {
            w.serialize(r)?;
        }
        if self.losses.is_empty() {
            w.write_record(["iter", "l_sup", "l_unsup", "l_ct", "total", "lr", "consistency_weight"])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validation_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.validation {
            w.serialize(r)?;
        }
        if self.validation.is_empty() {
            w.write_record(["iter", "val_dice"])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn read_losses_csv(path: &Path) -> Result<Vec<LossRow>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}

/// Result of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub consistency_weight: f64,
    pub lr: f64,
}

fn scope_keep(scope: Option<FinetuneScope>) -> impl Fn(&str, TensorRole) -> bool {
    move |name: &str, _| match scope {
        Some(FinetuneScope::LastBlock) => {
            name.starts_with("dec.0.") || name.starts_with("dsbn.dec.0.") || name.starts_with("out.")
        }
        _ => true,
    }
}

fn masks(samples: &[&Mask]) -> Result<Array3<u8>> {
    let views: Vec<_> = samples.iter().map(|m| m.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Flipped copies of a batch, one shared transform per labeled pair.
struct Prepared {
    source: Vec<(Image, Mask)>,
    target: Vec<(Image, Mask)>,
    unlabeled: Vec<Image>,
}

fn prepare(batch: &SampleBatch, augment: bool, rngs: &mut StepRngs) -> Result<Prepared> {
    let labeled = |set: &[LabeledSample], rng: &mut ChaCha8Rng| -> Result<Vec<(Image, Mask)>> {
        set.iter()
            .map(|s| {
                if !augment {
                    return Ok((s.image.clone(), s.mask.clone()));
                }
                let p = AugmentParams::sample(rng, s.image.dim(), s.image.dim())?;
                Ok((p.apply_image(&s.image)?, p.apply_mask(&s.mask)?))
            })
            .collect()
    };
    let source = labeled(&batch.source_labeled, &mut rngs.augment_source)?;
    let target = labeled(&batch.target_labeled, &mut rngs.augment_target)?;
    let rng = &mut rngs.augment_unlabeled;
    let unlabeled = batch
        .target_unlabeled
        .iter()
        .map(|u: &UnlabeledSample| {
            if augment {
                AugmentParams::sample(rng, u.image.dim(), u.image.dim())?.apply_image(&u.image)
            } else {
                Ok(u.image.clone())
            }
        })
        .collect::<Result<_>>()?;
    Ok(Prepared {
        source,
        target,
        unlabeled,
    })
}

/// Independent random streams, one per consumer, so that methods reading
/// the same pools see the same draws.
#[derive(Debug, Clone)]
pub struct StepRngs {
    pub source_pool: ChaCha8Rng,
    pub target_pool: ChaCha8Rng,
    pub unlabeled_pool: ChaCha8Rng,
    pub augment_source: ChaCha8Rng,
    pub augment_target: ChaCha8Rng,
    pub augment_unlabeled: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl StepRngs {
    pub fn new(seed: u64, phase: u64) -> Self {
        let make = |i: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(phase * 16 + i);
            r
        };
        Self {
            source_pool: make(1),
            target_pool: make(2),
            unlabeled_pool: make(3),
            augment_source: make(4),
            augment_target: make(5),
            augment_unlabeled: make(6),
            noise: make(7),
        }
    }

    /// Draws a batch with `layout`, each pool from its own stream.
    pub fn compose(
        &mut self,
        source: &[LabeledSample],
        target: &[LabeledSample],
        unlabeled: &[UnlabeledSample],
        layout: BatchLayout,
    ) -> Result<SampleBatch> {
        let s = compose_batch(source, &[], &[], BatchLayout::new(layout.n_source_labeled, 0, 0), &mut self.source_pool)?;
        let t = compose_batch(&[], target, &[], BatchLayout::new(0, layout.n_target_labeled, 0), &mut self.target_pool)?;
        let u = compose_batch(&[], &[], unlabeled, BatchLayout::new(0, 0, layout.n_target_unlabeled), &mut self.unlabeled_pool)?;
        Ok(SampleBatch {
            source_labeled: s.source_labeled,
            target_labeled: t.target_labeled,
            target_unlabeled: u.target_unlabeled,
        })
    }
}

/// One forward group: images sharing a normalization batch and a route.
struct Group {
    domain: DomainId,
    x: Array4<f64>,
    source: Range<usize>,
    target: Range<usize>,
    unlabeled: Range<usize>,
    source_masks: Option<Array3<u8>>,
    target_masks: Option<Array3<u8>>,
}

fn concat_rows(parts: &[&Array4<f64>]) -> Result<Array4<f64>> {
    let views: Vec<_> = parts.iter().filter(|p| p.dim().0 > 0).map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// One step of `method` on `batch`. `k` counts from 1 to `k_max`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    batch: &SampleBatch,
    student: &mut ModelParams,
    teacher: Option<&mut TeacherState>,
    opt: &mut Adam,
    cfg: &ExperimentConfig,
    method: Method,
    scope: Option<FinetuneScope>,
    k: usize,
    k_max: usize,
    rngs: &mut StepRngs,
) -> Result<StepOutput> {
    let t = &cfg.train;
    let prep = prepare(batch, t.augment, rngs)?;
    let (ns, nt, nu) = (prep.source.len(), prep.target.len(), prep.unlabeled.len());
    let stack = |imgs: Vec<&Image>| -> Result<Array4<f64>> {
        if imgs.is_empty() {
            let size = student.arch.in_channels;
            Ok(Array4::zeros((0, size, 0, 0)))
        } else {
            stack_images(imgs)
        }
    };
    let xs = stack(prep.source.iter().map(|p| &p.0).collect())?;
    let xt = stack(prep.target.iter().map(|p| &p.0).collect())?;
    let xu = stack(prep.unlabeled.iter().collect())?;
    let ys = (ns > 0).then(|| masks(&prep.source.iter().map(|p| &p.1).collect::<Vec<_>>())).transpose()?;
    let yt = (nt > 0).then(|| masks(&prep.target.iter().map(|p| &p.1).collect::<Vec<_>>())).transpose()?;

    let use_consistency = method.consistency() && nu > 0;
    let ramp = if use_consistency { consistency_weight(k, k_max)? } else { 0.0 };
    let lambda1 = t.lambda1 * ramp;
    let (xu_student, xu_teacher) = if use_consistency {
        let student_view = perturb(&xu, &mut rngs.noise, t.noise_sigma)?;
        (student_view, Some(perturb(&xu, &mut rngs.noise, t.noise_sigma)?))
    } else {
        (xu.clone(), None)
    };

    let mut groups = Vec::new();
    if method.domain_specific_norm() {
        if ns > 0 {
            groups.push(Group {
                domain: DomainId::Source,
                x: xs.clone(),
                source: 0..ns,
                target: 0..0,
                unlabeled: 0..0,
                source_masks: ys.clone(),
                target_masks: None,
            });
        }
        if nt + nu > 0 {
            groups.push(Group {
                domain: DomainId::Target,
                x: concat_rows(&[&xt, &xu_student])?,
                source: 0..0,
                target: 0..nt,
                unlabeled: nt..nt + nu,
                source_masks: None,
                target_masks: yt.clone(),
            });
        }
    } else {
        groups.push(Group {
            domain: DomainId::Target,
            x: concat_rows(&[&xs, &xt, &xu_student])?,
            source: 0..ns,
            target: ns..ns + nt,
            unlabeled: ns + nt..ns + nt + nu,
            source_masks: ys.clone(),
            target_masks: yt.clone(),
        });
    }

    let teacher_probs = match (&xu_teacher, teacher.as_ref()) {
        (Some(x), Some(tch)) => Some(tch.params.segment_pass(x, DomainId::Target)?.probs),
        (Some(_), None) => return Err(Error::Config(format!("method {method} needs a teacher"))),
        _ => None,
    };

    let mut l_sup = 0.0;
    let mut l_unsup = 0.0;
    let mut passes: Vec<(SegPass, Array4<f64>)> = Vec::with_capacity(groups.len());
    for g in &groups {
        let pass = student.segment_pass(&g.x, g.domain)?;
        let mut dprobs = Array4::zeros(pass.probs.raw_dim());
        for (range, y) in [(&g.source, &g.source_masks), (&g.target, &g.target_masks)] {
            if range.is_empty() {
                continue;
            }
            let y = y.as_ref().expect("masks for labeled rows");
            let p = pass.probs.slice(s![range.clone(), .., .., ..]).to_owned();
            let (l, grad) = seg_loss_grad(&p, y, t.seg_loss)?;
            l_sup += l;
            dprobs.slice_mut(s![range.clone(), .., .., ..]).assign(&grad);
        }
        if !g.unlabeled.is_empty() {
            if let Some(tp) = &teacher_probs {
                let p = pass.probs.slice(s![g.unlabeled.clone(), .., .., ..]).to_owned();
                let (l, grad) = consistency_loss_grad(&p, tp)?;
                l_unsup = l;
                dprobs.slice_mut(s![g.unlabeled.clone(), .., .., ..]).assign(&(grad * lambda1));
            }
        }
        passes.push((pass, dprobs));
    }

    let mut grads = student.zeros_like();
    let mut extra: Vec<Option<Array4<f64>>> = vec![None; passes.len()];
    let mut l_ct = 0.0;
    let lambda2 = if method.contrastive() { t.lambda2 } else { 0.0 };
    if method.contrastive() {
        let m = ns.min(nt);
        let (src, tgt) = (&passes[0].0, &passes[1].0);
        let rows = s![..m, .., .., ..];
        let hs_i = student.head_pass(src.encoder.bottleneck.slice(rows));
        let ht_j = student.head_pass(tgt.encoder.bottleneck.slice(rows));
        let xs_m = xs.slice(rows).to_owned();
        let xt_m = xt.slice(rows).to_owned();
        let cross_t = student.encoder_pass(&xs_m, DomainId::Target)?;
        let cross_s = student.encoder_pass(&xt_m, DomainId::Source)?;
        let ht_i = student.head_pass(cross_t.bottleneck.view());
        let hs_j = student.head_pass(cross_s.bottleneck.view());
        let (l, g) = contrastive_loss_grad(&hs_i.embeddings, &ht_i.embeddings, &hs_j.embeddings, &ht_j.embeddings, t.tau)?;
        l_ct = l;
        let scale = |a: Array2<f64>| a * lambda2;
        let d_si = student.head_backward(&hs_i, &scale(g.gs_i), &mut grads);
        let d_tj = student.head_backward(&ht_j, &scale(g.gt_j), &mut grads);
        let d_ti = student.head_backward(&ht_i, &scale(g.gt_i), &mut grads);
        let d_sj = student.head_backward(&hs_j, &scale(g.gs_j), &mut grads);
        extra[0] = Some(ModelParams::pad_rows(&d_si, src.encoder.bottleneck.dim().0));
        extra[1] = Some(ModelParams::pad_rows(&d_tj, tgt.encoder.bottleneck.dim().0));
        student.encoder_backward(&cross_t, d_ti, &mut grads);
        student.encoder_backward(&cross_s, d_sj, &mut grads);
    }

    let breakdown = total_loss(l_sup, l_unsup, l_ct, lambda1, lambda2)?;
    if ![l_sup, l_unsup, l_ct, breakdown.total].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            iteration: k,
            dump: format!("l_sup={l_sup} l_unsup={l_unsup} l_ct={l_ct} total={}", breakdown.total),
        });
    }

    for ((pass, dprobs), ex) in passes.iter().zip(&extra) {
        student.segment_backward(pass, dprobs, ex.as_ref(), &mut grads);
    }
    let first_layer = match scope {
        Some(FinetuneScope::LastBlock) => student.norm_layers().len() - 2,
        _ => 0,
    };
    for ((pass, _), g) in passes.iter().zip(&groups) {
        student.commit_stats_from(&pass.stats(), g.domain, first_layer)?;
    }
    let lr = lr_schedule(k - 1, t.lr0, t.lr_decay, t.lr_step);
    opt.step(student, &grads, lr, &scope_keep(scope));
    if let Some(tch) = teacher {
        ema_update(tch, student, t.ema_decay)?;
    }
    Ok(StepOutput {
        breakdown,
        consistency_weight: ramp,
        lr,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Student after the last iteration.
    pub student: ModelParams,
    /// Student with the best validation Dice (the final one without validation).
    pub best: ModelParams,
    pub teacher: Option<TeacherState>,
    pub history: TrainHistory,
    pub access: PoolAccess,
}

struct Pools<'a> {
    source_labeled: &'a [LabeledSample],
    target_labeled: &'a [LabeledSample],
    target_unlabeled: &'a [UnlabeledSample],
    validation: &'a [LabeledSample],
}

struct LoopState<'a> {
    cfg: &'a ExperimentConfig,
    rngs: StepRngs,
    history: TrainHistory,
    access: PoolAccess,
    best_dice: f64,
}

impl LoopState<'_> {
    #[allow(clippy::too_many_arguments)]
    fn run(
        &mut self,
        student: &mut ModelParams,
        best: &mut ModelParams,
        method: Method,
        scope: Option<FinetuneScope>,
        layout: BatchLayout,
        pools: &Pools,
        k_max: usize,
        offset: usize,
    ) -> Result<Option<TeacherState>> {
        let mut teacher = method
            .consistency()
            .then(|| TeacherState::from_student(student, self.cfg.train.ema_decay));
        let mut opt = Adam::new(student);
        let every = self.cfg.train.validate_every;
        for k in 1..=k_max {
            let batch = self.rngs.compose(pools.source_labeled, pools.target_labeled, pools.target_unlabeled, layout)?;
            self.access.source_labeled += batch.source_labeled.len();
            self.access.target_labeled += batch.target_labeled.len();
            self.access.target_unlabeled += batch.target_unlabeled.len();
            let out = train_step(&batch, student, teacher.as_mut(), &mut opt, self.cfg, method, scope, k, k_max, &mut self.rngs)?;
            let b = out.breakdown;
            self.history.losses.push(LossRow {
                iter: offset + k,
                l_sup: b.l_sup,
                l_unsup: b.l_unsup,
                l_ct: b.l_ct,
                total: b.total,
                lr: out.lr,
                consistency_weight: out.consistency_weight,
            });
            if every > 0 && !pools.validation.is_empty() && (k % every == 0 || k == k_max) {
                let d = mean_dice(student, pools.validation, DomainId::Target)?;
                self.history.validation.push(ValidationRow {
                    iter: offset + k,
                    val_dice: d,
                });
                if d > self.best_dice {
                    self.best_dice = d;
                    self.history.best_iteration = offset + k;
                    self.history.best_val_dice = Some(d);
                    *best = student.clone();
                }
            }
        }
        if self.history.validation.is_empty() && k_max > 0 {
            *best = student.clone();
            self.history.best_iteration = offset + k_max;
        }
        Ok(teacher)
    }
}

/// Trains `cfg.method` on `ds`. Fine-tuning methods first train on the
/// labeled source pool for `k_max` iterations, then fine-tune the selected
/// model on the labeled target pool for `train.finetune_iters` iterations.
pub fn train(cfg: &ExperimentConfig, ds: &DomainDatasets) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_datasets(ds)?;
    let mut student = build_model(&cfg.model, cfg.seed)?;
    let mut state = LoopState {
        cfg,
        rngs: StepRngs::new(cfg.seed, 0),
        history: TrainHistory::default(),
        access: PoolAccess::default(),
        best_dice: f64::NEG_INFINITY,
    };
    let pools = Pools {
        source_labeled: &ds.source_labeled,
        target_labeled: &ds.target_labeled,
        target_unlabeled: &ds.target_unlabeled,
        validation: &ds.validation,
    };
    let mut best = student.clone();
    let k_max = cfg.train.k_max;
    let teacher = match cfg.method.finetune_scope() {
        None => state.run(&mut student, &mut best, cfg.method, None, cfg.method.effective_layout(cfg.batch), &pools, k_max, 0)?,
        Some(scope) => {
            let layout = Method::BaselineSource.effective_layout(cfg.batch);
            state.run(&mut student, &mut best, Method::BaselineSource, None, layout, &pools, k_max, 0)?;
            student = best.clone();
            state.rngs = StepRngs::new(cfg.seed, 1);
            state.best_dice = f64::NEG_INFINITY;
            state.history.validation.clear();
            let ft_pools = Pools {
                source_labeled: &[],
                target_unlabeled: &[],
                ..pools
            };
            let layout = BatchLayout::new(0, cfg.batch.n_target_labeled, 0);
            let iters = cfg.train.finetune_iters;
            state.run(&mut student, &mut best, Method::BaselineTarget, Some(scope), layout, &ft_pools, iters, k_max)?
        }
    };
    Ok(TrainOutcome {
        student,
        best,
        teacher,
        history: state.history,
        access: state.access,
    })
}

/// Fine-tunes `pretrained` on `target_labeled` for `cfg.train.finetune_iters`
/// iterations, updating only the tensors in `scope`.
pub fn finetune(
    pretrained: &ModelParams,
    scope: FinetuneScope,
    target_labeled: &[LabeledSample],
    cfg: &ExperimentConfig,
) -> Result<ModelParams> {
    Ok(finetune_run(pretrained, scope, target_labeled, cfg)?.student)
}

/// [`finetune`] with its loss history and pool counters.
pub fn finetune_run(
    pretrained: &ModelParams,
    scope: FinetuneScope,
    target_labeled: &[LabeledSample],
    cfg: &ExperimentConfig,
) -> Result<TrainOutcome> {
    if target_labeled.is_empty() {
        return Err(Error::Config("fine-tuning needs labeled target images".into()));
    }
    if cfg.batch.n_target_labeled < 2 {
        return Err(Error::Config("fine-tuning needs at least 2 labeled target images per batch".into()));
    }
    let mut state = LoopState {
        cfg,
        rngs: StepRngs::new(cfg.seed, 1),
        history: TrainHistory::default(),
        access: PoolAccess::default(),
        best_dice: f64::NEG_INFINITY,
    };
    let pools = Pools {
        source_labeled: &[],
        target_labeled,
        target_unlabeled: &[],
        validation: &[],
    };
    let mut student = pretrained.clone();
    let mut best = student.clone();
    let layout = BatchLayout::new(0, cfg.batch.n_target_labeled, 0);
    state.run(&mut student, &mut best, Method::BaselineTarget, Some(scope), layout, &pools, cfg.train.finetune_iters, 0)?;
    Ok(TrainOutcome {
        best: student.clone(),
        student,
        teacher: None,
        history: state.history,
        access: state.access,
    })
}
