use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{Backbone, FeatureBundle, Image};
use crate::error::{Error, Result};
use crate::losses::{loss_align, loss_itc, loss_total, loss_tsc, LossReport};
use crate::numerics::{AdamState, LbfgsStatus, Tape, Tensor};
use crate::prompt_bank::PromptBank;
use crate::prototypes::{
    raw_prototype_from_features, refine_image_prototype, select_pixel_prototypes,
    ImagePrototypeBank, PixelPrototypeBank,
};
use crate::synthdata::{SampleId, TaskDataset, TaskSample};

use super::config::EngineConfig;

/// The complete experience: frozen backbone, prompt bank and both prototype banks.
#[derive(Clone, Debug)]
pub struct EngineState {
    config: EngineConfig,
    backbone: Backbone,
    prompts: PromptBank,
    image_bank: ImagePrototypeBank,
    pixel_bank: PixelPrototypeBank,
}

/// Per-patch anomaly scores and their maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyResult {
    pub patch_scores: Vec<f64>,
    pub image_score: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub task_id: u32,
    /// Mean loss terms per epoch.
    pub epoch_losses: Vec<LossReport>,
    /// Every training sample the task touched, in access order.
    pub accessed: Vec<SampleId>,
    pub ipr_status: LbfgsStatus,
    pub ipr_iterations: usize,
    pub optimizer_steps: u64,
    pub elapsed: Duration,
}

/// Per-image result of one forward/backward pass.
struct Step {
    report: LossReport,
    grads: Vec<Tensor>,
}

impl EngineState {
    pub fn new(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone)?;
        let d = config.backbone.dim;
        Ok(Self {
            prompts: PromptBank::new(config.train.components_per_task, d, config.train.prompt_len)?,
            image_bank: ImagePrototypeBank::new(d),
            pixel_bank: PixelPrototypeBank::new(config.prototypes_per_task(), d),
            backbone,
            config,
        })
    }

    /// Assembles a state from stored parts, checking that they agree.
    pub fn from_parts(
        config: EngineConfig,
        prompts: PromptBank,
        image_bank: ImagePrototypeBank,
        pixel_bank: PixelPrototypeBank,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.backbone.dim;
        let t = image_bank.len();
        let consistent = prompts.dim() == d
            && prompts.per_task() == config.train.components_per_task
            && prompts.prompt_len() == config.train.prompt_len
            && prompts.task_count() == t
            && image_bank.dim() == d
            && pixel_bank.dim() == d
            && pixel_bank.per_task() == config.prototypes_per_task()
            && pixel_bank.len() == t;
        if !consistent {
            return Err(Error::contract(format!(
                "experience parts disagree: {} prompt components, {} image prototypes, {} pixel entries",
                prompts.len(),
                image_bank.len(),
                pixel_bank.len()
            )));
        }
        Ok(Self {
            backbone: Backbone::new(config.backbone)?,
            config,
            prompts,
            image_bank,
            pixel_bank,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn prompts(&self) -> &PromptBank {
        &self.prompts
    }

    pub fn image_bank(&self) -> &ImagePrototypeBank {
        &self.image_bank
    }

    pub fn pixel_bank(&self) -> &PixelPrototypeBank {
        &self.pixel_bank
    }

    pub fn tasks_completed(&self) -> usize {
        self.image_bank.len()
    }

    /// The state with every stored value rounded to `f32`, as a save/load
    /// round trip would leave it.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        out.prompts.round_to_f32();
        let mut image_bank = ImagePrototypeBank::new(self.image_bank.dim());
        for (t, p) in self.image_bank.entries() {
            let r: Vec<f64> = p.iter().map(|&x| f64::from(x as f32)).collect();
            image_bank
                .integrate(*t, r)
                .expect("rounding keeps rows near unit norm");
        }
        let mut pixel_bank =
            PixelPrototypeBank::new(self.pixel_bank.per_task(), self.pixel_bank.dim());
        for (t, p) in self.pixel_bank.entries() {
            pixel_bank
                .integrate(*t, p.round_to_f32())
                .expect("rounding keeps rows near unit norm");
        }
        out.image_bank = image_bank;
        out.pixel_bank = pixel_bank;
        out
    }

    /// Un-prompted image-level feature used to condition the prompt.
    pub fn base_feature(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.backbone.encode(image)?.image.into_data())
    }

    /// Features of the adapted model with an image-conditioned prompt.
    pub fn adapted_features(&self, image: &Image) -> Result<FeatureBundle> {
        let base = self.base_feature(image)?;
        let prompt = self.prompts.assemble_prompt(&base)?.prompt;
        self.backbone.encode_with_prompt(image, &prompt)
    }

    /// Trains on the next task. On error the state is left unchanged.
    pub fn train_task(&mut self, dataset: &TaskDataset) -> Result<TrainReport> {
        let start = Instant::now();
        let task = dataset.task_id;
        let expected = self.tasks_completed() as u32 + 1;
        if task != expected {
            return Err(Error::contract(format!(
                "train_task: got task {task}, expected task {expected}"
            )));
        }
        if dataset.train.is_empty() {
            return Err(Error::domain(format!(
                "task {task} has no training samples"
            )));
        }
        if let Some(s) = dataset.train.iter().find(|s| s.is_anomalous) {
            return Err(Error::contract(format!(
                "training sample {} is anomalous; training data must be normal only",
                s.id
            )));
        }
        let mut work = self.clone();
        let report = work.run_task(dataset, start)?;
        *self = work;
        Ok(report)
    }

    fn run_task(&mut self, dataset: &TaskDataset, start: Instant) -> Result<TrainReport> {
        let task = dataset.task_id;
        let train_cfg = self.config.train;
        let mut accessed = Vec::new();
        let mut touch = |s: &TaskSample| {
            accessed.push(s.id);
        };

        // Pre-stage: base features, prompt expansion, image prototype.
        let base: Vec<Vec<f64>> = dataset
            .train
            .par_iter()
            .map(|s| self.base_feature(&s.image))
            .collect::<Result<_>>()?;
        dataset.train.iter().for_each(&mut touch);

        self.prompts
            .expand(task, mix_seed(train_cfg.seed, task, 0))?;
        let raw = raw_prototype_from_features(&base)?;
        let refined = refine_image_prototype(&raw, &self.image_bank, &train_cfg.lbfgs)?;
        self.image_bank.integrate(task, refined.prototype.clone())?;
        let target = refined.prototype;

        // Training stage.
        let mut adam =
            AdamState::new(train_cfg.adam, &self.prompts.trainable_parameters().tensors)?;
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        let mut epoch_losses = Vec::with_capacity(train_cfg.epochs);
        for epoch in 0..train_cfg.epochs {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(train_cfg.seed, task, epoch as u64 + 1));
            order.shuffle(&mut rng);
            let mut sum = LossReport::default();
            for batch in order.chunks(train_cfg.batch_size) {
                batch.iter().for_each(|&i| touch(&dataset.train[i]));
                let steps: Vec<Step> = batch
                    .par_iter()
                    .map(|&i| self.image_step(&dataset.train[i], &base[i], &target))
                    .collect::<Result<_>>()?;
                let mut grads: Vec<Tensor> = steps[0]
                    .grads
                    .iter()
                    .map(|g| Tensor::zeros(g.shape()))
                    .collect();
                // Fixed reduction order keeps the update deterministic.
                for step in &steps {
                    for (acc, g) in grads.iter_mut().zip(&step.grads) {
                        acc.data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(a, x)| *a += x);
                    }
                    sum.align += step.report.align;
                    sum.itc += step.report.itc;
                    sum.tsc += step.report.tsc;
                    sum.total += step.report.total;
                    sum.same_class_pairs = step.report.same_class_pairs;
                    sum.cross_class_pairs = step.report.cross_class_pairs;
                }
                let scale = 1.0 / steps.len() as f64;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|x| *x *= scale);
                }
                let mut params = self.prompts.trainable_tensors_mut();
                adam.step(&mut params, &grads)?;
            }
            let n = dataset.train.len() as f64;
            let mean = LossReport {
                align: sum.align / n,
                itc: sum.itc / n,
                tsc: sum.tsc / n,
                total: sum.total / n,
                ..sum
            };
            log::info!(
                "task {task} epoch {}: total {:.5} (align {:.5}, tsc {:.5}, itc {:.5})",
                epoch + 1,
                mean.total,
                mean.align,
                mean.tsc,
                mean.itc
            );
            epoch_losses.push(mean);
        }

        // Post-stage: freeze, then select pixel prototypes with the adapted model.
        self.prompts.freeze_all();
        let patch_sets: Vec<Tensor> = dataset
            .train
            .par_iter()
            .zip(base.par_iter())
            .map(|(s, b)| {
                let prompt = self.prompts.assemble_prompt(b)?.prompt;
                Ok(self.backbone.encode_with_prompt(&s.image, &prompt)?.patches)
            })
            .collect::<Result<_>>()?;
        dataset.train.iter().for_each(&mut touch);
        let d = self.config.backbone.dim;
        let all: Vec<f64> = patch_sets
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect();
        let candidates = Tensor::matrix(all.len() / d, d, all)?;
        let selected = select_pixel_prototypes(
            &candidates,
            &self.pixel_bank,
            self.config.prototypes_per_task(),
        )?;
        self.pixel_bank.integrate(task, selected)?;

        Ok(TrainReport {
            task_id: task,
            epoch_losses,
            accessed,
            ipr_status: refined.status,
            ipr_iterations: refined.iterations,
            optimizer_steps: adam.steps_taken(),
            elapsed: start.elapsed(),
        })
    }

    /// Forward and backward pass for one training image.
    fn image_step(&self, sample: &TaskSample, base: &[f64], target: &[f64]) -> Result<Step> {
        let mut tape = Tape::new();
        let (report, loss, trainable) = self.record_loss(&mut tape, sample, base, target)?;
        tape.backward(loss)?;
        let grads = trainable.iter().map(|&v| tape.grad(v)).collect();
        Ok(Step { report, grads })
    }

    /// Records the full training objective for one image on `tape`. Returns
    /// the loss report, the loss node and the trainable leaves in
    /// [`PromptBank::trainable_parameters`] order.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        sample: &TaskSample,
        base: &[f64],
        target: &[f64],
    ) -> Result<(LossReport, crate::numerics::Var, Vec<crate::numerics::Var>)> {
        let assembly = self.prompts.assemble_on_tape(tape, base)?;
        let (out, _) = self
            .backbone
            .forward(tape, &sample.image, Some(assembly.prompt), false)?;
        let align = loss_align(tape, out.image, target)?;
        let itc = loss_itc(tape, out.patches, &self.pixel_bank)?;
        let (tsc, same, cross) = loss_tsc(
            tape,
            out.patches,
            &sample.segment_labels,
            self.config.train.tsc_sign,
        )?;
        let mut report = loss_total(
            tape.value(align).item()?,
            tape.value(tsc).item()?,
            tape.value(itc).item()?,
        )
        .map_err(|e| Error::NonFinite(format!("loss for sample {}: {e}", sample.id)))?;
        report.same_class_pairs = same;
        report.cross_class_pairs = cross;
        let partial = tape.add(align, tsc)?;
        let total = tape.add(partial, itc)?;
        Ok((report, total, assembly.trainable.flat()))
    }

    /// Nearest-prototype scoring over the whole pixel bank; no task identity is used.
    pub fn score_image(&self, image: &Image) -> Result<AnomalyResult> {
        if self.pixel_bank.is_empty() {
            return Err(Error::contract(
                "score_image: the pixel prototype bank is empty",
            ));
        }
        let features = self.adapted_features(image)?;
        self.score_patches(&features.patches)
    }

    /// Scores precomputed patch features (`N_p × d`) against the pixel bank.
    pub fn score_patches(&self, patches: &Tensor) -> Result<AnomalyResult> {
        if self.pixel_bank.is_empty() {
            return Err(Error::contract(
                "score_image: the pixel prototype bank is empty",
            ));
        }
        if patches.cols() != self.pixel_bank.dim() {
            return Err(Error::Shape {
                op: "score_patches",
                expected: vec![patches.rows(), self.pixel_bank.dim()],
                got: patches.shape().to_vec(),
            });
        }
        let bank = self.pixel_bank.normalized_rows()?;
        let mut tape = Tape::new();
        let p = tape.constant(patches.clone());
        let unit = tape.normalize_rows(p)?;
        let b = tape.constant(bank);
        let sims = tape.matmul_t(unit, b)?;
        let best = tape.row_max(sims)?;
        let patch_scores: Vec<f64> = tape.value(best).data().iter().map(|s| 1.0 - s).collect();
        let image_score = patch_scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(AnomalyResult {
            patch_scores,
            image_score,
        })
    }
}

fn mix_seed(seed: u64, task: u32, salt: u64) -> u64 {
    seed ^ u64::from(task).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ salt.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}
