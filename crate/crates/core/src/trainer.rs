//! Two-phase training (energy net, then contour heads) and the evaluation
//! harness.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Phantom, CLASSES};
use crate::diff::{Graph, NodeId, ParamSet};
use crate::energymap::{charbonnier_loss, image_tensor, EnergyMap};
use crate::error::{Error, Result};
use crate::evolution::{boxes_from_energy, boxes_from_ground_truth, BBox, Instance, PipelineConfig};
use crate::geometry::{mask_dice, mask_iou, Mask};
use crate::model::{Bindings, SnakeModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub energy_epochs: usize,
    pub snake_epochs: usize,
    pub batch_size: usize,
    /// Step size of the energy pretraining.
    pub energy_learning_rate: f64,
    /// Step size of the contour phase.
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub momentum: f64,
    /// Box jitter used to build training boxes.
    pub jitter: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Test hook: poisons the first loss of this (1-based) epoch with NaN.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inject_nan_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            energy_epochs: 40,
            snake_epochs: 60,
            batch_size: 8,
            energy_learning_rate: 1e-2,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            decay_every: 20,
            momentum: 0.9,
            jitter: 0.1,
            grad_clip: None,
            inject_nan_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if [self.learning_rate, self.energy_learning_rate].iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.decay_every == 0 {
            return bad("lr_decay must lie in (0, 1] and decay_every be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..=0.3).contains(&self.jitter) {
            return bad("jitter must lie in [0, 0.3]");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, phase: Phase, epoch: usize) -> f64 {
        let base = match phase {
            Phase::Energy => self.energy_learning_rate,
            Phase::Snake => self.learning_rate,
        };
        base * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Everything a run needs besides paths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Energy,
    Snake,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Gradient descent with classical momentum: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut ParamSet], grads: &[Vec<f64>], lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let tensors = params.iter_mut().flat_map(|p| p.tensors_mut().iter_mut());
        for ((t, g), v) in tensors.zip(grads).zip(&mut self.velocity) {
            for ((p, &gi), vi) in t.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *p -= lr * *vi;
            }
        }
    }
}

const STREAM_SHUFFLE: u64 = 100;
const STREAM_JITTER: u64 = 200;
const STREAM_EVAL: u64 = 300;

fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((stream << 48) | index);
    r
}

type SampleLoss<'a> = dyn Fn(&SnakeModel, &mut Graph, usize, usize) -> Result<Option<(NodeId, Vec<NodeId>)>> + 'a;

/// Shared minibatch loop. `loss(model, graph, sample, epoch)` returns the
/// sample's loss and the parameter leaves in the order of `params(model)`,
/// or `None` for a sample without supervision.
fn run_phase(
    model: &mut SnakeModel,
    cfg: &TrainConfig,
    phase: Phase,
    samples: usize,
    epochs: usize,
    loss: &SampleLoss<'_>,
    params: fn(&mut SnakeModel) -> Vec<&mut ParamSet>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let seed = model.config.seed;
    let mut opt = Sgd::new(cfg.momentum);
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(phase, epoch);
        let mut order: Vec<usize> = (0..samples).collect();
        order.shuffle(&mut stream_rng(seed, STREAM_SHUFFLE + phase as u64, epoch as u64));
        let (mut total, mut counted) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> = params(model).iter().flat_map(|p| p.tensors().iter().map(|t| vec![0.0; t.len()])).collect();
            let mut used = 0usize;
            for &i in batch {
                let mut g = Graph::new();
                let Some((mut l, leaves)) = loss(model, &mut g, i, epoch)? else {
                    continue;
                };
                if cfg.inject_nan_epoch == Some(epoch + 1) && counted == 0 {
                    l = g.scale(l, f64::NAN);
                }
                let v = g.value(l).item();
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite {phase:?} loss {v} at epoch {epoch}, sample {i} of batch {batch:?}"
                    )));
                }
                let mut gr = g.backward(l)?;
                for (acc, id) in grads.iter_mut().zip(&leaves) {
                    let d = gr.take(*id).expect("parameter leaf is tracked");
                    acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                }
                total += v;
                counted += 1;
                used += 1;
            }
            if used == 0 {
                continue;
            }
            let inv = 1.0 / used as f64;
            grads.iter_mut().flatten().for_each(|v| *v *= inv);
            let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite {phase:?} gradient at epoch {epoch}, batch {batch:?}"
                )));
            }
            if let Some(c) = cfg.grad_clip {
                if norm > c {
                    grads.iter_mut().flatten().for_each(|v| *v *= c / norm);
                }
            }
            opt.step(&mut params(model), &grads, lr);
        }
        let log = EpochLog {
            epoch: epoch + 1,
            phase,
            loss: if counted > 0 { total / counted as f64 } else { 0.0 },
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Fits the energy net to the analytic energy maps with the mean
/// Charbonnier loss on `e / 255`.
pub fn train_energy(model: &mut SnakeModel, cfg: &TrainConfig, scenes: &[Phantom], on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
    let inputs: Vec<_> = scenes.iter().map(|s| (image_tensor(&s.image), s.energy.normalized_tensor())).collect();
    let loss = |m: &SnakeModel, g: &mut Graph, i: usize, _: usize| {
        let w = m.energy.params.bind(g, true);
        let x = g.constant(inputs[i].0.clone());
        let y = m.energy.forward(g, w.ids(), x)?;
        let t = g.constant(inputs[i].1.clone());
        Ok(Some((charbonnier_loss(g, y, t)?, w.ids().to_vec())))
    };
    run_phase(model, cfg, Phase::Energy, scenes.len(), cfg.energy_epochs, &loss, |m| vec![&mut m.energy.params], on_epoch)
}

/// Energy maps predicted by the (frozen) energy net.
pub fn predicted_energy(model: &SnakeModel, scenes: &[Phantom]) -> Result<Vec<EnergyMap>> {
    scenes.iter().map(|s| model.predict_energy(&s.image)).collect()
}

/// Trains the feature extractor and both heads on jittered ground-truth
/// boxes. Per image the loss is the mean over instances of
/// `Σ_t L_iter(t) + L_ex`.
pub fn train_snake(model: &mut SnakeModel, cfg: &TrainConfig, scenes: &[Phantom], on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
    let energy = predicted_energy(model, scenes)?;
    train_snake_on(model, cfg, scenes, &energy, on_epoch)
}

/// [`train_snake`] over given energy maps, one per scene.
pub fn train_snake_on(
    model: &mut SnakeModel,
    cfg: &TrainConfig,
    scenes: &[Phantom],
    energy: &[EnergyMap],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if energy.len() != scenes.len() {
        return Err(Error::Config(format!("{} energy maps for {} scenes", energy.len(), scenes.len())));
    }
    let seed = model.config.seed;
    let loss = |m: &SnakeModel, g: &mut Graph, i: usize, epoch: usize| -> Result<Option<(NodeId, Vec<NodeId>)>> {
        let s = &scenes[i];
        if s.instances.is_empty() {
            return Ok(None);
        }
        let mut rng = stream_rng(seed, STREAM_JITTER, ((epoch as u64) << 24) | i as u64);
        let boxes = boxes_from_ground_truth(&s.instances, cfg.jitter, &mut rng)?;
        let b = m.bind(g, true);
        let maps = m.feature_maps(g, &b, &s.image, &energy[i])?;
        let mut total = None;
        for (bx, a) in boxes.iter().zip(&s.instances) {
            let (l, _) = m.instance_loss(g, &b, maps, bx, &a.polygon)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let mean = g.scale(total.expect("non-empty"), 1.0 / boxes.len() as f64);
        let Bindings { dcim, head, extreme } = b;
        Ok(Some((mean, dcim.into_iter().chain(head).chain(extreme).collect())))
    };
    run_phase(model, cfg, Phase::Snake, scenes.len(), cfg.snake_epochs, &loss, SnakeModel::snake_params_mut, on_epoch)
}

/// Where evaluation boxes come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BoxSource {
    /// Ground-truth boxes with seeded jitter.
    Gt { jitter: f64 },
    /// Components of the predicted energy map.
    Energy { threshold: f64 },
}

pub const DEFAULT_ENERGY_THRESHOLD: f64 = 200.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub instances: usize,
    pub iou: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub predictions: usize,
    /// Per ground-truth instance, 0 when unmatched.
    pub iou: Vec<f64>,
    pub dice: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub boxes: BoxSource,
    pub per_class: Vec<ClassScore>,
    pub miou: f64,
    pub mdice: f64,
    pub images: Vec<ImageRecord>,
    /// SHA-256 over the model checkpoint and the box source.
    pub fingerprint: String,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = String::from("class  n     IoU     Dice\n");
        for c in &self.per_class {
            s += &format!("{:<6} {:<5} {:.4}  {:.4}\n", c.class, c.instances, c.iou, c.dice);
        }
        s += &format!("mean         {:.4}  {:.4}\n", self.miou, self.mdice);
        s
    }
}

/// Greedy one-to-one matching in decreasing IoU; a prediction may only take
/// a ground truth of its own class unless its class is unknown (−1).
/// Returns `(iou, dice)` per ground-truth instance.
pub fn match_instances(pred: &[(i64, &Mask)], gt: &[(usize, &Mask)]) -> Result<Vec<(f64, f64)>> {
    let mut pairs = Vec::new();
    for (i, (pc, pm)) in pred.iter().enumerate() {
        for (j, (gc, gm)) in gt.iter().enumerate() {
            if *pc == -1 || *pc == *gc as i64 {
                let iou = mask_iou(pm, gm)?;
                if iou > 0.0 {
                    pairs.push((iou, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![(0.0, 0.0); gt.len()];
    let (mut pu, mut gu) = (vec![false; pred.len()], vec![false; gt.len()]);
    for (iou, i, j) in pairs {
        if !pu[i] && !gu[j] {
            pu[i] = true;
            gu[j] = true;
            out[j] = (iou, mask_dice(pred[i].1, gt[j].1)?);
        }
    }
    Ok(out)
}

fn fingerprint(model: &SnakeModel, boxes: &BoxSource) -> Result<String> {
    let mut h = Sha256::new();
    h.update(model.encode()?);
    h.update(serde_json::to_vec(boxes).map_err(|e| Error::Format(e.to_string()))?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Boxes for one scene under `source`; jitter is seeded per scene index.
pub fn scene_boxes(model: &SnakeModel, scene: &Phantom, energy: &EnergyMap, index: usize, source: BoxSource) -> Result<Vec<BBox>> {
    match source {
        BoxSource::Gt { jitter } => {
            let mut rng = stream_rng(model.config.seed, STREAM_EVAL, index as u64);
            boxes_from_ground_truth(&scene.instances, jitter, &mut rng)
        }
        BoxSource::Energy { threshold } => boxes_from_energy(energy, threshold),
    }
}

/// Runs the pipeline on every scene and scores the final masks. Per-class
/// scores average over ground-truth instances; the means average over the
/// classes present.
pub fn evaluate(model: &SnakeModel, scenes: &[Phantom], source: BoxSource) -> Result<EvalReport> {
    evaluate_with(model, scenes, source, |m, s, e, b| m.segment_with_energy(&s.image, e, b))
}

/// [`evaluate`] with a custom segmentation step.
pub fn evaluate_with<F>(model: &SnakeModel, scenes: &[Phantom], source: BoxSource, mut segment: F) -> Result<EvalReport>
where
    F: FnMut(&SnakeModel, &Phantom, &EnergyMap, &[BBox]) -> Result<Vec<Instance>>,
{
    if scenes.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let mut sums = vec![(0usize, 0.0, 0.0); CLASSES];
    let mut images = Vec::with_capacity(scenes.len());
    for (index, s) in scenes.iter().enumerate() {
        let energy = model.predict_energy(&s.image)?;
        let boxes = scene_boxes(model, s, &energy, index, source)?;
        let inst = segment(model, s, &energy, &boxes)?;
        let pred: Vec<(i64, &Mask)> = inst.iter().map(|i| (i.bbox.class_id, &i.mask)).collect();
        let gt: Vec<(usize, &Mask)> = s.instances.iter().map(|a| a.class).zip(&s.masks).collect();
        let scores = match_instances(&pred, &gt)?;
        for (a, &(iou, dice)) in s.instances.iter().zip(&scores) {
            let e = &mut sums[a.class];
            *e = (e.0 + 1, e.1 + iou, e.2 + dice);
        }
        images.push(ImageRecord {
            index,
            predictions: inst.len(),
            iou: scores.iter().map(|s| s.0).collect(),
            dice: scores.iter().map(|s| s.1).collect(),
        });
    }
    let per_class: Vec<ClassScore> = sums
        .iter()
        .enumerate()
        .filter(|(_, s)| s.0 > 0)
        .map(|(class, &(n, iou, dice))| ClassScore {
            class,
            instances: n,
            iou: iou / n as f64,
            dice: dice / n as f64,
        })
        .collect();
    let k = per_class.len().max(1) as f64;
    Ok(EvalReport {
        boxes: source,
        miou: per_class.iter().map(|c| c.iou).sum::<f64>() / k,
        mdice: per_class.iter().map(|c| c.dice).sum::<f64>() / k,
        per_class,
        images,
        fingerprint: fingerprint(model, &source)?,
    })
}

/// Flags of the four ablation configurations, full model first.
pub const ABLATION_GRID: [(bool, bool); 4] = [(true, true), (false, true), (true, false), (false, false)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub use_demp_dcim: bool,
    pub use_amem: bool,
    pub miou: f64,
    pub mdice: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("DEMP&DCIM  AMEM   mIoU    mDice\n");
    let mark = |b: bool| if b { "yes" } else { "no" };
    for r in rows {
        s += &format!("{:<10} {:<6} {:.4}  {:.4}\n", mark(r.use_demp_dcim), mark(r.use_amem), r.miou, r.mdice);
    }
    s
}
